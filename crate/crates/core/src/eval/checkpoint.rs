//! The `FGS1` container: magic, a little-endian `u32` metadata length, UTF-8
//! `key=value` lines, then every tensor as little-endian `f32`, row-major, in
//! the order listed by the `tensors` key.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use crate::diffusion::ScheduleKind;
use crate::error::{FgsError, Result};
use crate::nnmodel::{Architecture, DenoiserParams, TENSOR_NAMES};
use crate::pipeline::EditResult;

pub const MAGIC: &[u8; 4] = b"FGS1";
pub const VERSION: u32 = 1;

/// Keys the container writes itself.
const RESERVED: [&str; 3] = ["version", "tensors", "elements"];

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_f64(
        name: &str,
        rows: usize,
        cols: usize,
        values: impl IntoIterator<Item = f64>,
    ) -> Result<Self> {
        let data: Vec<f32> = values.into_iter().map(|v| v as f32).collect();
        if data.len() != rows * cols {
            return Err(FgsError::ShapeMismatch {
                expected: (rows, cols),
                got: (data.len(), 1),
            });
        }
        Ok(Self {
            name: name.into(),
            rows,
            cols,
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Free-form metadata such as `module`, `seed` and `schedule`.
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

fn bad(msg: impl Into<String>) -> FgsError {
    FgsError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut text = format!("version={VERSION}\n");
        for (k, v) in &self.metadata {
            if RESERVED.contains(&k.as_str()) {
                return Err(bad(format!("metadata key '{k}' is reserved")));
            }
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(bad(format!("metadata entry '{k}' cannot be encoded")));
            }
            text.push_str(&format!("{k}={v}\n"));
        }
        let mut specs = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if t.name.is_empty() || t.name.contains([':', ',', '=', '\n']) {
                return Err(bad(format!("tensor name '{}' cannot be encoded", t.name)));
            }
            if t.data.len() != t.rows * t.cols {
                return Err(bad(format!(
                    "tensor '{}' has {} values for shape {}x{}",
                    t.name,
                    t.data.len(),
                    t.rows,
                    t.cols
                )));
            }
            specs.push(format!("{}:{}x{}", t.name, t.rows, t.cols));
        }
        text.push_str(&format!("tensors={}\n", specs.join(",")));
        text.push_str(&format!("elements={}\n", self.element_count()));

        let meta_len = u32::try_from(text.len()).map_err(|_| bad("metadata too large"))?;
        let mut out = Vec::with_capacity(8 + text.len() + 4 * self.element_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing FGS1 magic"));
        }
        let meta_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() < meta_len {
            return Err(bad("truncated metadata"));
        }
        let text =
            std::str::from_utf8(&body[..meta_len]).map_err(|_| bad("metadata is not UTF-8"))?;
        let mut metadata = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("metadata line '{line}' lacks '='")))?;
            if metadata.insert(k.to_string(), v.to_string()).is_some() {
                return Err(bad(format!("duplicate metadata key '{k}'")));
            }
        }
        match metadata.remove("version").as_deref() {
            Some(v) if v == VERSION.to_string() => {}
            Some(v) => return Err(bad(format!("unsupported version {v}"))),
            None => return Err(bad("missing version")),
        }
        let specs = metadata
            .remove("tensors")
            .ok_or_else(|| bad("missing tensor list"))?;
        let declared: usize = metadata
            .remove("elements")
            .ok_or_else(|| bad("missing element count"))?
            .parse()
            .map_err(|_| bad("element count is not an integer"))?;

        let mut shapes = Vec::new();
        for spec in specs.split(',').filter(|s| !s.is_empty()) {
            let (name, dims) = spec
                .split_once(':')
                .ok_or_else(|| bad(format!("tensor entry '{spec}' lacks a shape")))?;
            let (r, c) = dims
                .split_once('x')
                .ok_or_else(|| bad(format!("tensor shape '{dims}' is not RxC")))?;
            let rows: usize = r
                .parse()
                .map_err(|_| bad(format!("bad row count in '{spec}'")))?;
            let cols: usize = c
                .parse()
                .map_err(|_| bad(format!("bad column count in '{spec}'")))?;
            shapes.push((name.to_string(), rows, cols));
        }
        let total: usize = shapes.iter().map(|(_, r, c)| r * c).sum();
        if total != declared {
            return Err(bad(format!(
                "tensor shapes hold {total} elements, metadata declares {declared}"
            )));
        }
        let payload = &body[meta_len..];
        if payload.len() != 4 * declared {
            return Err(bad(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                4 * declared
            )));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let tensors = shapes
            .into_iter()
            .map(|(name, rows, cols)| NamedTensor {
                name,
                rows,
                cols,
                data: values.by_ref().take(rows * cols).collect(),
            })
            .collect();
        Ok(Self { metadata, tensors })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Network weights in [`TENSOR_NAMES`] order, narrowed to `f32`.
pub fn params_to_checkpoint(
    params: &DenoiserParams,
    seed: u64,
    schedule: ScheduleKind,
    steps: usize,
) -> Result<Checkpoint> {
    let a = params.arch;
    let mut metadata = BTreeMap::new();
    metadata.insert("module".into(), "nnmodel".into());
    metadata.insert("seed".into(), seed.to_string());
    metadata.insert("schedule".into(), schedule.to_string());
    metadata.insert("steps".into(), steps.to_string());
    metadata.insert("shapes".into(), format!("{}x{}", a.height, a.width));
    metadata.insert("conditions".into(), a.conditions.to_string());
    let tensors = TENSOR_NAMES
        .iter()
        .zip(params.tensors())
        .map(|(name, t)| NamedTensor::from_f64(name, t.nrows(), t.ncols(), t.iter().copied()))
        .collect::<Result<_>>()?;
    Ok(Checkpoint { metadata, tensors })
}

fn meta<T: std::str::FromStr>(c: &Checkpoint, key: &str) -> Result<T> {
    c.metadata
        .get(key)
        .ok_or_else(|| bad(format!("missing '{key}'")))?
        .parse()
        .map_err(|_| bad(format!("'{key}' does not parse")))
}

/// The stored `(schedule, steps)` of a network checkpoint.
pub fn checkpoint_schedule(c: &Checkpoint) -> Result<(ScheduleKind, usize)> {
    let kind: String = meta(c, "schedule")?;
    Ok((
        kind.parse()
            .map_err(|_| bad(format!("unknown schedule '{kind}'")))?,
        meta(c, "steps")?,
    ))
}

pub fn params_from_checkpoint(c: &Checkpoint) -> Result<DenoiserParams> {
    if c.metadata.get("module").map(String::as_str) != Some("nnmodel") {
        return Err(bad("not a network checkpoint"));
    }
    let shapes: String = meta(c, "shapes")?;
    let (h, w) = shapes
        .split_once('x')
        .ok_or_else(|| bad("'shapes' is not HxW"))?;
    let arch = Architecture {
        height: h.parse().map_err(|_| bad("bad height"))?,
        width: w.parse().map_err(|_| bad("bad width"))?,
        conditions: meta(c, "conditions")?,
    };
    let mut params = DenoiserParams::zeros(arch);
    if c.tensors.len() != TENSOR_NAMES.len() {
        return Err(bad(format!(
            "expected {} tensors, found {}",
            TENSOR_NAMES.len(),
            c.tensors.len()
        )));
    }
    for ((name, slot), t) in TENSOR_NAMES
        .iter()
        .zip(params.tensors_mut())
        .zip(&c.tensors)
    {
        if t.name != *name {
            return Err(bad(format!("expected tensor '{name}', found '{}'", t.name)));
        }
        if (t.rows, t.cols) != slot.dim() {
            return Err(FgsError::ShapeMismatch {
                expected: slot.dim(),
                got: (t.rows, t.cols),
            });
        }
        *slot =
            Array2::from_shape_vec((t.rows, t.cols), t.data.iter().map(|&v| v as f64).collect())
                .expect("shape checked");
    }
    Ok(params)
}

/// The reconstruction, the edit and the inverted latent `z_T`.
pub fn edit_result_to_checkpoint(
    result: &EditResult,
    seed: u64,
    schedule: ScheduleKind,
) -> Result<Checkpoint> {
    let z_t = result
        .inversion
        .last()
        .ok_or_else(|| bad("empty inversion"))?;
    let mut metadata = BTreeMap::new();
    metadata.insert("module".into(), "pipeline".into());
    metadata.insert("seed".into(), seed.to_string());
    metadata.insert("schedule".into(), schedule.to_string());
    metadata.insert("steps".into(), result.steps.len().to_string());
    let (h, w) = result.edited.shape();
    metadata.insert("shapes".into(), format!("{h}x{w}"));
    let tensors = vec![
        NamedTensor::from_f64("recon", h, w, result.recon.data().iter().copied())?,
        NamedTensor::from_f64("edited", h, w, result.edited.data().iter().copied())?,
        NamedTensor::from_f64("inverted", h, w, z_t.value.data().iter().copied())?,
    ];
    Ok(Checkpoint { metadata, tensors })
}
