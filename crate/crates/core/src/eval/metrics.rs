use std::collections::BTreeMap;

use crate::error::{invalid, FgsError, Result};
use crate::eval::scene::Mask;
use crate::nnmodel::Classifier;
use crate::pipeline::EditResult;
use crate::tensor::{cosine_similarity, Grid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Faithfulness {
    pub whole: f64,
    pub unedited: f64,
    /// The mask covers the whole image; `unedited` is reported as 0.
    pub degenerate: bool,
}

/// RMS pixel distance over the whole image and over the complement of the mask.
pub fn faithfulness_distance(input: &Grid, edited: &Grid, mask: &Mask) -> Result<Faithfulness> {
    input.ensure_same_shape(edited)?;
    if mask.shape() != input.shape() {
        return Err(FgsError::ShapeMismatch {
            expected: input.shape(),
            got: mask.shape(),
        });
    }
    let mut whole = 0.0;
    let mut outside = 0.0;
    let mut n_out = 0usize;
    for ((a, b), &m) in input.data().iter().zip(edited.data()).zip(mask.cells()) {
        let d = (a - b) * (a - b);
        whole += d;
        if !m {
            outside += d;
            n_out += 1;
        }
    }
    let whole = (whole / input.len() as f64).sqrt();
    if n_out == 0 {
        return Ok(Faithfulness {
            whole,
            unedited: 0.0,
            degenerate: true,
        });
    }
    Ok(Faithfulness {
        whole,
        unedited: (outside / n_out as f64).sqrt(),
        degenerate: false,
    })
}

pub const PATCH: usize = 4;
const FLAT_TOL: f64 = 1e-12;

fn patch_vectors(img: &Grid) -> Vec<Vec<f64>> {
    let (h, w) = img.shape();
    let mut out = Vec::with_capacity((h / PATCH) * (w / PATCH));
    for py in 0..h / PATCH {
        for px in 0..w / PATCH {
            let mut v: Vec<f64> = (0..PATCH * PATCH)
                .map(|i| img.get(py * PATCH + i / PATCH, px * PATCH + i % PATCH))
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter_mut().for_each(|x| *x -= mean);
            // centring a constant patch leaves rounding residue, not structure
            if v.iter().all(|x| x.abs() < FLAT_TOL) {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
            out.push(v);
        }
    }
    out
}

fn self_similarity(img: &Grid) -> Result<Vec<f64>> {
    let patches = patch_vectors(img);
    let mut m = Vec::with_capacity(patches.len() * patches.len());
    for a in &patches {
        for b in &patches {
            // flat patches have no direction; they count as orthogonal to everything
            m.push(cosine_similarity(a, b)?.value);
        }
    }
    Ok(m)
}

/// Frobenius distance between the 4×4-patch cosine self-similarity matrices,
/// scaled to an RMS over matrix entries.
pub fn structure_selfsim_distance(input: &Grid, edited: &Grid) -> Result<f64> {
    input.ensure_same_shape(edited)?;
    let (h, w) = input.shape();
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(invalid(format!(
            "image {h}x{w} does not tile into {PATCH}x{PATCH} patches"
        )));
    }
    let a = self_similarity(input)?;
    let b = self_similarity(edited)?;
    let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Editability {
    pub whole: f64,
    pub edited_region: f64,
}

/// Classifier log-probability of the target class on the image and on the mask crop.
pub fn editability_score(
    edited: &Grid,
    target: usize,
    classifier: &Classifier,
    mask: &Mask,
) -> Result<Editability> {
    if target >= classifier.classes() {
        return Err(invalid(format!("target class {target} out of range")));
    }
    let whole = classifier.log_probabilities(edited)?[target];
    let edited_region = classifier.log_probabilities(&mask.crop(edited))?[target];
    Ok(Editability {
        whole,
        edited_region,
    })
}

/// `(t, cos(d_cfg, d_fg))` for every step that evaluated a perturbed payload.
pub fn misalignment_curve(result: &EditResult) -> Result<Vec<(usize, f64)>> {
    result
        .steps
        .iter()
        .filter_map(|s| s.d_fg.as_ref().map(|d_fg| (s.t, &s.d_cfg, d_fg)))
        .map(|(t, d_cfg, d_fg)| Ok((t, cosine_similarity(d_cfg.data(), d_fg.data())?.value)))
        .collect()
}

/// Per-timestep mean over many curves, ordered by decreasing `t`.
pub fn mean_curve(curves: &[Vec<(usize, f64)>]) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for curve in curves {
        for &(t, c) in curve {
            let e = acc.entry(t).or_insert((0.0, 0));
            e.0 += c;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .rev()
        .map(|(t, (s, n))| (t, s / n as f64))
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
