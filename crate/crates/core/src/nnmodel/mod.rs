//! A small attention denoiser over 16×16 images, with hand-written backprop.
//!
//! Shapes are listed in `ARCHITECTURE.md` at the repository root.

mod classifier;
mod train;

pub use classifier::{classifier_train, Classifier, ClassifierConfig};
pub use train::{
    draw_noised, loss_and_grads, loss_on, train, NoisedItem, TrainConfig, TrainOutcome,
};

use ndarray::{Array1, Array2, Axis};

use crate::denoiser::{Condition, Control, Denoiser, Prediction};
use crate::diffusion::{LatentState, NoiseSchedule};
use crate::error::{invalid, FgsError, Result};
use crate::tensor::{Grid, SeededRng};
use crate::transfer::{AttentionRecord, TransferPayload};

pub const MODEL_WIDTH: usize = 32;
pub const TIME_WIDTH: usize = 32;
pub const HIDDEN_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub height: usize,
    pub width: usize,
    /// Non-null condition ids; the table has one extra row for the null condition.
    pub conditions: usize,
}

impl Architecture {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: Architecture,
    pub token_weight: Array2<f64>,
    pub token_bias: Array2<f64>,
    pub position: Array2<f64>,
    pub time_weight: Array2<f64>,
    pub time_bias: Array2<f64>,
    pub condition: Array2<f64>,
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Array2<f64>,
    pub ff_in: Array2<f64>,
    pub ff_in_bias: Array2<f64>,
    pub ff_out: Array2<f64>,
    pub ff_out_bias: Array2<f64>,
    pub head: Array2<f64>,
    pub head_bias: Array2<f64>,
}

pub const TENSOR_NAMES: [&str; 16] = [
    "token_weight",
    "token_bias",
    "position",
    "time_weight",
    "time_bias",
    "condition",
    "query",
    "key",
    "value",
    "output",
    "ff_in",
    "ff_in_bias",
    "ff_out",
    "ff_out_bias",
    "head",
    "head_bias",
];

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.standard_normal())
}

impl DenoiserParams {
    pub fn zeros(arch: Architecture) -> Self {
        let (d, n, h) = (MODEL_WIDTH, arch.tokens(), HIDDEN_WIDTH);
        let z = |r, c| Array2::zeros((r, c));
        Self {
            arch,
            token_weight: z(1, d),
            token_bias: z(1, d),
            position: z(n, d),
            time_weight: z(TIME_WIDTH, d),
            time_bias: z(1, d),
            condition: z(arch.conditions + 1, d),
            query: z(d, d),
            key: z(d, d),
            value: z(d, d),
            output: z(d, d),
            ff_in: z(d, h),
            ff_in_bias: z(1, h),
            ff_out: z(h, d),
            ff_out_bias: z(1, d),
            head: z(d, 1),
            head_bias: z(1, 1),
        }
    }

    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        if arch.tokens() == 0 || arch.conditions == 0 {
            return Err(invalid(
                "architecture needs at least one token and one condition",
            ));
        }
        let mut rng = SeededRng::new(seed);
        let (d, n, h) = (MODEL_WIDTH, arch.tokens(), HIDDEN_WIDTH);
        let fan = |k: usize| 1.0 / (k as f64).sqrt();
        let mut p = Self::zeros(arch);
        p.token_weight = random_matrix(&mut rng, 1, d, 1.0);
        p.position = random_matrix(&mut rng, n, d, 0.5);
        p.time_weight = random_matrix(&mut rng, TIME_WIDTH, d, fan(TIME_WIDTH));
        p.condition = random_matrix(&mut rng, arch.conditions + 1, d, 0.5);
        p.query = random_matrix(&mut rng, d, d, fan(d));
        p.key = random_matrix(&mut rng, d, d, fan(d));
        p.value = random_matrix(&mut rng, d, d, fan(d));
        p.output = random_matrix(&mut rng, d, d, fan(d));
        p.ff_in = random_matrix(&mut rng, d, h, fan(d));
        p.ff_out = random_matrix(&mut rng, h, d, fan(h));
        p.head = random_matrix(&mut rng, d, 1, 0.1 * fan(d));
        Ok(p)
    }

    pub fn tensors(&self) -> [&Array2<f64>; 16] {
        [
            &self.token_weight,
            &self.token_bias,
            &self.position,
            &self.time_weight,
            &self.time_bias,
            &self.condition,
            &self.query,
            &self.key,
            &self.value,
            &self.output,
            &self.ff_in,
            &self.ff_in_bias,
            &self.ff_out,
            &self.ff_out_bias,
            &self.head,
            &self.head_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 16] {
        [
            &mut self.token_weight,
            &mut self.token_bias,
            &mut self.position,
            &mut self.time_weight,
            &mut self.time_bias,
            &mut self.condition,
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
            &mut self.ff_in,
            &mut self.ff_in_bias,
            &mut self.ff_out,
            &mut self.ff_out_bias,
            &mut self.head,
            &mut self.head_bias,
        ]
    }

    pub fn num_elements(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Reads one scalar by its position in the flattened [`TENSOR_NAMES`] order.
    pub fn get_flat(&self, mut index: usize) -> f64 {
        for t in self.tensors() {
            if index < t.len() {
                return t.as_slice().expect("standard layout")[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for t in self.tensors_mut() {
            if index < t.len() {
                t.as_slice_mut().expect("standard layout")[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &DenoiserParams, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, b);
        }
    }

    fn condition_row(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Null => Ok(self.arch.conditions),
            Condition::Class(id) if id < self.arch.conditions => Ok(id),
            Condition::Class(id) => Err(invalid(format!("unknown condition id {id}"))),
        }
    }
}

/// Sinusoidal features of the integer timestep.
pub fn timestep_embedding(t: usize) -> Array1<f64> {
    let half = TIME_WIDTH / 2;
    Array1::from_shape_fn(TIME_WIDTH, |i| {
        let freq = (-(10_000f64.ln()) * (i % half) as f64 / half as f64).exp();
        let x = t as f64 * freq;
        if i < half {
            x.sin()
        } else {
            x.cos()
        }
    })
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// What the attention block does with its post-softmax weights.
#[derive(Debug, Clone, Copy)]
pub enum AttentionControl<'a> {
    /// Use and return the model's own weights.
    Record,
    /// Replace them with a supplied row-stochastic matrix; a perturbed record goes here too.
    Inject(&'a AttentionRecord),
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pixels: Array1<f64>,
    time: Array1<f64>,
    cond_row: usize,
    h0: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    injected: bool,
    mixed: Array2<f64>,
    h1: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    h2: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub eps: Grid,
    pub attention: AttentionRecord,
    pub cache: ForwardCache,
}

pub fn forward(
    params: &DenoiserParams,
    z: &LatentState,
    cond: Condition,
    control: AttentionControl<'_>,
) -> Result<ForwardOutput> {
    let arch = params.arch;
    let n = arch.tokens();
    if z.value.shape() != (arch.height, arch.width) {
        return Err(FgsError::ShapeMismatch {
            expected: (arch.height, arch.width),
            got: z.value.shape(),
        });
    }
    let cond_row = params.condition_row(cond)?;
    let pixels = Array1::from(z.value.data().to_vec());
    let time = timestep_embedding(z.t);

    let shared = &time.view().insert_axis(Axis(0)).dot(&params.time_weight)
        + &params.time_bias
        + params.condition.row(cond_row);
    let mut h0 = pixels.view().insert_axis(Axis(1)).dot(&params.token_weight);
    h0 += &params.position;
    h0 += &params.token_bias;
    h0 += &shared;

    let q = h0.dot(&params.query);
    let k = h0.dot(&params.key);
    let v = h0.dot(&params.value);
    let (attn, injected) = match control {
        AttentionControl::Record => {
            let mut s = q.dot(&k.t()) / (MODEL_WIDTH as f64).sqrt();
            softmax_rows(&mut s);
            (s, false)
        }
        AttentionControl::Inject(rec) => {
            if rec.tokens() != n {
                return Err(FgsError::ShapeMismatch {
                    expected: (n, n),
                    got: rec.weights().dim(),
                });
            }
            (rec.weights().clone(), true)
        }
    };
    let mixed = attn.dot(&v);
    let h1 = &h0 + &mixed.dot(&params.output);
    let pre = h1.dot(&params.ff_in) + &params.ff_in_bias;
    let act = pre.mapv(silu);
    let h2 = &h1 + &(act.dot(&params.ff_out) + &params.ff_out_bias);
    let out = h2.dot(&params.head) + &params.head_bias;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(FgsError::NonFiniteOutput);
    }

    let eps = Grid::new(arch.height, arch.width, out.into_raw_vec_and_offset().0)?;
    let attention = AttentionRecord::from_softmax(attn.clone(), (arch.height, arch.width));
    let cache = ForwardCache {
        pixels,
        time,
        cond_row,
        h0,
        q,
        k,
        v,
        attn,
        injected,
        mixed,
        h1,
        pre,
        act,
        h2,
    };
    Ok(ForwardOutput {
        eps,
        attention,
        cache,
    })
}

/// Accumulates `∂L/∂params` into `grads` given `∂L/∂ε̂`.
///
/// With injected attention the weights are constants, so no gradient reaches
/// the query and key projections.
pub fn backward(
    params: &DenoiserParams,
    cache: &ForwardCache,
    d_eps: &[f64],
    grads: &mut DenoiserParams,
) {
    let n = cache.h0.nrows();
    let d_out = Array2::from_shape_vec((n, 1), d_eps.to_vec()).expect("one gradient per token");

    grads.head += &cache.h2.t().dot(&d_out);
    grads.head_bias[[0, 0]] += d_out.sum();
    let d_h2 = d_out.dot(&params.head.t());

    grads.ff_out += &cache.act.t().dot(&d_h2);
    grads.ff_out_bias += &d_h2.sum_axis(Axis(0));
    let mut d_pre = d_h2.dot(&params.ff_out.t());
    d_pre.zip_mut_with(&cache.pre, |g, &x| *g *= silu_grad(x));
    grads.ff_in += &cache.h1.t().dot(&d_pre);
    grads.ff_in_bias += &d_pre.sum_axis(Axis(0));
    let d_h1 = &d_h2 + &d_pre.dot(&params.ff_in.t());

    grads.output += &cache.mixed.t().dot(&d_h1);
    let d_mixed = d_h1.dot(&params.output.t());
    let d_v = cache.attn.t().dot(&d_mixed);
    grads.value += &cache.h0.t().dot(&d_v);
    let mut d_h0 = &d_h1 + &d_v.dot(&params.value.t());

    if !cache.injected {
        let d_attn = d_mixed.dot(&cache.v.t());
        let mut d_scores = &cache.attn * &d_attn;
        let row_dot = d_scores.sum_axis(Axis(1));
        for ((mut ds, a), r) in d_scores
            .rows_mut()
            .into_iter()
            .zip(cache.attn.rows())
            .zip(row_dot.iter())
        {
            ds.scaled_add(-r, &a);
        }
        d_scores /= (MODEL_WIDTH as f64).sqrt();
        let d_q = d_scores.dot(&cache.k);
        let d_k = d_scores.t().dot(&cache.q);
        grads.query += &cache.h0.t().dot(&d_q);
        grads.key += &cache.h0.t().dot(&d_k);
        d_h0 += &d_q.dot(&params.query.t());
        d_h0 += &d_k.dot(&params.key.t());
    }

    grads.position += &d_h0;
    grads.token_weight += &cache.pixels.view().insert_axis(Axis(0)).dot(&d_h0);
    let d_shared = d_h0.sum_axis(Axis(0));
    grads.token_bias += &d_shared;
    grads.time_bias += &d_shared;
    grads.time_weight += &cache
        .time
        .view()
        .insert_axis(Axis(1))
        .dot(&d_shared.view().insert_axis(Axis(0)));
    let mut row = grads.condition.row_mut(cache.cond_row);
    row += &d_shared;
}

/// The trained network as a [`Denoiser`]; transferred information is the attention matrix.
#[derive(Debug, Clone)]
pub struct LearnedDenoiser {
    params: DenoiserParams,
}

impl LearnedDenoiser {
    pub fn new(params: DenoiserParams) -> Result<Self> {
        if !params.is_finite() {
            return Err(invalid("parameters contain non-finite values"));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }
}

impl Denoiser for LearnedDenoiser {
    fn latent_shape(&self) -> (usize, usize) {
        (self.params.arch.height, self.params.arch.width)
    }

    fn num_conditions(&self) -> usize {
        self.params.arch.conditions
    }

    fn predict(
        &self,
        z: &LatentState,
        _sched: &NoiseSchedule,
        cond: Condition,
        control: Control<'_>,
    ) -> Result<Prediction> {
        let attention = match control {
            Control::Plain | Control::Record => AttentionControl::Record,
            Control::Inject(TransferPayload::Attention(rec)) => AttentionControl::Inject(rec),
            Control::Inject(TransferPayload::Responsibilities(_)) => {
                return Err(invalid(
                    "the learned denoiser cannot take responsibility payloads",
                ))
            }
        };
        let out = forward(&self.params, z, cond, attention)?;
        let recorded =
            matches!(control, Control::Record).then(|| TransferPayload::Attention(out.attention));
        Ok(Prediction {
            eps: out.eps,
            recorded,
        })
    }
}
