use log::info;

use super::{backward, forward, Architecture, AttentionControl, DenoiserParams};
use crate::denoiser::Condition;
use crate::diffusion::{add_noise, LatentState, NoiseSchedule};
use crate::error::{invalid, FgsError, Result};
use crate::tensor::{sample_standard_normal, Grid, SeededRng};

/// One training example after the forward process: `z_t`, the noise that made it, and the condition.
#[derive(Debug, Clone)]
pub struct NoisedItem {
    pub z_t: LatentState,
    pub eps: Grid,
    pub cond: Condition,
}

/// Draws `t ~ U{1..T}` and `ε ~ N(0, I)` per item and noises it.
pub fn draw_noised(
    batch: &[(Grid, Condition)],
    rng: &mut SeededRng,
    sched: &NoiseSchedule,
) -> Result<Vec<NoisedItem>> {
    if batch.is_empty() {
        return Err(invalid("batch must be non-empty"));
    }
    batch
        .iter()
        .map(|(z0, cond)| {
            let t = 1 + rng.below(sched.steps());
            let (h, w) = z0.shape();
            let eps = Grid::new(h, w, sample_standard_normal(rng, z0.len())?)?;
            let z_t = add_noise(z0, &eps, sched, t)?;
            Ok(NoisedItem {
                z_t,
                eps,
                cond: *cond,
            })
        })
        .collect()
}

fn item_loss_and_grads(
    params: &DenoiserParams,
    item: &NoisedItem,
    scale: f64,
) -> Result<(f64, DenoiserParams)> {
    let out = forward(params, &item.z_t, item.cond, AttentionControl::Record)?;
    let resid: Vec<f64> = out
        .eps
        .data()
        .iter()
        .zip(item.eps.data())
        .map(|(p, e)| p - e)
        .collect();
    let loss = resid.iter().map(|r| r * r).sum::<f64>() * scale;
    let d_eps: Vec<f64> = resid.iter().map(|r| 2.0 * r * scale).collect();
    let mut grads = DenoiserParams::zeros(params.arch);
    backward(params, &out.cache, &d_eps, &mut grads);
    Ok((loss, grads))
}

/// Mean squared error over items and pixels, with exact gradients, on an already-noised batch.
pub fn loss_on(params: &DenoiserParams, items: &[NoisedItem]) -> Result<(f64, DenoiserParams)> {
    if items.is_empty() {
        return Err(invalid("batch must be non-empty"));
    }
    let scale = 1.0 / (items.len() * params.arch.tokens()) as f64;

    #[cfg(feature = "parallel")]
    let parts: Vec<Result<(f64, DenoiserParams)>> = {
        use rayon::prelude::*;
        items
            .par_iter()
            .map(|it| item_loss_and_grads(params, it, scale))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<(f64, DenoiserParams)>> = items
        .iter()
        .map(|it| item_loss_and_grads(params, it, scale))
        .collect();

    // summed in item order so the result does not depend on scheduling
    let mut loss = 0.0;
    let mut grads = DenoiserParams::zeros(params.arch);
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.add_scaled(&g, 1.0);
    }
    Ok((loss, grads))
}

pub fn loss_and_grads(
    params: &DenoiserParams,
    batch: &[(Grid, Condition)],
    rng: &mut SeededRng,
    sched: &NoiseSchedule,
) -> Result<(f64, DenoiserParams)> {
    let items = draw_noised(batch, rng, sched)?;
    loss_on(params, &items)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Probability of replacing an example's condition with the null condition.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            learning_rate: 0.005,
            momentum: 0.9,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    /// Batch loss before each update, one entry per step, plus the loss after the last update.
    pub losses: Vec<f64>,
}

/// SGD with momentum on the noise-prediction loss.
pub fn train(
    dataset: &[(Grid, Condition)],
    arch: Architecture,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(invalid("dataset must be non-empty"));
    }
    if cfg.batch == 0
        || !(cfg.learning_rate >= 0.0)
        || !(0.0..1.0).contains(&cfg.momentum)
        || !(0.0..=1.0).contains(&cfg.cond_dropout)
    {
        return Err(invalid("invalid training configuration"));
    }
    let mut params = DenoiserParams::init(arch, cfg.seed)?;
    let mut velocity = DenoiserParams::zeros(arch);
    let mut rng = SeededRng::with_stream(cfg.seed, 1);
    let mut losses = Vec::with_capacity(cfg.steps + 1);

    for step in 0..=cfg.steps {
        let batch: Vec<(Grid, Condition)> = (0..cfg.batch)
            .map(|_| {
                let (img, cond) = &dataset[rng.below(dataset.len())];
                let cond = if rng.uniform() < cfg.cond_dropout {
                    Condition::Null
                } else {
                    *cond
                };
                (img.clone(), cond)
            })
            .collect();
        let (loss, grads) = match loss_and_grads(&params, &batch, &mut rng, sched) {
            Ok(v) => v,
            Err(FgsError::NonFiniteOutput) => {
                return Err(FgsError::TrainingDiverged {
                    step,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(FgsError::TrainingDiverged { step, loss });
        }
        losses.push(loss);
        if step % 100 == 0 {
            info!("step {step}: loss {loss:.6}");
        }
        if step == cfg.steps {
            break;
        }
        for (v, g) in velocity.tensors_mut().into_iter().zip(grads.tensors()) {
            v.zip_mut_with(g, |v, &g| *v = cfg.momentum * *v + g);
        }
        params.add_scaled(&velocity, -cfg.learning_rate);
    }
    Ok(TrainOutcome { params, losses })
}
