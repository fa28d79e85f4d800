//! Noise schedules and deterministic DDIM step algebra.
//!
//! Index convention: `alpha[0]` is the clean end of the chain (exactly 1 for the
//! built-in schedules) and `alpha[T]` the noisiest. With `A_t = sqrt(1/α_t - 1)`
//! one DDIM move from `t` to `s` (either direction) is
//!
//! ```text
//! z_s = sqrt(α_s / α_t) · z_t + sqrt(α_s) · (A_s − A_t) · ε̂
//! ```

use crate::denoiser::{Condition, Control, Denoiser};
use crate::error::{invalid, FgsError, Result};
use crate::tensor::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// β linear from 1e-4 to 0.02, rescaled by `1000 / T`.
    LinearBeta,
    /// Squared-cosine cumulative schedule with offset 0.008.
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = FgsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "linear-beta" => Ok(Self::LinearBeta),
            "cosine" => Ok(Self::Cosine),
            other => Err(invalid(format!("unknown schedule kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LinearBeta => "linear-beta",
            Self::Cosine => "cosine",
        })
    }
}

/// Cumulative signal coefficients `α_0 .. α_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alphas: Vec<f64>,
}

const MAX_BETA: f64 = 0.999;

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(invalid(format!(
            "schedule needs at least 2 steps, got {steps}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta => {
            let scale = 1000.0 / steps as f64;
            let (lo, hi) = (1e-4 * scale, 0.02 * scale);
            (0..steps)
                .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
                .map(|b| b.min(MAX_BETA))
                .collect()
        }
        ScheduleKind::Cosine => {
            let offset = 0.008;
            let f = |t: usize| {
                let x = (t as f64 / steps as f64 + offset) / (1.0 + offset)
                    * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t) / f(t - 1)).clamp(1e-8, MAX_BETA))
                .collect()
        }
    };
    let mut alphas = Vec::with_capacity(steps + 1);
    alphas.push(1.0);
    for beta in betas {
        let prev = *alphas.last().unwrap();
        alphas.push(prev * (1.0 - beta));
    }
    let sched = NoiseSchedule { kind, alphas };
    sched.validate()?;
    Ok(sched)
}

impl NoiseSchedule {
    /// Custom schedule from explicit `α_0 .. α_T`; the range invariants are enforced.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        let sched = Self {
            kind: ScheduleKind::LinearBeta,
            alphas,
        };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        let a = &self.alphas;
        if a.len() < 3 {
            return Err(invalid("schedule needs at least 2 steps"));
        }
        if !(a[0] > 0.999 && a[0] <= 1.0) {
            return Err(invalid(format!("alpha_0 = {} outside (0.999, 1]", a[0])));
        }
        let last = a[a.len() - 1];
        if !(last > 0.0 && last < 0.05) {
            return Err(invalid(format!("alpha_T = {last} outside (0, 0.05)")));
        }
        if a.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(invalid("alphas must be strictly decreasing"));
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `sqrt(1/α_t − 1)`.
    pub fn a_coef(&self, t: usize) -> f64 {
        a_coef(self.alphas[t])
    }

    /// Normalized denoising progress: 0 at `t = T`, 1 at `t = 1`.
    pub fn progress(&self, t: usize) -> f64 {
        let big_t = self.steps();
        (big_t - t) as f64 / (big_t - 1) as f64
    }
}

pub fn a_coef(alpha: f64) -> f64 {
    (1.0 / alpha - 1.0).max(0.0).sqrt()
}

/// A latent tagged with its timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub value: Grid,
    pub t: usize,
}

impl LatentState {
    pub fn new(value: Grid, t: usize) -> Self {
        Self { value, t }
    }
}

/// Forward marginal `z_t = sqrt(α_t) z_0 + sqrt(1 − α_t) ε`.
pub fn add_noise(z0: &Grid, eps: &Grid, sched: &NoiseSchedule, t: usize) -> Result<LatentState> {
    check_t(sched, t)?;
    let alpha = sched.alpha(t);
    let (a, b) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    let value = z0.zip_map(eps, |x, e| a * x + b * e)?;
    Ok(LatentState::new(value, t))
}

fn check_t(sched: &NoiseSchedule, t: usize) -> Result<()> {
    if t > sched.steps() {
        return Err(FgsError::InvalidState(format!(
            "timestep {t} outside 0..={}",
            sched.steps()
        )));
    }
    Ok(())
}

/// One deterministic DDIM move from `z.t` to `to`.
fn ddim_move(
    z: &LatentState,
    eps_hat: &Grid,
    sched: &NoiseSchedule,
    to: usize,
) -> Result<LatentState> {
    let (a_from, a_to) = (sched.alpha(z.t), sched.alpha(to));
    let scale = (a_to / a_from).sqrt();
    let shift = a_to.sqrt() * (a_coef(a_to) - a_coef(a_from));
    let value = z.value.zip_map(eps_hat, |x, e| scale * x + shift * e)?;
    Ok(LatentState::new(value, to))
}

/// Denoise one step, `t → t−1`.
pub fn ddim_sample_step(
    z: &LatentState,
    eps_hat: &Grid,
    sched: &NoiseSchedule,
) -> Result<LatentState> {
    check_t(sched, z.t)?;
    if z.t == 0 {
        return Err(FgsError::InvalidState("cannot denoise below t = 0".into()));
    }
    ddim_move(z, eps_hat, sched, z.t - 1)
}

/// Invert one step, `t → t+1`.
pub fn ddim_invert_step(
    z: &LatentState,
    eps_hat: &Grid,
    sched: &NoiseSchedule,
) -> Result<LatentState> {
    check_t(sched, z.t)?;
    if z.t == sched.steps() {
        return Err(FgsError::InvalidState(format!(
            "cannot invert past t = T = {}",
            z.t
        )));
    }
    ddim_move(z, eps_hat, sched, z.t + 1)
}

/// DDIM inversion `z_0 → z_T` with unguided conditional predictions.
/// Returns `T + 1` states ordered by increasing `t`.
pub fn invert_trajectory(
    z0: &Grid,
    denoiser: &dyn Denoiser,
    source: Condition,
    sched: &NoiseSchedule,
) -> Result<Vec<LatentState>> {
    invert_with(z0, sched, |z| {
        Ok(denoiser.predict(z, sched, source, Control::Plain)?.eps)
    })
}

/// Inversion driven by an arbitrary `ε̂(z_t)`.
pub fn invert_with(
    z0: &Grid,
    sched: &NoiseSchedule,
    mut eps: impl FnMut(&LatentState) -> Result<Grid>,
) -> Result<Vec<LatentState>> {
    let mut states = Vec::with_capacity(sched.steps() + 1);
    states.push(LatentState::new(z0.clone(), 0));
    for _ in 0..sched.steps() {
        let z = states.last().unwrap();
        let e = eps(z)?;
        let next = ddim_invert_step(z, &e, sched)?;
        if !next.value.is_finite() {
            return Err(FgsError::Diverged { step: next.t });
        }
        states.push(next);
    }
    Ok(states)
}

/// Full DDIM sampling `z_T → z_0` driven by an arbitrary `ε̂(z_t)`.
/// Returns `T + 1` states ordered by decreasing `t`.
pub fn sample_with(
    z_t: &LatentState,
    sched: &NoiseSchedule,
    mut eps: impl FnMut(&LatentState) -> Result<Grid>,
) -> Result<Vec<LatentState>> {
    let mut states = Vec::with_capacity(z_t.t + 1);
    states.push(z_t.clone());
    while states.last().unwrap().t > 0 {
        let z = states.last().unwrap();
        let e = eps(z)?;
        let next = ddim_sample_step(z, &e, sched)?;
        if !next.value.is_finite() {
            return Err(FgsError::Diverged { step: z.t });
        }
        states.push(next);
    }
    Ok(states)
}
