//! The dual-path editor.
//!
//! The input is inverted under the source condition. A reconstruction path and
//! an editing path both start from the inverted latent. At every step the
//! reconstruction path records its transferable internals `I`; inside the
//! injection window the editing path evaluates
//!
//! ```text
//! ε̃ = ε(z, c, I) + w_cfg·(ε(z, c, I) − ε(z, φ, I)) + w_fg·(ε(z, c, I) − ε(z, c, I'))
//! ```
//!
//! with `I' = PERTURB(I)`, and outside it plain classifier-free guidance.

use crate::denoiser::{Condition, Control, Denoiser};
use crate::diffusion::{ddim_sample_step, invert_trajectory, LatentState, NoiseSchedule};
use crate::error::{invalid, FgsError, Result};
use crate::guidance::{cfg_combine, combined, GuidanceConfig, ScheduledScales};
use crate::tensor::{Grid, SeededRng};
use crate::transfer::{perturb, should_inject, TransferPacket, TransferPayload, TransferTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReconMode {
    /// Run guided DDIM sampling under the source condition from `z_T`.
    Resample,
    /// Walk the stored inversion trajectory backwards; the reconstruction is the input itself.
    #[default]
    Replay,
}

impl std::str::FromStr for ReconMode {
    type Err = FgsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resample" => Ok(Self::Resample),
            "replay" => Ok(Self::Replay),
            other => Err(invalid(format!("unknown reconstruction mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy)]
pub struct EditRequest<'a> {
    pub input: &'a Grid,
    pub source: Condition,
    pub target: Condition,
    pub guidance: &'a GuidanceConfig,
    pub recon_mode: ReconMode,
    pub denoiser: &'a dyn Denoiser,
    pub sched: &'a NoiseSchedule,
    /// Seeds the per-step perturbation streams.
    pub seed: u64,
}

impl EditRequest<'_> {
    fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        let shape = self.denoiser.latent_shape();
        if self.input.shape() != shape {
            return Err(FgsError::ShapeMismatch {
                expected: shape,
                got: self.input.shape(),
            });
        }
        for cond in [self.source, self.target] {
            if let Condition::Class(id) = cond {
                if id >= self.denoiser.num_conditions() {
                    return Err(invalid(format!("condition id {id} out of range")));
                }
            }
        }
        Ok(())
    }
}

/// Everything the editing path computed at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub injected: bool,
    pub w_cfg: f64,
    pub w_fg: f64,
    /// `ε(z, c)` or, when injecting, `ε(z, c, I)`.
    pub eps_cond: Grid,
    /// `ε(z, c, ·) − ε(z, φ, ·)`.
    pub d_cfg: Grid,
    /// `ε(z, c, I) − ε(z, c, I')`; present only when a perturbed payload was evaluated.
    pub d_fg: Option<Grid>,
    /// The combined prediction fed to the DDIM step.
    pub applied: Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub recon: Grid,
    pub edited: Grid,
    /// `T + 1` states, increasing `t`.
    pub inversion: Vec<LatentState>,
    /// `T + 1` states each, decreasing `t`.
    pub recon_path: Vec<LatentState>,
    pub edit_path: Vec<LatentState>,
    /// One record per step, `t = T … 1`.
    pub steps: Vec<StepRecord>,
    pub scales: ScheduledScales,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub recon: Grid,
    pub inversion: Vec<LatentState>,
    /// Decreasing `t`.
    pub trajectory: Vec<LatentState>,
    pub packet: TransferPacket,
}

fn checked(next: LatentState, t: usize) -> Result<LatentState> {
    if next.value.is_finite() {
        Ok(next)
    } else {
        Err(FgsError::Diverged { step: t })
    }
}

/// One step of the reconstruction path: returns the next latent and the payload recorded at `z`.
fn recon_step(
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    source: Condition,
    z: &LatentState,
    mode: ReconMode,
    w_cfg: f64,
    inversion: &[LatentState],
) -> Result<(LatentState, TransferPayload)> {
    let rec = denoiser.predict(z, sched, source, Control::Record)?;
    let payload = rec
        .recorded
        .ok_or_else(|| FgsError::InvalidState("denoiser did not record its internals".into()))?;
    let next = match mode {
        ReconMode::Replay => inversion[z.t - 1].clone(),
        ReconMode::Resample => {
            let uncond = denoiser.predict(z, sched, Condition::Null, Control::Plain)?;
            let eps = cfg_combine(&rec.eps, &uncond.eps, w_cfg)?;
            checked(ddim_sample_step(z, &eps, sched)?, z.t)?
        }
    };
    Ok((next, payload))
}

/// Inversion plus the reconstruction path alone, with one recorded payload per step.
pub fn reconstruct_only(
    input: &Grid,
    source: Condition,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    mode: ReconMode,
    w_cfg: f64,
) -> Result<Reconstruction> {
    let inversion = invert_trajectory(input, denoiser, source, sched)?;
    let mut packet = TransferPacket::new(TransferTag::Layout);
    let mut trajectory = vec![inversion[sched.steps()].clone()];
    while trajectory.last().unwrap().t > 0 {
        let z = trajectory.last().unwrap();
        let (next, payload) = recon_step(denoiser, sched, source, z, mode, w_cfg, &inversion)?;
        packet.capture(z.t, payload)?;
        trajectory.push(next);
    }
    let recon = trajectory.last().unwrap().value.clone();
    Ok(Reconstruction {
        recon,
        inversion,
        trajectory,
        packet,
    })
}

fn edit_step(
    req: &EditRequest<'_>,
    z: &LatentState,
    payload: &TransferPayload,
    scales: &ScheduledScales,
    use_fg: bool,
) -> Result<StepRecord> {
    let (den, sched) = (req.denoiser, req.sched);
    let t = z.t;
    let (w_cfg, w_fg) = scales.at(t);
    let injected = should_inject(t, sched.steps(), req.guidance.injection);
    if !injected {
        let eps_cond = den.predict(z, sched, req.target, Control::Plain)?.eps;
        let eps_null = den.predict(z, sched, Condition::Null, Control::Plain)?.eps;
        let applied = cfg_combine(&eps_cond, &eps_null, w_cfg)?;
        let d_cfg = eps_cond.sub(&eps_null)?;
        return Ok(StepRecord {
            t,
            injected,
            w_cfg,
            w_fg: 0.0,
            eps_cond,
            d_cfg,
            d_fg: None,
            applied,
        });
    }

    let eps_cond = den
        .predict(z, sched, req.target, Control::Inject(payload))?
        .eps;
    let eps_null = den
        .predict(z, sched, Condition::Null, Control::Inject(payload))?
        .eps;
    let d_cfg = eps_cond.sub(&eps_null)?;
    if !use_fg {
        let applied = cfg_combine(&eps_cond, &eps_null, w_cfg)?;
        return Ok(StepRecord {
            t,
            injected,
            w_cfg,
            w_fg: 0.0,
            eps_cond,
            d_cfg,
            d_fg: None,
            applied,
        });
    }
    let mut rng = SeededRng::with_stream(req.seed, t as u64);
    let perturbed = perturb(payload, req.guidance.perturb, &mut rng)?;
    let eps_pert = den
        .predict(z, sched, req.target, Control::Inject(&perturbed))?
        .eps;
    let applied = combined(&eps_cond, &eps_null, &eps_pert, w_cfg, w_fg)?;
    let d_fg = eps_cond.sub(&eps_pert)?;
    Ok(StepRecord {
        t,
        injected,
        w_cfg,
        w_fg,
        eps_cond,
        d_cfg,
        d_fg: Some(d_fg),
        applied,
    })
}

fn run(req: &EditRequest<'_>, use_fg: bool) -> Result<EditResult> {
    req.validate()?;
    let sched = req.sched;
    let steps = sched.steps();
    let mut guidance = req.guidance.clone();
    if !use_fg {
        guidance.w_fg = 0.0;
    }
    let scales = guidance.scales(steps)?;

    let inversion = invert_trajectory(req.input, req.denoiser, req.source, sched)?;
    let start = inversion[steps].clone();
    let mut recon_path = vec![start.clone()];
    let mut edit_path = vec![start];
    let mut records = Vec::with_capacity(steps);

    for t in (1..=steps).rev() {
        let z_rec = recon_path.last().unwrap();
        let (next_rec, payload) = recon_step(
            req.denoiser,
            sched,
            req.source,
            z_rec,
            req.recon_mode,
            req.guidance.w_cfg,
            &inversion,
        )?;
        let z_edit = edit_path.last().unwrap();
        let record = edit_step(req, z_edit, &payload, &scales, use_fg)?;
        let next_edit = checked(ddim_sample_step(z_edit, &record.applied, sched)?, t)?;
        recon_path.push(next_rec);
        edit_path.push(next_edit);
        records.push(record);
    }

    Ok(EditResult {
        recon: recon_path.last().unwrap().value.clone(),
        edited: edit_path.last().unwrap().value.clone(),
        inversion,
        recon_path,
        edit_path,
        steps: records,
        scales,
    })
}

/// Full method: injection, faithfulness guidance and (optionally) scheduled scales.
pub fn run_fgs(req: &EditRequest<'_>) -> Result<EditResult> {
    run(req, req.guidance.w_fg > 0.0)
}

/// Injection-based editing without the faithfulness term.
pub fn run_baseline(req: &EditRequest<'_>) -> Result<EditResult> {
    run(req, false)
}
