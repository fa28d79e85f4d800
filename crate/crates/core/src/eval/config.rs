//! Experiment configuration files.
//!
//! One `section.key = value` pair per line; `#` starts a comment; blank lines
//! are ignored; lists are comma separated. Unknown or repeated keys are errors.
//!
//! ```text
//! run.seed = 0
//! schedule.kind = linear          # linear | cosine
//! schedule.steps = 100
//! benchmark.scenes = 50
//! benchmark.seed = 2024
//! benchmark.component_std = 1.0
//! benchmark.classifier_samples = 600
//! pipeline.recon_mode = replay    # replay | resample
//! guidance.w_cfg = 7.5
//! guidance.w_fg = 10
//! guidance.k = 100
//! guidance.tau = 0.5
//! guidance.tag = layout           # layout | detail
//! guidance.schedule = true
//! guidance.schedule_cfg = true
//! perturb.kind = blur             # blur | noise | identity
//! perturb.sigma = 5
//! perturb.scale = 0.1
//! sweep.k = 10, 50, 100, 500, 1000
//! sweep.sigma = 1, 2, 5, 10, 100
//! sweep.w_fg = 0, 5, 10, 20, 50
//! sweep.tau = 0.4, 0.5, 0.6
//! sweep.perturb = noise, identity, blur
//! misalign.runs = 100
//! model.denoiser = analytic       # analytic | learned
//! model.checkpoint = model.fgs1
//! train.steps = 2000
//! train.batch = 16
//! train.learning_rate = 0.005
//! train.momentum = 0.9
//! train.cond_dropout = 0.1
//! train.samples = 600
//! mixture.0.mean = -2             # explicit mixture for vector edits
//! mixture.0.var = 0.09
//! mixture.0.class = 0
//! mixture.0.weight = 0.5
//! edit.scene = 0
//! edit.input = 1.8
//! edit.source = 1
//! edit.target = 0
//! ```
//!
//! Sweep axes run in the order their keys appear; without any `sweep.*` key
//! the k, σ and w_fg grids are used.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::str::FromStr;

use crate::analytic::{AnalyticDenoiser, Component, MixtureModel};
use crate::diffusion::ScheduleKind;
use crate::error::{FgsError, Result};
use crate::eval::benchmark::BenchmarkConfig;
use crate::eval::sweep::{Axis, SweepPlan};
use crate::guidance::GuidanceConfig;
use crate::nnmodel::TrainConfig;
use crate::pipeline::ReconMode;
use crate::transfer::{InjectionPolicy, PerturbKind};

pub const DEFAULT_NOISE_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserChoice {
    Analytic,
    Learned,
}

impl FromStr for DenoiserChoice {
    type Err = FgsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "learned" => Ok(Self::Learned),
            other => Err(crate::error::invalid(format!("unknown denoiser '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComponentSpec {
    pub weight: Option<f64>,
    pub mean: Vec<f64>,
    pub var: f64,
    pub class: usize,
}

/// What the `edit` command edits: a benchmark scene, or a vector under the explicit mixture.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EditSpec {
    pub scene: usize,
    pub input: Option<Vec<f64>>,
    pub source: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub benchmark: BenchmarkConfig,
    pub guidance: GuidanceConfig,
    pub noise_scale: f64,
    pub sweep: SweepPlan,
    pub misalign_runs: usize,
    pub denoiser: DenoiserChoice,
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    pub train_samples: usize,
    pub mixture: Vec<ComponentSpec>,
    pub edit: EditSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let guidance = GuidanceConfig::default();
        Self {
            seed: 0,
            benchmark: BenchmarkConfig::default(),
            sweep: SweepPlan::hyperparameters(guidance.clone()),
            guidance,
            noise_scale: DEFAULT_NOISE_SCALE,
            misalign_runs: 100,
            denoiser: DenoiserChoice::Analytic,
            checkpoint: None,
            train: TrainConfig::default(),
            train_samples: 600,
            mixture: Vec::new(),
            edit: EditSpec {
                scene: 0,
                input: None,
                source: 0,
                target: 1,
            },
        }
    }
}

fn err(line: usize, message: impl Into<String>) -> FgsError {
    FgsError::Config {
        line,
        message: message.into(),
    }
}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| err(line, format!("'{raw}' is not a valid value for {key}")))
}

fn list<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',').map(|v| value(line, key, v.trim())).collect()
}

enum PendingAxis {
    Ready(Axis),
    Perturb(Vec<String>),
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        let mut perturb_kind = "blur".to_string();
        let mut sigma = 5.0;
        let mut perturb_line = 0;
        let mut tau = cfg.guidance.injection.tau();
        let mut tau_line = 0;
        let mut axes: Vec<(usize, PendingAxis)> = Vec::new();
        let mut mixture: BTreeMap<usize, (usize, ComponentSpec, [bool; 2])> = BTreeMap::new();

        for (i, raw_line) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| err(n, "expected 'section.key = value'"))?;
            let (key, raw) = (key.trim(), raw.trim());
            if !key.contains('.') || key.starts_with('.') || key.ends_with('.') {
                return Err(err(
                    n,
                    format!("key '{key}' is not of the form section.key"),
                ));
            }
            if raw.is_empty() {
                return Err(err(n, format!("no value for {key}")));
            }
            if !seen.insert(key.to_string()) {
                return Err(err(n, format!("duplicate key {key}")));
            }
            let g = &mut cfg.guidance;
            let b = &mut cfg.benchmark;
            match key {
                "run.seed" => cfg.seed = value(n, key, raw)?,
                "schedule.kind" => b.schedule = value::<ScheduleKind>(n, key, raw)?,
                "schedule.steps" => b.steps = value(n, key, raw)?,
                "benchmark.scenes" => b.scenes = value(n, key, raw)?,
                "benchmark.seed" => b.seed = value(n, key, raw)?,
                "benchmark.component_std" => b.component_std = value(n, key, raw)?,
                "benchmark.classifier_samples" => b.classifier_samples = value(n, key, raw)?,
                "pipeline.recon_mode" => b.recon_mode = value::<ReconMode>(n, key, raw)?,
                "guidance.w_cfg" => g.w_cfg = value(n, key, raw)?,
                "guidance.w_fg" => g.w_fg = value(n, key, raw)?,
                "guidance.k" => g.k = value(n, key, raw)?,
                "guidance.tau" => {
                    tau = value(n, key, raw)?;
                    tau_line = n;
                }
                "guidance.tag" => g.tag = value(n, key, raw)?,
                "guidance.schedule" => g.schedule = value(n, key, raw)?,
                "guidance.schedule_cfg" => g.schedule_cfg = value(n, key, raw)?,
                "perturb.kind" => {
                    perturb_kind = raw.to_string();
                    perturb_line = n;
                }
                "perturb.sigma" => sigma = value(n, key, raw)?,
                "perturb.scale" => cfg.noise_scale = value(n, key, raw)?,
                "sweep.k" => axes.push((n, PendingAxis::Ready(Axis::K(list(n, key, raw)?)))),
                "sweep.sigma" => {
                    axes.push((n, PendingAxis::Ready(Axis::Sigma(list(n, key, raw)?))))
                }
                "sweep.w_fg" => axes.push((n, PendingAxis::Ready(Axis::WFg(list(n, key, raw)?)))),
                "sweep.tau" => axes.push((n, PendingAxis::Ready(Axis::Tau(list(n, key, raw)?)))),
                "sweep.perturb" => axes.push((n, PendingAxis::Perturb(list(n, key, raw)?))),
                "misalign.runs" => cfg.misalign_runs = value(n, key, raw)?,
                "model.denoiser" => cfg.denoiser = value(n, key, raw)?,
                "model.checkpoint" => cfg.checkpoint = Some(PathBuf::from(raw)),
                "train.steps" => cfg.train.steps = value(n, key, raw)?,
                "train.batch" => cfg.train.batch = value(n, key, raw)?,
                "train.learning_rate" => cfg.train.learning_rate = value(n, key, raw)?,
                "train.momentum" => cfg.train.momentum = value(n, key, raw)?,
                "train.cond_dropout" => cfg.train.cond_dropout = value(n, key, raw)?,
                "train.samples" => cfg.train_samples = value(n, key, raw)?,
                "edit.scene" => cfg.edit.scene = value(n, key, raw)?,
                "edit.input" => cfg.edit.input = Some(list(n, key, raw)?),
                "edit.source" => cfg.edit.source = value(n, key, raw)?,
                "edit.target" => cfg.edit.target = value(n, key, raw)?,
                _ if key.starts_with("mixture.") => {
                    let mut parts = key.splitn(3, '.').skip(1);
                    let index: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err(n, format!("key '{key}' needs a component index")))?;
                    let entry =
                        mixture
                            .entry(index)
                            .or_insert((n, ComponentSpec::default(), [false; 2]));
                    match parts.next() {
                        Some("mean") => {
                            entry.1.mean = list(n, key, raw)?;
                            entry.2[0] = true;
                        }
                        Some("var") => entry.1.var = value(n, key, raw)?,
                        Some("weight") => entry.1.weight = Some(value(n, key, raw)?),
                        Some("class") => {
                            entry.1.class = value(n, key, raw)?;
                            entry.2[1] = true;
                        }
                        _ => return Err(err(n, format!("unknown key {key}"))),
                    }
                }
                _ => return Err(err(n, format!("unknown key {key}"))),
            }
        }

        let kind = |name: &str, line: usize| -> Result<PerturbKind> {
            match name {
                "blur" => PerturbKind::blur(sigma),
                "noise" => PerturbKind::noise(cfg.noise_scale),
                "identity" => Ok(PerturbKind::Identity),
                other => Err(err(line, format!("unknown perturbation '{other}'"))),
            }
            .map_err(|e| match e {
                FgsError::Config { .. } => e,
                other => err(line, other.to_string()),
            })
        };
        cfg.guidance.perturb = kind(&perturb_kind, perturb_line)?;
        cfg.guidance.injection =
            InjectionPolicy::new(tau).map_err(|e| err(tau_line, e.to_string()))?;
        cfg.guidance.validate().map_err(|e| err(0, e.to_string()))?;

        let axes = axes
            .into_iter()
            .map(|(line, a)| match a {
                PendingAxis::Ready(axis) => Ok(axis),
                PendingAxis::Perturb(names) => Ok(Axis::Perturb(
                    names.iter().map(|s| kind(s, line)).collect::<Result<_>>()?,
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        cfg.sweep = if axes.is_empty() {
            SweepPlan::hyperparameters(cfg.guidance.clone())
        } else {
            SweepPlan {
                base: cfg.guidance.clone(),
                axes,
            }
        };

        for (index, (line, spec, [has_mean, has_class])) in mixture {
            if !has_mean || !has_class {
                return Err(err(
                    line,
                    format!("mixture component {index} needs a mean and a class"),
                ));
            }
            if index != cfg.mixture.len() {
                return Err(err(
                    line,
                    format!(
                        "mixture components must be numbered from 0 without gaps, found {index}"
                    ),
                ));
            }
            cfg.mixture.push(spec);
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The explicit mixture as a denoiser over `1 × d` latents, one condition per class id.
    pub fn mixture_denoiser(&self) -> Result<AnalyticDenoiser> {
        if self.mixture.is_empty() {
            return Err(crate::error::invalid(
                "config defines no mixture components",
            ));
        }
        let explicit = self.mixture.iter().filter(|c| c.weight.is_some()).count();
        if explicit != 0 && explicit != self.mixture.len() {
            return Err(crate::error::invalid(
                "give every mixture component a weight, or none",
            ));
        }
        let uniform = 1.0 / self.mixture.len() as f64;
        let components = self
            .mixture
            .iter()
            .map(|c| Component {
                weight: c.weight.unwrap_or(uniform),
                mean: c.mean.clone(),
                var: c.var,
            })
            .collect();
        let mixture = MixtureModel::new(components)?;
        let classes_n = self
            .mixture
            .iter()
            .map(|c| c.class)
            .max()
            .map_or(0, |m| m + 1);
        let classes: Vec<Vec<usize>> = (0..classes_n)
            .map(|k| {
                (0..self.mixture.len())
                    .filter(|&j| self.mixture[j].class == k)
                    .collect()
            })
            .collect();
        let dim = mixture.dim();
        AnalyticDenoiser::new(mixture, classes, (1, dim))
    }
}
