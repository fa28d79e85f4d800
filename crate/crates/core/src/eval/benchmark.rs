//! The analytic editing benchmark: a Gaussian mixture with one component per
//! (class, layout) template, edits that change the shape and keep the slot,
//! and a pixel classifier for editability.

use crate::analytic::{AnalyticDenoiser, MixtureModel};
use crate::denoiser::{Condition, Denoiser};
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{invalid, FgsError, Result};
use crate::eval::metrics::{
    editability_score, faithfulness_distance, misalignment_curve, structure_selfsim_distance,
};
use crate::eval::scene::{
    from_latent, gen_dataset, render, to_latent, Scene, SceneClass, NUM_CLASSES, NUM_LAYOUTS, SIDE,
};
use crate::guidance::GuidanceConfig;
use crate::nnmodel::{classifier_train, Classifier, ClassifierConfig};
use crate::pipeline::{run_baseline, run_fgs, EditRequest, EditResult, ReconMode};
use crate::transfer::PerturbKind;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub scenes: usize,
    pub seed: u64,
    pub steps: usize,
    pub schedule: ScheduleKind,
    /// Standard deviation of every mixture component, in latent units.
    pub component_std: f64,
    pub recon_mode: ReconMode,
    pub classifier_samples: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            scenes: 50,
            seed: 2024,
            steps: 100,
            schedule: ScheduleKind::LinearBeta,
            component_std: 1.0,
            recon_mode: ReconMode::Replay,
            classifier_samples: 600,
        }
    }
}

/// Component `class · NUM_LAYOUTS + layout`, so neighbouring indices are neighbouring layouts of one class.
pub fn template_mixture(component_std: f64) -> Result<(MixtureModel, Vec<Vec<usize>>)> {
    if !(component_std >= 0.0) {
        return Err(invalid("component standard deviation must be non-negative"));
    }
    let mut parts = Vec::with_capacity(NUM_CLASSES * NUM_LAYOUTS);
    let mut classes = Vec::with_capacity(NUM_CLASSES);
    for id in 0..NUM_CLASSES {
        let class = SceneClass::from_id(id)?;
        classes.push((id * NUM_LAYOUTS..(id + 1) * NUM_LAYOUTS).collect());
        for layout in 0..NUM_LAYOUTS {
            let (img, _) = render(class, layout)?;
            parts.push((to_latent(&img).into_data(), component_std * component_std));
        }
    }
    Ok((MixtureModel::uniform(parts)?, classes))
}

/// Trains on whole images and on their mask crops, so both editability readings are in-distribution.
pub fn train_classifier(seed: u64, samples: usize) -> Result<Classifier> {
    let data: Vec<(crate::tensor::Grid, usize)> = gen_dataset(seed, samples)?
        .into_iter()
        .flat_map(|s| {
            let crop = s.mask.crop(&s.image);
            [(s.image, s.class.id()), (crop, s.class.id())]
        })
        .collect();
    classifier_train(&data, NUM_CLASSES, &ClassifierConfig::default())
}

/// How the editing path is guided.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub guidance: GuidanceConfig,
    pub use_fg: bool,
}

impl Variant {
    /// Injection only, constant CFG.
    pub fn baseline(tau: f64) -> Result<Self> {
        let guidance = GuidanceConfig {
            w_fg: 0.0,
            schedule: false,
            injection: crate::transfer::InjectionPolicy::new(tau)?,
            ..GuidanceConfig::default()
        };
        Ok(Self {
            label: format!("baseline(tau={tau})"),
            guidance,
            use_fg: false,
        })
    }

    /// Faithfulness guidance at constant scales.
    pub fn fg(guidance: GuidanceConfig) -> Self {
        Self {
            label: "fg".into(),
            guidance: GuidanceConfig {
                schedule: false,
                ..guidance
            },
            use_fg: true,
        }
    }

    /// Faithfulness guidance with scheduled scales.
    pub fn fgs(guidance: GuidanceConfig) -> Self {
        Self {
            label: "fgs".into(),
            guidance: GuidanceConfig {
                schedule: true,
                ..guidance
            },
            use_fg: true,
        }
    }
}

/// Baselines at τ ∈ {0.4, 0.5, 0.6}, FG, FGS, and FGS with the noise and identity perturbations.
pub fn table_variants(base: &GuidanceConfig, noise_scale: f64) -> Result<Vec<Variant>> {
    let mut out = Vec::with_capacity(7);
    for tau in [0.4, 0.5, 0.6] {
        out.push(Variant::baseline(tau)?);
    }
    out.push(Variant::fg(base.clone()));
    out.push(Variant::fgs(base.clone()));
    for (label, perturb) in [
        ("fgs+noise", PerturbKind::noise(noise_scale)?),
        ("fgs+identity", PerturbKind::Identity),
    ] {
        out.push(Variant {
            label: label.into(),
            ..Variant::fgs(GuidanceConfig {
                perturb,
                ..base.clone()
            })
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditMetrics {
    pub faithfulness_whole: f64,
    pub faithfulness_unedited: f64,
    pub structure_selfsim: f64,
    pub editability_whole: f64,
    pub editability_edited: f64,
    /// Mean of the per-step CFG/FG cosines; 0 when no step evaluated FG.
    pub cosine_mean: f64,
    pub fg_steps: usize,
}

pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub scenes: Vec<Scene>,
    pub denoiser: Box<dyn Denoiser>,
    pub sched: NoiseSchedule,
    pub classifier: Classifier,
}

impl Benchmark {
    /// The analytic setup: template mixture denoiser.
    pub fn build(config: BenchmarkConfig) -> Result<Self> {
        let (mixture, classes) = template_mixture(config.component_std)?;
        let denoiser = AnalyticDenoiser::new(mixture, classes, (SIDE, SIDE))?;
        Self::with_denoiser(config, Box::new(denoiser))
    }

    /// Any denoiser over 16×16 latents with at least one condition per scene class.
    pub fn with_denoiser(config: BenchmarkConfig, denoiser: Box<dyn Denoiser>) -> Result<Self> {
        if denoiser.latent_shape() != (SIDE, SIDE) {
            return Err(FgsError::ShapeMismatch {
                expected: (SIDE, SIDE),
                got: denoiser.latent_shape(),
            });
        }
        if denoiser.num_conditions() < NUM_CLASSES {
            return Err(invalid(format!(
                "denoiser knows {} conditions, scenes need {NUM_CLASSES}",
                denoiser.num_conditions()
            )));
        }
        let sched = make_schedule(config.schedule, config.steps)?;
        let scenes = gen_dataset(config.seed, config.scenes)?;
        let classifier = train_classifier(config.seed ^ 0x5eed, config.classifier_samples)?;
        Ok(Self {
            config,
            scenes,
            denoiser,
            sched,
            classifier,
        })
    }

    pub fn edit(
        &self,
        scene: usize,
        variant: &Variant,
        seed: u64,
    ) -> Result<(EditResult, EditMetrics)> {
        let s = self
            .scenes
            .get(scene)
            .ok_or_else(|| invalid(format!("scene {scene} out of range")))?;
        let target = s.class.edit_target().id();
        let input = to_latent(&s.image);
        let req = EditRequest {
            input: &input,
            source: Condition::Class(s.class.id()),
            target: Condition::Class(target),
            guidance: &variant.guidance,
            recon_mode: self.config.recon_mode,
            denoiser: self.denoiser.as_ref(),
            sched: &self.sched,
            seed,
        };
        let result = if variant.use_fg {
            run_fgs(&req)?
        } else {
            run_baseline(&req)?
        };
        let metrics = self.score(s, target, &result)?;
        Ok((result, metrics))
    }

    fn score(&self, scene: &Scene, target: usize, result: &EditResult) -> Result<EditMetrics> {
        let edited = from_latent(&result.edited);
        let faith = faithfulness_distance(&scene.image, &edited, &scene.mask)?;
        let edit = editability_score(&edited, target, &self.classifier, &scene.mask)?;
        let curve = misalignment_curve(result)?;
        let cosine_mean = if curve.is_empty() {
            0.0
        } else {
            curve.iter().map(|c| c.1).sum::<f64>() / curve.len() as f64
        };
        Ok(EditMetrics {
            faithfulness_whole: faith.whole,
            faithfulness_unedited: faith.unedited,
            structure_selfsim: structure_selfsim_distance(&scene.image, &edited)?,
            editability_whole: edit.whole,
            editability_edited: edit.edited_region,
            cosine_mean,
            fg_steps: curve.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_layout() {
        let (m, classes) = template_mixture(0.04).unwrap();
        assert_eq!(m.len(), 90);
        assert_eq!(m.dim(), 256);
        assert_eq!(classes[2], (30..45).collect::<Vec<_>>());
    }

    #[test]
    fn classifier_separates_clean_scenes() {
        let c = train_classifier(11, 600).unwrap();
        let held_out = gen_dataset(99, 120).unwrap();
        let correct = held_out
            .iter()
            .filter(|s| c.predict(&s.image).unwrap() == s.class.id())
            .count();
        assert!(correct as f64 >= 0.95 * 120.0, "{correct}/120");
    }
}
