//! Browser bindings for the toy-scene editor.
//!
//! The Rust-side API (`Editor`, `EditView`, `schedule_curves`) is usable natively;
//! the `js_*` wrappers only translate errors for JavaScript.

use wasm_bindgen::prelude::*;

use fgs::eval::benchmark::{Benchmark, BenchmarkConfig, EditMetrics, Variant};
use fgs::eval::scene::{from_latent, SIDE};
use fgs::eval::sweep::misalignment_study;
use fgs::guidance::GuidanceConfig;
use fgs::tensor::Grid;
use fgs::transfer::{InjectionPolicy, PerturbKind, TransferTag};
use fgs::{FgsError, Result};

fn gray(image: &Grid) -> Vec<u8> {
    image
        .data()
        .iter()
        .map(|v| (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8)
        .collect()
}

fn perturbation(name: &str, amount: f64) -> Result<PerturbKind> {
    match name {
        "blur" => PerturbKind::blur(amount),
        "noise" => PerturbKind::noise(amount),
        "identity" => Ok(PerturbKind::Identity),
        other => Err(FgsError::InvalidArgument(format!(
            "unknown perturbation '{other}'"
        ))),
    }
}

fn js(e: FgsError) -> JsError {
    JsError::new(&e.to_string())
}

/// Knobs shared by every operation on the page.
#[wasm_bindgen]
#[derive(Debug, Clone, Copy)]
pub struct Knobs {
    pub tau: f64,
    pub w_fg: f64,
    pub k: f64,
    pub schedule: bool,
    /// Blur sigma or noise scale, depending on the perturbation.
    pub amount: f64,
}

#[wasm_bindgen]
impl Knobs {
    #[wasm_bindgen(constructor)]
    pub fn new(tau: f64, w_fg: f64, k: f64, schedule: bool, amount: f64) -> Knobs {
        Knobs {
            tau,
            w_fg,
            k,
            schedule,
            amount,
        }
    }
}

impl Default for Knobs {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        Knobs {
            tau: g.injection.tau(),
            w_fg: g.w_fg,
            k: g.k,
            schedule: g.schedule,
            amount: 5.0,
        }
    }
}

impl Knobs {
    fn variant(&self, perturb: &str) -> Result<Variant> {
        let guidance = GuidanceConfig {
            w_fg: self.w_fg,
            k: self.k,
            schedule: self.schedule,
            perturb: perturbation(perturb, self.amount)?,
            injection: InjectionPolicy::new(self.tau)?,
            ..GuidanceConfig::default()
        };
        guidance.validate()?;
        Ok(Variant {
            label: "web".into(),
            guidance,
            use_fg: true,
        })
    }
}

#[wasm_bindgen]
pub struct EditView {
    input: Vec<u8>,
    baseline: Vec<u8>,
    edited: Vec<u8>,
    mask: Vec<u8>,
    baseline_metrics: EditMetrics,
    metrics: EditMetrics,
}

#[wasm_bindgen]
impl EditView {
    /// Grayscale bytes, row-major, `side() * side()` long.
    pub fn input(&self) -> Vec<u8> {
        self.input.clone()
    }
    pub fn baseline(&self) -> Vec<u8> {
        self.baseline.clone()
    }
    pub fn edited(&self) -> Vec<u8> {
        self.edited.clone()
    }
    /// 1 inside the region the edit is meant to change.
    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }
    pub fn side() -> usize {
        SIDE
    }
    pub fn faithfulness(&self) -> f64 {
        self.metrics.faithfulness_unedited
    }
    pub fn baseline_faithfulness(&self) -> f64 {
        self.baseline_metrics.faithfulness_unedited
    }
    pub fn editability(&self) -> f64 {
        self.metrics.editability_edited
    }
    pub fn baseline_editability(&self) -> f64 {
        self.baseline_metrics.editability_edited
    }
    pub fn cosine_mean(&self) -> f64 {
        self.metrics.cosine_mean
    }
    pub fn fg_steps(&self) -> usize {
        self.metrics.fg_steps
    }
}

#[wasm_bindgen]
pub struct Editor {
    bench: Benchmark,
}

impl Editor {
    pub fn build(scenes: usize, seed: u32) -> Result<Editor> {
        let bench = Benchmark::build(BenchmarkConfig {
            scenes,
            seed: seed as u64,
            classifier_samples: 300,
            ..BenchmarkConfig::default()
        })?;
        Ok(Editor { bench })
    }

    pub fn edit(&self, scene: usize, knobs: &Knobs, perturb: &str, seed: u32) -> Result<EditView> {
        let variant = knobs.variant(perturb)?;
        let baseline_variant = Variant::baseline(knobs.tau)?;
        let (result, metrics) = self.bench.edit(scene, &variant, seed as u64)?;
        let (base, baseline_metrics) = self.bench.edit(scene, &baseline_variant, seed as u64)?;
        let s = self
            .bench
            .scenes
            .get(scene)
            .ok_or_else(|| FgsError::InvalidArgument(format!("no scene {scene}")))?;
        Ok(EditView {
            input: gray(&s.image),
            baseline: gray(&from_latent(&base.edited)),
            edited: gray(&from_latent(&result.edited)),
            mask: s.mask.cells().iter().map(|&c| c as u8).collect(),
            baseline_metrics,
            metrics,
        })
    }

    /// Flattened `(t, mean cosine)` pairs over the injected steps.
    pub fn misalignment(
        &self,
        runs: usize,
        knobs: &Knobs,
        perturb: &str,
        seed: u32,
    ) -> Result<Vec<f64>> {
        let curve = misalignment_study(&self.bench, &knobs.variant(perturb)?, runs, seed as u64)?;
        Ok(curve.into_iter().flat_map(|(t, c)| [t as f64, c]).collect())
    }
}

#[wasm_bindgen]
impl Editor {
    #[wasm_bindgen(constructor)]
    pub fn js_new(scenes: usize, seed: u32) -> std::result::Result<Editor, JsError> {
        Editor::build(scenes, seed).map_err(js)
    }

    pub fn scene_count(&self) -> usize {
        self.bench.scenes.len()
    }

    pub fn steps(&self) -> usize {
        self.bench.sched.steps()
    }

    #[wasm_bindgen(js_name = edit)]
    pub fn js_edit(
        &self,
        scene: usize,
        knobs: &Knobs,
        perturb: &str,
        seed: u32,
    ) -> std::result::Result<EditView, JsError> {
        self.edit(scene, knobs, perturb, seed).map_err(js)
    }

    #[wasm_bindgen(js_name = misalignment)]
    pub fn js_misalignment(
        &self,
        runs: usize,
        knobs: &Knobs,
        perturb: &str,
        seed: u32,
    ) -> std::result::Result<Vec<f64>, JsError> {
        self.misalignment(runs, knobs, perturb, seed).map_err(js)
    }
}

/// CFG scales for `t = 1..=steps` followed by the FG scales.
pub fn schedule_curves(tag: &str, w_cfg: f64, w_fg: f64, k: f64, steps: usize) -> Result<Vec<f64>> {
    let guidance = GuidanceConfig {
        w_cfg,
        w_fg,
        k,
        tag: tag.parse::<TransferTag>()?,
        ..GuidanceConfig::default()
    };
    guidance.validate()?;
    let scales = guidance.scales(steps)?;
    let (cfg, fg): (Vec<f64>, Vec<f64>) = (1..=steps).map(|t| scales.at(t)).unzip();
    Ok(cfg.into_iter().chain(fg).collect())
}

#[wasm_bindgen(js_name = scheduleCurves)]
pub fn js_schedule_curves(
    tag: &str,
    w_cfg: f64,
    w_fg: f64,
    k: f64,
    steps: usize,
) -> std::result::Result<Vec<f64>, JsError> {
    schedule_curves(tag, w_cfg, w_fg, k, steps).map_err(js)
}
