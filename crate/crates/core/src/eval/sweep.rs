//! Grids of edits over the benchmark, flattened into CSV rows.

use std::io::Write;

use crate::error::{invalid, Result};
use crate::eval::benchmark::{Benchmark, EditMetrics, Variant};
use crate::eval::metrics::{mean_curve, misalignment_curve};
use crate::guidance::GuidanceConfig;
use crate::transfer::{InjectionPolicy, PerturbKind};

/// One swept hyperparameter and its values; the other knobs stay at the base config.
#[derive(Debug, Clone, PartialEq)]
pub enum Axis {
    Tau(Vec<f64>),
    K(Vec<f64>),
    /// Blur strength; each point uses a Gaussian blur perturbation.
    Sigma(Vec<f64>),
    WFg(Vec<f64>),
    Perturb(Vec<PerturbKind>),
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Tau(_) => "tau",
            Axis::K(_) => "k",
            Axis::Sigma(_) => "sigma",
            Axis::WFg(_) => "w_fg",
            Axis::Perturb(_) => "perturb",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Axis::Tau(v) | Axis::K(v) | Axis::Sigma(v) | Axis::WFg(v) => v.len(),
            Axis::Perturb(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One-at-a-time sweeps: every axis value becomes one grid point, so the grid
/// size is the sum of the axis lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub base: GuidanceConfig,
    pub axes: Vec<Axis>,
}

impl SweepPlan {
    /// The k, σ and w_fg grids around the defaults.
    pub fn hyperparameters(base: GuidanceConfig) -> Self {
        Self {
            base,
            axes: vec![
                Axis::K(vec![10.0, 50.0, 100.0, 500.0, 1000.0]),
                Axis::Sigma(vec![1.0, 2.0, 5.0, 10.0, 100.0]),
                Axis::WFg(vec![0.0, 5.0, 10.0, 20.0, 50.0]),
            ],
        }
    }

    pub fn grid_size(&self) -> usize {
        self.axes.iter().map(Axis::len).sum()
    }

    /// Every point runs the full method (injection, FG when `w_fg > 0`, scheduling per the base config).
    pub fn variants(&self) -> Result<Vec<Variant>> {
        self.base.validate()?;
        let mut out = Vec::with_capacity(self.grid_size());
        for axis in &self.axes {
            if axis.is_empty() {
                return Err(invalid(format!(
                    "sweep axis '{}' has no values",
                    axis.name()
                )));
            }
            let mut push = |label: String, guidance: GuidanceConfig| -> Result<()> {
                guidance.validate()?;
                out.push(Variant {
                    label,
                    guidance,
                    use_fg: true,
                });
                Ok(())
            };
            match axis {
                Axis::Tau(values) => {
                    for &tau in values {
                        push(
                            format!("tau={tau}"),
                            GuidanceConfig {
                                injection: InjectionPolicy::new(tau)?,
                                ..self.base.clone()
                            },
                        )?;
                    }
                }
                Axis::K(values) => {
                    for &k in values {
                        push(
                            format!("k={k}"),
                            GuidanceConfig {
                                k,
                                ..self.base.clone()
                            },
                        )?;
                    }
                }
                Axis::Sigma(values) => {
                    for &sigma in values {
                        push(
                            format!("sigma={sigma}"),
                            GuidanceConfig {
                                perturb: PerturbKind::blur(sigma)?,
                                ..self.base.clone()
                            },
                        )?;
                    }
                }
                Axis::WFg(values) => {
                    for &w_fg in values {
                        push(
                            format!("w_fg={w_fg}"),
                            GuidanceConfig {
                                w_fg,
                                ..self.base.clone()
                            },
                        )?;
                    }
                }
                Axis::Perturb(kinds) => {
                    for &perturb in kinds {
                        push(
                            format!("perturb={}", perturb_name(perturb)),
                            GuidanceConfig {
                                perturb,
                                ..self.base.clone()
                            },
                        )?;
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn perturb_name(kind: PerturbKind) -> &'static str {
    match kind {
        PerturbKind::Blur { .. } => "blur",
        PerturbKind::Noise { .. } => "noise",
        PerturbKind::Identity => "identity",
    }
}

/// Per-run seed, a SplitMix64 mix of the sweep seed and the run id.
pub fn run_seed(seed: u64, run_id: usize) -> u64 {
    let mut z = seed ^ (run_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: usize,
    pub scene: usize,
    pub variant: String,
    pub tau: f64,
    pub k: f64,
    /// Blur strength; absent for other perturbations.
    pub sigma: Option<f64>,
    pub w_fg: f64,
    pub perturb: &'static str,
    pub scheduled: bool,
    pub metrics: EditMetrics,
}

pub const CSV_COLUMNS: [&str; 16] = [
    "run_id",
    "scene",
    "variant",
    "tau",
    "k",
    "sigma",
    "w_fg",
    "perturb",
    "scheduled",
    "faithfulness_whole",
    "faithfulness_unedited",
    "structure_selfsim",
    "editability_whole",
    "editability_edited",
    "cosine_mean",
    "fg_steps",
];

/// `%g`-style text with 6 significant digits.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let fixed = format!("{:.*}", (5 - exp) as usize, v);
        if fixed.contains('.') {
            fixed
                .trim_end_matches('0')
                .trim_end_matches('.')
                .to_string()
        } else {
            fixed
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{exp}")
    }
}

impl MetricsRow {
    fn record(&self) -> Vec<String> {
        let m = &self.metrics;
        vec![
            self.run_id.to_string(),
            self.scene.to_string(),
            self.variant.clone(),
            format_sig6(self.tau),
            format_sig6(self.k),
            self.sigma.map(format_sig6).unwrap_or_default(),
            format_sig6(self.w_fg),
            self.perturb.to_string(),
            self.scheduled.to_string(),
            format_sig6(m.faithfulness_whole),
            format_sig6(m.faithfulness_unedited),
            format_sig6(m.structure_selfsim),
            format_sig6(m.editability_whole),
            format_sig6(m.editability_edited),
            format_sig6(m.cosine_mean),
            m.fg_steps.to_string(),
        ]
    }
}

fn row_for(
    bench: &Benchmark,
    variant: &Variant,
    scene: usize,
    run_id: usize,
    seed: u64,
) -> Result<MetricsRow> {
    let (_, metrics) = bench.edit(scene, variant, run_seed(seed, run_id))?;
    let g = &variant.guidance;
    Ok(MetricsRow {
        run_id,
        scene,
        variant: variant.label.clone(),
        tau: g.injection.tau(),
        k: g.k,
        sigma: match g.perturb {
            PerturbKind::Blur { sigma } => Some(sigma),
            _ => None,
        },
        w_fg: if variant.use_fg { g.w_fg } else { 0.0 },
        perturb: perturb_name(g.perturb),
        scheduled: g.schedule,
        metrics,
    })
}

/// Every variant on every scene; run id `variant_index · scenes + scene`, rows in run-id order.
pub fn run_grid(bench: &Benchmark, variants: &[Variant], seed: u64) -> Result<Vec<MetricsRow>> {
    let n = bench.scenes.len();
    let jobs: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..n).map(move |s| (v, s)))
        .collect();
    let run = |&(v, s): &(usize, usize)| row_for(bench, &variants[v], s, v * n + s, seed);

    #[cfg(feature = "parallel")]
    let rows: Vec<Result<MetricsRow>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Result<MetricsRow>> = jobs.iter().map(run).collect();

    rows.into_iter().collect()
}

pub fn sweep(bench: &Benchmark, plan: &SweepPlan, seed: u64) -> Result<Vec<MetricsRow>> {
    run_grid(bench, &plan.variants()?, seed)
}

pub fn write_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[MetricsRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Mean CFG/FG cosine per injected timestep over `runs` edits (scene `i mod scenes` for run `i`).
pub fn misalignment_study(
    bench: &Benchmark,
    variant: &Variant,
    runs: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if runs == 0 {
        return Err(invalid("need at least one run"));
    }
    let n = bench.scenes.len();
    let run = |i: usize| -> Result<Vec<(usize, f64)>> {
        let (result, _) = bench.edit(i % n, variant, run_seed(seed, i))?;
        misalignment_curve(&result)
    };

    #[cfg(feature = "parallel")]
    let curves: Vec<Result<Vec<(usize, f64)>>> = {
        use rayon::prelude::*;
        (0..runs).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let curves: Vec<Result<Vec<(usize, f64)>>> = (0..runs).map(run).collect();

    let curves = curves.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(mean_curve(&curves))
}

pub fn write_curve_csv<W: Write>(curve: &[(usize, f64)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "cosine_mean"])?;
    for &(t, c) in curve {
        w.write_record([t.to_string(), format_sig6(c)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.1234567), "0.123457");
        assert_eq!(format_sig6(-2.5), "-2.5");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(1234567.0), "1.23457e6");
        assert_eq!(format_sig6(0.0000123456789), "1.23457e-5");
        assert_eq!(format_sig6(0.000123456789), "0.000123457");
        assert_eq!(format_sig6(999999.7), "1e6");
    }

    #[test]
    fn plan_sizes() {
        let plan = SweepPlan::hyperparameters(GuidanceConfig::default());
        assert_eq!(plan.grid_size(), 15);
        let v = plan.variants().unwrap();
        assert_eq!(v.len(), 15);
        assert_eq!(v[0].guidance.k, 10.0);
        assert_eq!(v[7].guidance.perturb, PerturbKind::Blur { sigma: 5.0 });
        assert_eq!(v[14].guidance.w_fg, 50.0);
        let empty = SweepPlan {
            base: GuidanceConfig::default(),
            axes: vec![Axis::K(vec![])],
        };
        assert!(empty.variants().is_err());
        let bad = SweepPlan {
            base: GuidanceConfig::default(),
            axes: vec![Axis::Tau(vec![1.5])],
        };
        assert!(bad.variants().is_err());
    }

    #[test]
    fn run_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| run_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_eq!(run_seed(7, 3), run_seed(7, 3));
        assert_ne!(run_seed(7, 3), run_seed(8, 3));
    }
}
