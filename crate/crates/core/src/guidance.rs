//! Guidance algebra: classifier-free guidance, faithfulness guidance, their sum,
//! and the logarithmic scale schedules with role assignment.

use crate::error::{invalid, Result};
use crate::tensor::Grid;
use crate::transfer::{InjectionPolicy, PerturbKind, TransferTag};

/// `ε_c + w (ε_c − ε_u)`.
pub fn cfg_combine(eps_c: &Grid, eps_u: &Grid, w: f64) -> Result<Grid> {
    if w == 0.0 {
        eps_c.ensure_same_shape(eps_u)?;
        return Ok(eps_c.clone());
    }
    eps_c.zip_map(eps_u, |c, u| c + w * (c - u))
}

/// `ε(·,c,I) + w (ε(·,c,I) − ε(·,c,I'))`. Same algebra as [`cfg_combine`] with
/// the perturbed-payload prediction as the reference.
pub fn fg_combine(eps_ci: &Grid, eps_cip: &Grid, w: f64) -> Result<Grid> {
    cfg_combine(eps_ci, eps_cip, w)
}

/// Both guidance terms on top of `ε(·,c,I)`. A zero weight drops its term
/// entirely, so the result coincides bit-for-bit with the single-term forms.
pub fn combined(
    eps_ci: &Grid,
    eps_ui: &Grid,
    eps_cip: &Grid,
    w_cfg: f64,
    w_fg: f64,
) -> Result<Grid> {
    eps_ci.ensure_same_shape(eps_ui)?;
    eps_ci.ensure_same_shape(eps_cip)?;
    match (w_cfg == 0.0, w_fg == 0.0) {
        (true, true) => Ok(eps_ci.clone()),
        (false, true) => cfg_combine(eps_ci, eps_ui, w_cfg),
        (true, false) => fg_combine(eps_ci, eps_cip, w_fg),
        (false, false) => {
            let data = eps_ci
                .data()
                .iter()
                .zip(eps_ui.data())
                .zip(eps_cip.data())
                .map(|((&c, &u), &p)| c + w_cfg * (c - u) + w_fg * (c - p))
                .collect();
            Grid::new(eps_ci.height(), eps_ci.width(), data)
        }
    }
}

/// Logarithmic curves at progress `s ∈ [0, 1]` (0 = noisiest step):
/// the decreasing scale `w_d·ln(1 + k(1−s))/ln(1+k)` and the increasing
/// scale `w_i·ln(1 + k s)/ln(1+k)`.
pub fn schedule_scales(s: f64, k: f64, w_d: f64, w_i: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&s) {
        return Err(invalid(format!("progress must lie in [0, 1], got {s}")));
    }
    if !(k > 0.0) || !k.is_finite() {
        return Err(invalid(format!("k must be positive, got {k}")));
    }
    let norm = k.ln_1p();
    let dec = w_d * ((k * (1.0 - s)).ln_1p() / norm);
    let inc = w_i * ((k * s).ln_1p() / norm);
    Ok((dec, inc))
}

/// Per-step `(w_cfg_t, w_fg_t)`, index 0 being `t = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledScales {
    pub cfg: Vec<f64>,
    pub fg: Vec<f64>,
}

impl ScheduledScales {
    pub fn constant(w_cfg: f64, w_fg: f64, steps: usize) -> Self {
        Self {
            cfg: vec![w_cfg; steps],
            fg: vec![w_fg; steps],
        }
    }

    pub fn len(&self) -> usize {
        self.cfg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cfg.is_empty()
    }

    /// Scales for timestep `t` of a `T = len()` step run.
    pub fn at(&self, t: usize) -> (f64, f64) {
        let i = self.len() - t;
        (self.cfg[i], self.fg[i])
    }
}

/// Layout payloads put FG on the decreasing curve and CFG on the increasing
/// one; detail payloads swap the roles.
pub fn assign_roles(
    tag: TransferTag,
    w_cfg_base: f64,
    w_fg_base: f64,
    k: f64,
    steps: usize,
) -> Result<ScheduledScales> {
    if steps < 2 {
        return Err(invalid("scheduling needs at least 2 steps"));
    }
    let mut cfg = Vec::with_capacity(steps);
    let mut fg = Vec::with_capacity(steps);
    for i in 0..steps {
        let s = i as f64 / (steps - 1) as f64;
        let (c, f) = match tag {
            TransferTag::Layout => {
                let (dec, inc) = schedule_scales(s, k, w_fg_base, w_cfg_base)?;
                (inc, dec)
            }
            TransferTag::Detail => schedule_scales(s, k, w_cfg_base, w_fg_base)?,
        };
        cfg.push(c);
        fg.push(f);
    }
    Ok(ScheduledScales { cfg, fg })
}

/// All guidance knobs of one edit.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub w_cfg: f64,
    pub w_fg: f64,
    pub k: f64,
    /// Role assignment for the scheduled curves.
    pub tag: TransferTag,
    /// Log-schedule the scales (FGS); otherwise both stay constant (FG).
    pub schedule: bool,
    /// With `schedule`, also schedule CFG; otherwise only FG follows its curve.
    pub schedule_cfg: bool,
    pub perturb: PerturbKind,
    pub injection: InjectionPolicy,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w_cfg: 7.5,
            w_fg: 10.0,
            k: 100.0,
            tag: TransferTag::Layout,
            schedule: true,
            schedule_cfg: true,
            perturb: PerturbKind::Blur { sigma: 5.0 },
            injection: InjectionPolicy::new(0.5).expect("valid tau"),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_cfg >= 0.0) || !(self.w_fg >= 0.0) {
            return Err(invalid("guidance weights must be non-negative"));
        }
        if !(self.k > 0.0) {
            return Err(invalid("k must be positive"));
        }
        Ok(())
    }

    pub fn scales(&self, steps: usize) -> Result<ScheduledScales> {
        self.validate()?;
        if !self.schedule {
            return Ok(ScheduledScales::constant(self.w_cfg, self.w_fg, steps));
        }
        let mut scales = assign_roles(self.tag, self.w_cfg, self.w_fg, self.k, steps)?;
        if !self.schedule_cfg {
            scales.cfg = vec![self.w_cfg; steps];
        }
        Ok(scales)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sample_standard_normal, SeededRng};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn s(v: f64) -> Grid {
        Grid::vector(vec![v]).unwrap()
    }

    fn random(seed: u64, n: usize) -> Grid {
        Grid::vector(sample_standard_normal(&mut SeededRng::new(seed), n).unwrap()).unwrap()
    }

    #[test]
    fn cfg_examples() {
        let c = random(1, 6);
        let u = random(2, 6);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        assert_abs_diff_eq!(
            cfg_combine(&s(1.0), &s(0.6), 7.5).unwrap().data()[0],
            4.0,
            epsilon = 1e-12
        );
        assert_eq!(cfg_combine(&c, &c, 3.0).unwrap(), c);
        assert!(cfg_combine(&c, &random(3, 5), 1.0).is_err());
    }

    #[test]
    fn fg_examples() {
        let c = random(1, 6);
        assert_eq!(fg_combine(&c, &random(4, 6), 0.0).unwrap(), c);
        assert_eq!(fg_combine(&c, &c, 10.0).unwrap(), c);
        assert_abs_diff_eq!(
            fg_combine(&s(1.0), &s(0.9), 10.0).unwrap().data()[0],
            2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn combined_examples() {
        let (c, u, p) = (random(1, 8), random(2, 8), random(3, 8));
        assert_eq!(
            combined(&c, &u, &p, 2.5, 0.0).unwrap(),
            cfg_combine(&c, &u, 2.5).unwrap()
        );
        assert_eq!(
            combined(&c, &u, &p, 0.0, 4.0).unwrap(),
            fg_combine(&c, &p, 4.0).unwrap()
        );
        assert_abs_diff_eq!(
            combined(&s(1.0), &s(0.8), &s(0.9), 2.0, 10.0)
                .unwrap()
                .data()[0],
            2.4,
            epsilon = 1e-12
        );
        assert!(combined(&c, &u, &random(4, 3), 1.0, 1.0).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule_scales(0.0, 100.0, 10.0, 7.0).unwrap(), (10.0, 0.0));
        assert_eq!(schedule_scales(1.0, 100.0, 10.0, 7.0).unwrap(), (0.0, 7.0));
        let (_, inc) = schedule_scales(0.5, 100.0, 10.0, 10.0).unwrap();
        // 10 ln 51 / ln 101
        assert_abs_diff_eq!(inc, 8.5194, epsilon = 1e-4);
        assert!(schedule_scales(1.01, 100.0, 1.0, 1.0).is_err());
        assert!(schedule_scales(-0.01, 100.0, 1.0, 1.0).is_err());
        assert!(schedule_scales(0.5, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn schedule_monotone_and_bounded() {
        for k in [0.5, 10.0, 100.0, 1000.0] {
            let pts: Vec<(f64, f64)> = (0..100)
                .map(|i| schedule_scales(i as f64 / 99.0, k, 3.0, 5.0).unwrap())
                .collect();
            for w in pts.windows(2) {
                assert!(w[1].0 < w[0].0);
                assert!(w[1].1 > w[0].1);
            }
            for (d, i) in pts {
                assert!((0.0..=3.0).contains(&d) && (0.0..=5.0).contains(&i));
            }
        }
    }

    #[test]
    fn role_assignment() {
        let layout = assign_roles(TransferTag::Layout, 7.5, 10.0, 100.0, 51).unwrap();
        assert_eq!((layout.cfg[0], layout.fg[0]), (0.0, 10.0));
        assert_eq!((layout.cfg[50], layout.fg[50]), (7.5, 0.0));
        assert_abs_diff_eq!(layout.fg[25], 8.5194, epsilon = 1e-4);
        let detail = assign_roles(TransferTag::Detail, 7.5, 10.0, 100.0, 51).unwrap();
        assert_eq!((detail.cfg[0], detail.fg[0]), (7.5, 0.0));
        assert_eq!(layout.at(51), (0.0, 10.0));
        assert_eq!(layout.at(1), (7.5, 0.0));
    }

    #[test]
    fn config_scales() {
        let mut cfg = GuidanceConfig {
            schedule: false,
            ..Default::default()
        };
        assert_eq!(
            cfg.scales(4).unwrap(),
            ScheduledScales::constant(7.5, 10.0, 4)
        );
        cfg.schedule = true;
        cfg.schedule_cfg = false;
        let sc = cfg.scales(4).unwrap();
        assert!(sc.cfg.iter().all(|&w| w == 7.5));
        assert_eq!(sc.fg[0], 10.0);
        cfg.w_fg = -1.0;
        assert!(cfg.scales(4).is_err());
    }

    proptest! {
        #[test]
        fn combined_matches_manual_sum(seed in 0u64..5000, wc in 0.0f64..20.0, wf in 0.0f64..50.0) {
            let (c, u, p) = (random(seed, 7), random(seed + 1, 7), random(seed + 2, 7));
            let out = combined(&c, &u, &p, wc, wf).unwrap();
            for i in 0..7 {
                let (c, u, p) = (c.data()[i], u.data()[i], p.data()[i]);
                let manual = c + wc * (c - u) + wf * (c - p);
                prop_assert!((out.data()[i] - manual).abs() <= 1e-12 * (1.0 + manual.abs()));
            }
        }

        #[test]
        fn scheduled_curves_bounded(s in 0.0f64..=1.0, k in 0.01f64..5000.0, wd in 0.0f64..50.0, wi in 0.0f64..50.0) {
            let (d, i) = schedule_scales(s, k, wd, wi).unwrap();
            prop_assert!(d >= 0.0 && d <= wd * (1.0 + 1e-12));
            prop_assert!(i >= 0.0 && i <= wi * (1.0 + 1e-12));
        }
    }
}
