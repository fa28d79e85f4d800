//! Closed-form noise prediction for isotropic Gaussian mixtures.
//!
//! For data `z_0 ~ Σ_j w_j N(μ_j, s_j² I)` and `z_t = √α z_0 + √(1−α) ε`, each
//! component stays Gaussian under the forward process, so the posterior over
//! components and the posterior mean `E[z_0 | z_t, c]` are exact. The optimal
//! noise prediction is then `ε* = (z_t − √α E[z_0 | z_t, c]) / √(1−α)`.
//!
//! A condition is a subset of components; the conditional distribution is the
//! prior restricted to that subset and renormalized.

use crate::denoiser::{Condition, Control, Denoiser, Prediction};
use crate::diffusion::{LatentState, NoiseSchedule};
use crate::error::{invalid, FgsError, Result};
use crate::tensor::Grid;
use crate::transfer::{ResponsibilityPayload, TransferPayload};

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Scalar variance `s²`; zero makes the component a point mass.
    pub var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    dim: usize,
    components: Vec<Component>,
}

impl MixtureModel {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| invalid("mixture needs at least one component"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(invalid("mixture dimension must be positive"));
        }
        for (j, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(invalid(format!(
                    "component {j} has dimension {}, expected {dim}",
                    c.mean.len()
                )));
            }
            if !(c.weight > 0.0) || !(c.var >= 0.0) || c.mean.iter().any(|m| !m.is_finite()) {
                return Err(invalid(format!(
                    "component {j} has invalid weight, variance or mean"
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("mixture weights sum to {total}")));
        }
        Ok(Self { dim, components })
    }

    /// Equal weights over the given `(mean, var)` pairs.
    pub fn uniform(parts: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        let w = 1.0 / parts.len().max(1) as f64;
        Self::new(
            parts
                .into_iter()
                .map(|(mean, var)| Component {
                    weight: w,
                    mean,
                    var,
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }
}

/// A subset of component indices, or `None` for the unconditional prior.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionSet(Option<Vec<usize>>);

impl ConditionSet {
    pub fn null() -> Self {
        Self(None)
    }

    pub fn of(mut indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(invalid("condition set must be non-empty"));
        }
        indices.sort_unstable();
        indices.dedup();
        Ok(Self(Some(indices)))
    }

    pub fn indices(&self) -> Option<&[usize]> {
        self.0.as_deref()
    }

    fn members(&self, k: usize) -> Result<Vec<usize>> {
        match &self.0 {
            None => Ok((0..k).collect()),
            Some(ix) => {
                if let Some(&bad) = ix.iter().find(|&&j| j >= k) {
                    return Err(invalid(format!(
                        "condition refers to component {bad} of {k}"
                    )));
                }
                Ok(ix.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    /// One entry per component, zero outside the condition set.
    pub weights: Vec<f64>,
    /// Every restricted density underflowed; `weights` is uniform over the set.
    pub degenerate: bool,
}

fn check_latent(z: &LatentState, mixture: &MixtureModel, sched: &NoiseSchedule) -> Result<()> {
    if z.value.len() != mixture.dim {
        return Err(FgsError::ShapeMismatch {
            expected: (1, mixture.dim),
            got: z.value.shape(),
        });
    }
    if z.t > sched.steps() {
        return Err(FgsError::InvalidState(format!(
            "timestep {} outside schedule",
            z.t
        )));
    }
    Ok(())
}

/// Posterior component weights `r_j ∝ w_j N(z_t; √α μ_j, (α s_j² + 1 − α) I)` over the condition set.
pub fn responsibilities(
    z: &LatentState,
    mixture: &MixtureModel,
    cond: &ConditionSet,
    sched: &NoiseSchedule,
) -> Result<Responsibilities> {
    check_latent(z, mixture, sched)?;
    let members = cond.members(mixture.len())?;
    let alpha = sched.alpha(z.t);
    let sa = alpha.sqrt();
    let d = mixture.dim as f64;
    let x = z.value.data();

    let log_density: Vec<f64> = members
        .iter()
        .map(|&j| {
            let c = &mixture.components[j];
            let v = alpha * c.var + (1.0 - alpha);
            let sq: f64 = x
                .iter()
                .zip(&c.mean)
                .map(|(xi, mi)| (xi - sa * mi).powi(2))
                .sum();
            if v > 0.0 {
                c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - sq / (2.0 * v)
            } else if sq == 0.0 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();

    let mut weights = vec![0.0; mixture.len()];
    let max = log_density
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        let u = 1.0 / members.len() as f64;
        for &j in &members {
            weights[j] = u;
        }
        return Ok(Responsibilities {
            weights,
            degenerate: true,
        });
    }
    if max == f64::INFINITY {
        // z sits exactly on one or more point masses at α = 1
        let hits: Vec<usize> = members
            .iter()
            .zip(&log_density)
            .filter(|(_, &l)| l == f64::INFINITY)
            .map(|(&j, _)| j)
            .collect();
        let hit_mass: f64 = hits.iter().map(|&j| mixture.components[j].weight).sum();
        for &j in &hits {
            weights[j] = mixture.components[j].weight / hit_mass;
        }
        return Ok(Responsibilities {
            weights,
            degenerate: false,
        });
    }
    let total: f64 = log_density.iter().map(|l| (l - max).exp()).sum();
    for (&j, l) in members.iter().zip(&log_density) {
        weights[j] = (l - max).exp() / total;
    }
    Ok(Responsibilities {
        weights,
        degenerate: false,
    })
}

/// `E[z_0 | z_t, component j]` for every component with non-zero weight in `r`, mixed by `r`.
fn posterior_mean(
    z: &LatentState,
    mixture: &MixtureModel,
    sched: &NoiseSchedule,
    r: &[f64],
) -> Vec<f64> {
    let alpha = sched.alpha(z.t);
    let sa = alpha.sqrt();
    let x = z.value.data();
    let mut mean = vec![0.0; mixture.dim];
    for (c, &rj) in mixture.components.iter().zip(r) {
        if rj == 0.0 {
            continue;
        }
        let v = alpha * c.var + (1.0 - alpha);
        let gain = if v > 0.0 { sa * c.var / v } else { 0.0 };
        for ((m, xi), mu) in mean.iter_mut().zip(x).zip(&c.mean) {
            *m += rj * (mu + gain * (xi - sa * mu));
        }
    }
    mean
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticEps {
    pub eps: Grid,
    pub responsibilities: Vec<f64>,
    /// Set at `α_t = 1`, where ε is undefined and reported as zero, or when the
    /// responsibilities were degenerate.
    pub degenerate: bool,
}

fn eps_from_weights(
    z: &LatentState,
    mixture: &MixtureModel,
    sched: &NoiseSchedule,
    r: Vec<f64>,
    degenerate: bool,
) -> Result<AnalyticEps> {
    let alpha = sched.alpha(z.t);
    let noise = (1.0 - alpha).sqrt();
    let (h, w) = z.value.shape();
    if !(noise > 0.0) {
        return Ok(AnalyticEps {
            eps: Grid::zeros(h, w),
            responsibilities: r,
            degenerate: true,
        });
    }
    let mean = posterior_mean(z, mixture, sched, &r);
    let sa = alpha.sqrt();
    let data = z
        .value
        .data()
        .iter()
        .zip(&mean)
        .map(|(x, m)| (x - sa * m) / noise)
        .collect();
    Ok(AnalyticEps {
        eps: Grid::new(h, w, data)?,
        responsibilities: r,
        degenerate,
    })
}

/// Exact `E[ε | z_t, c]`.
pub fn analytic_eps(
    z: &LatentState,
    mixture: &MixtureModel,
    cond: &ConditionSet,
    sched: &NoiseSchedule,
) -> Result<AnalyticEps> {
    let r = responsibilities(z, mixture, cond, sched)?;
    eps_from_weights(z, mixture, sched, r.weights, r.degenerate)
}

/// The prediction with externally supplied responsibilities in place of the model's own.
pub fn override_eps(
    z: &LatentState,
    mixture: &MixtureModel,
    cond: &ConditionSet,
    sched: &NoiseSchedule,
    injected: &[f64],
) -> Result<AnalyticEps> {
    check_latent(z, mixture, sched)?;
    cond.members(mixture.len())?;
    if injected.len() != mixture.len() {
        return Err(invalid(format!(
            "injected responsibilities have length {}, expected {}",
            injected.len(),
            mixture.len()
        )));
    }
    if injected.iter().any(|&r| !(r >= 0.0)) {
        return Err(invalid("injected responsibilities must be non-negative"));
    }
    let s: f64 = injected.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("injected responsibilities sum to {s}")));
    }
    eps_from_weights(z, mixture, sched, injected.to_vec(), false)
}

/// Mixture denoiser over named conditions, each a component subset.
///
/// Injection: given a payload `I` captured under source set `S` and a branch
/// condition `C`, the editing path computes its own responsibilities `q` over
/// `C ∪ S` and uses
///
/// ```text
/// r = q(S) · I  +  q restricted to C \ S
/// ```
///
/// i.e. within the source components the reconstruction path's distribution
/// replaces the editing path's own, while the split between source-shared and
/// condition-only mass stays the editing path's. With `C = S` this reduces to
/// `r = I`.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    mixture: MixtureModel,
    classes: Vec<ConditionSet>,
    shape: (usize, usize),
}

impl AnalyticDenoiser {
    pub fn new(
        mixture: MixtureModel,
        classes: Vec<Vec<usize>>,
        shape: (usize, usize),
    ) -> Result<Self> {
        if shape.0 * shape.1 != mixture.dim() {
            return Err(invalid(format!(
                "latent shape {shape:?} does not match mixture dimension {}",
                mixture.dim()
            )));
        }
        let classes = classes
            .into_iter()
            .map(|ix| {
                let set = ConditionSet::of(ix)?;
                set.members(mixture.len())?;
                Ok(set)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mixture,
            classes,
            shape,
        })
    }

    pub fn mixture(&self) -> &MixtureModel {
        &self.mixture
    }

    pub fn condition_set(&self, cond: Condition) -> Result<ConditionSet> {
        match cond {
            Condition::Null => Ok(ConditionSet::null()),
            Condition::Class(id) => self
                .classes
                .get(id)
                .cloned()
                .ok_or_else(|| invalid(format!("unknown condition id {id}"))),
        }
    }

    fn injected_weights(
        &self,
        z: &LatentState,
        sched: &NoiseSchedule,
        cond: &ConditionSet,
        payload: &ResponsibilityPayload,
    ) -> Result<Vec<f64>> {
        let k = self.mixture.len();
        if payload.weights.len() != k {
            return Err(invalid("payload does not match the mixture"));
        }
        let branch = cond.members(k)?;
        let mut in_source = vec![false; k];
        for &j in &payload.source {
            in_source[j] = true;
        }
        let mut union = payload.source.clone();
        union.extend(branch.iter().copied().filter(|&j| !in_source[j]));
        let q = responsibilities(z, &self.mixture, &ConditionSet::of(union)?, sched)?.weights;
        let shared: f64 = payload.source.iter().map(|&j| q[j]).sum();
        let mut r: Vec<f64> = payload.weights.iter().map(|&w| shared * w).collect();
        for &j in branch.iter().filter(|&&j| !in_source[j]) {
            r[j] += q[j];
        }
        Ok(r)
    }
}

impl Denoiser for AnalyticDenoiser {
    fn latent_shape(&self) -> (usize, usize) {
        self.shape
    }

    fn num_conditions(&self) -> usize {
        self.classes.len()
    }

    fn predict(
        &self,
        z: &LatentState,
        sched: &NoiseSchedule,
        cond: Condition,
        control: Control<'_>,
    ) -> Result<Prediction> {
        if z.value.shape() != self.shape {
            return Err(FgsError::ShapeMismatch {
                expected: self.shape,
                got: z.value.shape(),
            });
        }
        let set = self.condition_set(cond)?;
        let flat = LatentState::new(z.value.clone(), z.t);
        let out = match control {
            Control::Plain | Control::Record => analytic_eps(&flat, &self.mixture, &set, sched)?,
            Control::Inject(TransferPayload::Responsibilities(payload)) => {
                let r = self.injected_weights(&flat, sched, &set, payload)?;
                eps_from_weights(&flat, &self.mixture, sched, r, false)?
            }
            Control::Inject(TransferPayload::Attention(_)) => {
                return Err(invalid(
                    "the analytic denoiser cannot take attention payloads",
                ))
            }
        };
        let recorded = match control {
            Control::Record => Some(TransferPayload::Responsibilities(ResponsibilityPayload {
                weights: out.responsibilities.clone(),
                source: set.members(self.mixture.len())?,
            })),
            _ => None,
        };
        Ok(Prediction {
            eps: out.eps,
            recorded,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sched_with(alpha: f64) -> NoiseSchedule {
        NoiseSchedule::from_alphas(vec![1.0, alpha, 0.01]).unwrap()
    }

    fn at(x: Vec<f64>, t: usize) -> LatentState {
        LatentState::new(Grid::vector(x).unwrap(), t)
    }

    fn two_peaks(var: f64) -> MixtureModel {
        MixtureModel::uniform(vec![(vec![-2.0], var), (vec![2.0], var)]).unwrap()
    }

    #[test]
    fn symmetric_responsibilities() {
        let s = sched_with(0.5);
        let r = responsibilities(
            &at(vec![0.0], 1),
            &two_peaks(0.3),
            &ConditionSet::null(),
            &s,
        )
        .unwrap();
        assert_abs_diff_eq!(r.weights[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.weights[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn single_index_condition_is_one_hot() {
        let s = sched_with(0.5);
        let r = responsibilities(
            &at(vec![-1.3], 1),
            &two_peaks(0.3),
            &ConditionSet::of(vec![1]).unwrap(),
            &s,
        )
        .unwrap();
        assert_eq!(r.weights, vec![0.0, 1.0]);
    }

    #[test]
    fn sharp_peaks_at_clean_end() {
        let s = make_schedule(ScheduleKind::LinearBeta, 10).unwrap();
        let r = responsibilities(
            &at(vec![2.0], 0),
            &two_peaks(0.01),
            &ConditionSet::null(),
            &s,
        )
        .unwrap();
        assert!(r.weights[1] > 1.0 - 1e-9);
    }

    #[test]
    fn far_tail_does_not_underflow() {
        let s = sched_with(0.99);
        let r = responsibilities(
            &at(vec![1e4], 1),
            &two_peaks(0.01),
            &ConditionSet::null(),
            &s,
        )
        .unwrap();
        assert!(!r.degenerate);
        assert_abs_diff_eq!(r.weights[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn unit_gaussian_eps() {
        let m = MixtureModel::uniform(vec![(vec![0.0], 1.0)]).unwrap();
        let s = sched_with(0.36);
        let e = analytic_eps(&at(vec![2.0], 1), &m, &ConditionSet::null(), &s).unwrap();
        assert_abs_diff_eq!(e.eps.data()[0], 1.6, epsilon = 1e-12);
    }

    #[test]
    fn point_mass_eps() {
        let m = MixtureModel::uniform(vec![(vec![1.5, -0.5], 0.0), (vec![0.0, 0.0], 0.2)]).unwrap();
        let s = sched_with(0.7);
        let z = at(vec![0.3, 0.9], 1);
        let e = analytic_eps(&z, &m, &ConditionSet::of(vec![0]).unwrap(), &s).unwrap();
        let (sa, sn) = (0.7f64.sqrt(), 0.3f64.sqrt());
        assert_abs_diff_eq!(e.eps.data()[0], (0.3 - sa * 1.5) / sn, epsilon = 1e-12);
        assert_abs_diff_eq!(e.eps.data()[1], (0.9 + sa * 0.5) / sn, epsilon = 1e-12);
    }

    #[test]
    fn null_equals_all() {
        let m = two_peaks(0.2);
        let s = sched_with(0.4);
        let z = at(vec![0.7], 1);
        let a = analytic_eps(&z, &m, &ConditionSet::null(), &s).unwrap();
        let b = analytic_eps(&z, &m, &ConditionSet::of(vec![0, 1]).unwrap(), &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clean_end_is_guarded() {
        let m = two_peaks(0.2);
        let s = sched_with(0.4);
        let e = analytic_eps(&at(vec![0.7], 0), &m, &ConditionSet::null(), &s).unwrap();
        assert!(e.degenerate);
        assert_eq!(e.eps.data(), &[0.0]);
    }

    #[test]
    fn override_examples() {
        let m = two_peaks(0.2);
        let s = sched_with(0.4);
        let z = at(vec![0.7], 1);
        let own = analytic_eps(&z, &m, &ConditionSet::null(), &s).unwrap();
        let same = override_eps(&z, &m, &ConditionSet::null(), &s, &own.responsibilities).unwrap();
        assert_eq!(same.eps, own.eps);

        let hot = override_eps(&z, &m, &ConditionSet::null(), &s, &[0.0, 1.0]).unwrap();
        let cond = analytic_eps(&z, &m, &ConditionSet::of(vec![1]).unwrap(), &s).unwrap();
        assert_eq!(hot.eps, cond.eps);

        let other = [0.9, 0.1];
        let mid: Vec<f64> = own
            .responsibilities
            .iter()
            .zip(other)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let e_other = override_eps(&z, &m, &ConditionSet::null(), &s, &other)
            .unwrap()
            .eps
            .data()[0];
        let e_mid = override_eps(&z, &m, &ConditionSet::null(), &s, &mid)
            .unwrap()
            .eps
            .data()[0];
        assert_abs_diff_eq!(e_mid, 0.5 * (own.eps.data()[0] + e_other), epsilon = 1e-12);

        assert!(override_eps(&z, &m, &ConditionSet::null(), &s, &[0.5, 0.6]).is_err());
        assert!(override_eps(&z, &m, &ConditionSet::null(), &s, &[1.0]).is_err());
    }

    #[test]
    fn conditions_validated() {
        assert!(ConditionSet::of(vec![]).is_err());
        let m = two_peaks(0.2);
        let s = sched_with(0.4);
        assert!(responsibilities(
            &at(vec![0.0], 1),
            &m,
            &ConditionSet::of(vec![2]).unwrap(),
            &s
        )
        .is_err());
        assert!(MixtureModel::uniform(vec![(vec![0.0], 1.0), (vec![0.0, 1.0], 1.0)]).is_err());
        assert!(MixtureModel::new(vec![Component {
            weight: 0.7,
            mean: vec![0.0],
            var: 1.0
        }])
        .is_err());
    }

    #[test]
    fn self_injection_with_same_condition() {
        let m = MixtureModel::uniform(vec![(vec![-2.0], 0.1), (vec![-1.0], 0.1), (vec![2.0], 0.1)])
            .unwrap();
        let den = AnalyticDenoiser::new(m, vec![vec![0, 1], vec![2]], (1, 1)).unwrap();
        let s = make_schedule(ScheduleKind::LinearBeta, 20).unwrap();
        let z = at(vec![0.4], 9);
        let rec = den
            .predict(&z, &s, Condition::Class(0), Control::Record)
            .unwrap();
        let payload = rec.recorded.unwrap();
        let inj = den
            .predict(&z, &s, Condition::Class(0), Control::Inject(&payload))
            .unwrap();
        assert_eq!(inj.eps, rec.eps);
    }

    #[test]
    fn injected_weights_are_normalized() {
        let m =
            MixtureModel::uniform((0..6).map(|i| (vec![i as f64 - 2.5], 0.05)).collect()).unwrap();
        let den = AnalyticDenoiser::new(m, vec![vec![0, 1, 2], vec![3, 4, 5]], (1, 1)).unwrap();
        let s = make_schedule(ScheduleKind::LinearBeta, 20).unwrap();
        let z = at(vec![0.1], 12);
        let payload =
            ResponsibilityPayload::new(vec![0.2, 0.5, 0.3, 0.0, 0.0, 0.0], vec![0, 1, 2]).unwrap();
        for cond in [
            ConditionSet::null(),
            ConditionSet::of(vec![3, 4, 5]).unwrap(),
        ] {
            let r = den.injected_weights(&z, &s, &cond, &payload).unwrap();
            assert_abs_diff_eq!(r.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            // within the source block the payload's proportions are kept
            assert_abs_diff_eq!(r[1] / r[0], 2.5, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn permutation_invariance(seed in 0u64..2000, z in -4.0f64..4.0) {
            let mut rng = crate::tensor::SeededRng::new(seed);
            let parts: Vec<(Vec<f64>, f64)> = (0..4).map(|_| (vec![3.0 * rng.standard_normal()], 0.05 + rng.uniform())).collect();
            let m = MixtureModel::uniform(parts.clone()).unwrap();
            let rev = MixtureModel::uniform(parts.into_iter().rev().collect()).unwrap();
            let s = make_schedule(ScheduleKind::LinearBeta, 20).unwrap();
            let st = at(vec![z], 7);
            let a = responsibilities(&st, &m, &ConditionSet::null(), &s).unwrap().weights;
            let b = responsibilities(&st, &rev, &ConditionSet::null(), &s).unwrap().weights;
            for j in 0..4 {
                prop_assert!((a[j] - b[3 - j]).abs() < 1e-12);
            }
        }
    }
}
