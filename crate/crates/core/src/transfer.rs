//! Transferred information: capture on the reconstruction path, the injection
//! window, and the perturbations that stand in for an "unconditional" payload.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{invalid, FgsError, Result};
use crate::tensor::{
    convolve, convolve_1d, default_radius, gaussian_kernel, Grid, Kernel2D, SeededRng,
};

const NORMALIZATION_TOL: f64 = 1e-9;

/// Row-stochastic post-softmax attention over `N = h·w` tokens laid out on an `h × w` key grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    weights: Array2<f64>,
    key_shape: (usize, usize),
}

impl AttentionRecord {
    pub fn new(weights: Array2<f64>, key_shape: (usize, usize)) -> Result<Self> {
        let n = key_shape.0 * key_shape.1;
        if weights.dim() != (n, n) {
            return Err(FgsError::ShapeMismatch {
                expected: (n, n),
                got: weights.dim(),
            });
        }
        for (i, row) in weights.rows().into_iter().enumerate() {
            if row.iter().any(|&w| !(w >= 0.0)) {
                return Err(invalid(format!(
                    "attention row {i} has negative or NaN entries"
                )));
            }
            let s = row.sum();
            if (s - 1.0).abs() > NORMALIZATION_TOL {
                return Err(invalid(format!("attention row {i} sums to {s}")));
            }
        }
        Ok(Self { weights, key_shape })
    }

    /// Skips validation; callers guarantee row-stochasticity (softmax output).
    pub(crate) fn from_softmax(weights: Array2<f64>, key_shape: (usize, usize)) -> Self {
        Self { weights, key_shape }
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn key_shape(&self) -> (usize, usize) {
        self.key_shape
    }

    pub fn tokens(&self) -> usize {
        self.weights.nrows()
    }
}

/// Mixture responsibilities captured on the reconstruction path, together with
/// the component set of the source condition they were computed under.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsibilityPayload {
    pub weights: Vec<f64>,
    pub source: Vec<usize>,
}

impl ResponsibilityPayload {
    pub fn new(weights: Vec<f64>, source: Vec<usize>) -> Result<Self> {
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(invalid("responsibilities must be non-negative"));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > NORMALIZATION_TOL {
            return Err(invalid(format!("responsibilities sum to {s}")));
        }
        if source.iter().any(|&j| j >= weights.len()) {
            return Err(invalid("source component index out of range"));
        }
        Ok(Self { weights, source })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransferPayload {
    Attention(AttentionRecord),
    Responsibilities(ResponsibilityPayload),
}

/// Whether the transferred information describes coarse layout or fine detail.
/// Decides which guidance scale follows the decreasing schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferTag {
    Layout,
    Detail,
}

impl std::str::FromStr for TransferTag {
    type Err = FgsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layout" => Ok(Self::Layout),
            "detail" => Ok(Self::Detail),
            other => Err(invalid(format!("unknown transfer tag '{other}'"))),
        }
    }
}

/// Injection window: `tau` is the fraction of denoising steps, counted from
/// `t = T`, during which the editing path receives transferred information.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectionPolicy {
    tau: f64,
}

impl InjectionPolicy {
    pub fn new(tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(invalid(format!("tau must lie in [0, 1], got {tau}")));
        }
        Ok(Self { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// True for the `round(τ·T)` noisiest steps `t ∈ (T − round(τT), T]`.
pub fn should_inject(t: usize, steps: usize, policy: InjectionPolicy) -> bool {
    let injected = (policy.tau * steps as f64).round() as usize;
    t + injected > steps
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PerturbKind {
    Blur { sigma: f64 },
    Noise { scale: f64 },
    Identity,
}

impl PerturbKind {
    pub fn blur(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(invalid(format!("blur sigma must be positive, got {sigma}")));
        }
        Ok(Self::Blur { sigma })
    }

    pub fn noise(scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(invalid(format!(
                "noise scale must be positive, got {scale}"
            )));
        }
        Ok(Self::Noise { scale })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Blur { .. } => "blur",
            Self::Noise { .. } => "noise",
            Self::Identity => "identity",
        }
    }
}

impl Default for PerturbKind {
    fn default() -> Self {
        Self::Blur { sigma: 5.0 }
    }
}

/// Divide by the sum; an all-zero (or non-positive) vector becomes uniform.
fn renormalize(values: &mut [f64]) {
    let s: f64 = values.iter().sum();
    if s > 0.0 && s.is_finite() {
        values.iter_mut().for_each(|v| *v /= s);
    } else {
        let u = 1.0 / values.len() as f64;
        values.iter_mut().for_each(|v| *v = u);
    }
}

fn add_noise_and_clamp(values: &mut [f64], scale: f64, rng: &mut SeededRng) {
    for v in values.iter_mut() {
        *v = (*v + scale * rng.standard_normal()).max(0.0);
    }
    renormalize(values);
}

/// `I' = PERTURB(I)`. The random source is only consumed by [`PerturbKind::Noise`].
///
/// Responsibility vectors are perturbed only on their source set, so `I'`
/// keeps the payload's condition and loses its within-condition structure.
///
/// * blur: attention rows are reshaped onto the key grid and blurred in 2D
///   (reflect padding, radius `ceil(3σ)` capped by the grid); responsibility
///   vectors are blurred along the source set in index order. Results are renormalized.
/// * noise: add `N(0, scale²)` per entry, clamp at zero, renormalize.
/// * identity: attention becomes the identity matrix; responsibilities become
///   uniform over the source set.
pub fn perturb(
    payload: &TransferPayload,
    kind: PerturbKind,
    rng: &mut SeededRng,
) -> Result<TransferPayload> {
    match payload {
        TransferPayload::Attention(att) => {
            perturb_attention(att, kind, rng).map(TransferPayload::Attention)
        }
        TransferPayload::Responsibilities(r) => {
            let weights = perturb_on_support(r, kind, rng)?;
            Ok(TransferPayload::Responsibilities(ResponsibilityPayload {
                weights,
                source: r.source.clone(),
            }))
        }
    }
}

fn perturb_attention(
    att: &AttentionRecord,
    kind: PerturbKind,
    rng: &mut SeededRng,
) -> Result<AttentionRecord> {
    let (h, w) = att.key_shape;
    let n = att.tokens();
    let mut out = att.weights.clone();
    match kind {
        PerturbKind::Blur { sigma } => {
            let kernel =
                Kernel2D::separable(gaussian_kernel(sigma, default_radius(sigma, h.min(w)))?);
            if kernel.is_delta() {
                return Ok(att.clone());
            }
            for mut row in out.rows_mut() {
                let grid = Grid::new(h, w, row.to_vec())?;
                let mut blurred = convolve(&grid, &kernel)?.into_data();
                renormalize(&mut blurred);
                row.iter_mut().zip(blurred).for_each(|(dst, v)| *dst = v);
            }
        }
        PerturbKind::Noise { scale } => {
            for mut row in out.rows_mut() {
                let mut values = row.to_vec();
                add_noise_and_clamp(&mut values, scale, rng);
                row.iter_mut().zip(values).for_each(|(dst, v)| *dst = v);
            }
        }
        PerturbKind::Identity => out = Array2::eye(n),
    }
    Ok(AttentionRecord {
        weights: out,
        key_shape: att.key_shape,
    })
}

/// Perturbs the restriction of the weights to the source set, in source order,
/// keeping the mass the payload puts on that set. An empty source set means
/// the whole vector.
fn perturb_on_support(
    r: &ResponsibilityPayload,
    kind: PerturbKind,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if r.source.is_empty() {
        return perturb_vector(&r.weights, kind, rng);
    }
    let values: Vec<f64> = r.source.iter().map(|&j| r.weights[j]).collect();
    let mass: f64 = values.iter().sum();
    let perturbed = perturb_vector(&values, kind, rng)?;
    if perturbed == values {
        return Ok(r.weights.clone());
    }
    let mut out = r.weights.clone();
    let total: f64 = perturbed.iter().sum();
    for (&j, v) in r.source.iter().zip(perturbed) {
        out[j] = if total > 0.0 { mass * v / total } else { v };
    }
    Ok(out)
}

fn perturb_vector(weights: &[f64], kind: PerturbKind, rng: &mut SeededRng) -> Result<Vec<f64>> {
    let mut out = weights.to_vec();
    match kind {
        PerturbKind::Blur { sigma } => {
            if out.len() < 2 {
                return Ok(out);
            }
            let kernel = gaussian_kernel(sigma, default_radius(sigma, out.len()))?;
            if kernel.is_delta() {
                return Ok(out);
            }
            out = convolve_1d(&out, &kernel)?;
            renormalize(&mut out);
        }
        PerturbKind::Noise { scale } => add_noise_and_clamp(&mut out, scale, rng),
        PerturbKind::Identity => {
            let u = 1.0 / out.len() as f64;
            out.iter_mut().for_each(|v| *v = u);
        }
    }
    Ok(out)
}

/// Per-timestep payloads recorded on the reconstruction path.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferPacket {
    pub tag: TransferTag,
    payloads: BTreeMap<usize, TransferPayload>,
}

impl TransferPacket {
    pub fn new(tag: TransferTag) -> Self {
        Self {
            tag,
            payloads: BTreeMap::new(),
        }
    }

    pub fn capture(&mut self, t: usize, payload: TransferPayload) -> Result<()> {
        if self.payloads.contains_key(&t) {
            return Err(FgsError::InvalidState(format!(
                "payload for timestep {t} captured twice"
            )));
        }
        self.payloads.insert(t, payload);
        Ok(())
    }

    pub fn get(&self, t: usize) -> Option<&TransferPayload> {
        self.payloads.get(&t)
    }

    pub fn len(&self) -> usize {
        self.payloads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payloads.is_empty()
    }

    pub fn timesteps(&self) -> impl Iterator<Item = usize> + '_ {
        self.payloads.keys().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sample_standard_normal;
    use proptest::prelude::*;

    fn random_attention(seed: u64, h: usize, w: usize) -> AttentionRecord {
        let n = h * w;
        let mut rng = SeededRng::new(seed);
        let logits = sample_standard_normal(&mut rng, n * n).unwrap();
        let mut a = Array2::from_shape_vec((n, n), logits).unwrap();
        for mut row in a.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (2.0 * (v - m)).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        AttentionRecord::new(a, (h, w)).unwrap()
    }

    fn random_simplex(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = SeededRng::new(seed);
        let mut v: Vec<f64> = (0..n).map(|_| rng.uniform().powi(3)).collect();
        renormalize(&mut v);
        v
    }

    fn rows_normalized(p: &TransferPayload) -> bool {
        match p {
            TransferPayload::Attention(a) => a
                .weights()
                .rows()
                .into_iter()
                .all(|r| (r.sum() - 1.0).abs() < 1e-9 && r.iter().all(|&v| v >= 0.0)),
            TransferPayload::Responsibilities(r) => {
                (r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9
                    && r.weights.iter().all(|&v| v >= 0.0)
            }
        }
    }

    #[test]
    fn injection_window() {
        let half = InjectionPolicy::new(0.5).unwrap();
        assert!(should_inject(700, 1000, half));
        assert!(should_inject(501, 1000, half));
        assert!(!should_inject(500, 1000, half));
        let all = InjectionPolicy::new(1.0).unwrap();
        assert!((1..=50).all(|t| should_inject(t, 50, all)));
        let none = InjectionPolicy::new(0.0).unwrap();
        assert!((0..=50).all(|t| !should_inject(t, 50, none)));
        assert_eq!(
            (1..=50)
                .filter(|&t| should_inject(t, 50, InjectionPolicy::new(0.6).unwrap()))
                .count(),
            30
        );
        assert!(InjectionPolicy::new(1.5).is_err());
        assert!(InjectionPolicy::new(-0.1).is_err());
    }

    #[test]
    fn delta_blur_is_identity() {
        let mut rng = SeededRng::new(0);
        let att = TransferPayload::Attention(random_attention(1, 4, 4));
        let out = perturb(&att, PerturbKind::blur(1e-6).unwrap(), &mut rng).unwrap();
        assert_eq!(out, att);
        let r = TransferPayload::Responsibilities(
            ResponsibilityPayload::new(random_simplex(2, 9), vec![0, 1]).unwrap(),
        );
        assert_eq!(
            perturb(&r, PerturbKind::blur(1e-6).unwrap(), &mut rng).unwrap(),
            r
        );
    }

    #[test]
    fn identity_perturbation() {
        let mut rng = SeededRng::new(0);
        let att = TransferPayload::Attention(random_attention(4, 3, 3));
        let TransferPayload::Attention(out) =
            perturb(&att, PerturbKind::Identity, &mut rng).unwrap()
        else {
            unreachable!()
        };
        for (i, row) in out.weights().rows().into_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 1.0 } else { 0.0 });
            }
        }
        let r = TransferPayload::Responsibilities(
            ResponsibilityPayload::new(random_simplex(5, 4), vec![0, 1, 2, 3]).unwrap(),
        );
        let TransferPayload::Responsibilities(u) =
            perturb(&r, PerturbKind::Identity, &mut rng).unwrap()
        else {
            unreachable!()
        };
        assert!(u.weights.iter().all(|&v| (v - 0.25).abs() < 1e-12));

        // only the source entries are flattened, keeping their total
        let w = random_simplex(6, 5);
        let r = TransferPayload::Responsibilities(
            ResponsibilityPayload::new(w.clone(), vec![1, 3]).unwrap(),
        );
        let TransferPayload::Responsibilities(u) =
            perturb(&r, PerturbKind::Identity, &mut rng).unwrap()
        else {
            unreachable!()
        };
        assert_eq!(
            (u.weights[0], u.weights[2], u.weights[4]),
            (w[0], w[2], w[4])
        );
        assert!((u.weights[1] - u.weights[3]).abs() < 1e-15);
        assert!((u.weights[1] + u.weights[3] - w[1] - w[3]).abs() < 1e-12);
    }

    #[test]
    fn blur_spreads_one_hot_row() {
        let n = 256;
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            a[[i, i]] = 1.0;
        }
        let att = TransferPayload::Attention(AttentionRecord::new(a, (16, 16)).unwrap());
        let out = perturb(
            &att,
            PerturbKind::blur(5.0).unwrap(),
            &mut SeededRng::new(0),
        )
        .unwrap();
        let TransferPayload::Attention(b) = &out else {
            unreachable!()
        };
        for row in b.weights().rows() {
            assert!(row.fold(0.0f64, |m, &v| m.max(v)) < 1.0);
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_on_zero_row_degenerates_to_uniform() {
        let mut v = vec![0.0; 5];
        renormalize(&mut v);
        assert!(v.iter().all(|&x| x == 0.2));
    }

    #[test]
    fn packet_capture() {
        let mut packet = TransferPacket::new(TransferTag::Layout);
        let p = TransferPayload::Responsibilities(
            ResponsibilityPayload::new(vec![1.0], vec![0]).unwrap(),
        );
        packet.capture(3, p.clone()).unwrap();
        packet.capture(2, p.clone()).unwrap();
        assert!(packet.capture(3, p).is_err());
        assert_eq!(packet.len(), 2);
        assert_eq!(packet.timesteps().collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn rejects_malformed_payloads() {
        assert!(ResponsibilityPayload::new(vec![0.5, 0.6], vec![]).is_err());
        assert!(ResponsibilityPayload::new(vec![1.0], vec![3]).is_err());
        assert!(AttentionRecord::new(Array2::zeros((4, 4)), (2, 2)).is_err());
        assert!(AttentionRecord::new(Array2::eye(3), (2, 2)).is_err());
    }

    fn kinds() -> impl Strategy<Value = PerturbKind> {
        prop_oneof![
            (0.3f64..20.0).prop_map(|s| PerturbKind::Blur { sigma: s }),
            (0.01f64..1.0).prop_map(|s| PerturbKind::Noise { scale: s }),
            Just(PerturbKind::Identity),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn perturb_preserves_normalization(seed in 0u64..10_000, kind in kinds(), n in 2usize..40) {
            let mut rng = SeededRng::new(seed);
            let att = TransferPayload::Attention(random_attention(seed, 4, 5));
            prop_assert!(rows_normalized(&perturb(&att, kind, &mut rng).unwrap()));
            let r = TransferPayload::Responsibilities(ResponsibilityPayload::new(random_simplex(seed, n), vec![0]).unwrap());
            prop_assert!(rows_normalized(&perturb(&r, kind, &mut rng).unwrap()));
        }

        #[test]
        fn blur_contracts_toward_uniform(seed in 0u64..10_000, sigma in 0.5f64..20.0) {
            let att = random_attention(seed, 5, 5);
            let out = perturb(&TransferPayload::Attention(att.clone()), PerturbKind::Blur { sigma }, &mut SeededRng::new(0)).unwrap();
            let TransferPayload::Attention(b) = out else { unreachable!() };
            for (before, after) in att.weights().rows().into_iter().zip(b.weights().rows()) {
                let m0 = before.fold(0.0f64, |m, &v| m.max(v));
                let m1 = after.fold(0.0f64, |m, &v| m.max(v));
                prop_assert!(m1 <= m0 + 1e-12);
            }
        }

        #[test]
        fn blur_fixes_uniform(sigma in 0.3f64..100.0, n in 2usize..50) {
            let u = vec![1.0 / n as f64; n];
            let out = perturb_vector(&u, PerturbKind::Blur { sigma }, &mut SeededRng::new(0)).unwrap();
            for v in out {
                prop_assert!((v - 1.0 / n as f64).abs() < 1e-9);
            }
            let ua = Array2::from_elem((16, 16), 1.0 / 16.0);
            let att = AttentionRecord::new(ua.clone(), (4, 4)).unwrap();
            let TransferPayload::Attention(b) = perturb(&TransferPayload::Attention(att), PerturbKind::Blur { sigma }, &mut SeededRng::new(0)).unwrap() else { unreachable!() };
            for (x, y) in b.weights().iter().zip(ua.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn should_inject_is_monotone(tau in 0.0f64..=1.0, steps in 2usize..200) {
            let p = InjectionPolicy::new(tau).unwrap();
            let mut seen = false;
            for t in 0..=steps {
                let now = should_inject(t, steps, p);
                prop_assert!(!seen || now);
                seen |= now;
            }
        }
    }
}
