//! Dense real grids, Gaussian smoothing kernels and seeded randomness.
//!
//! Everything here works in `f64`. Vectors are represented as `1 × n` grids so
//! that latents of the analytic (vector) and learned (image) setups share a type.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, FgsError, Result};

/// Row-major `height × width` array of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(invalid(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("grid entry {i} is not finite")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// A `1 × n` grid.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(1, n, data)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Grid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(FgsError::ShapeMismatch {
                expected: self.shape(),
                got: other.shape(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `f(self, other)`.
    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Grid {
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn sub(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn dot(&self, other: &Grid) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Normalized, symmetric 1D kernel with `2·radius + 1` taps.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel1D {
    radius: usize,
    weights: Vec<f64>,
}

impl Kernel1D {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.len().is_multiple_of(2) {
            return Err(invalid("kernel must have an odd number of taps"));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(invalid("kernel weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!(
                "kernel weights sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            radius: weights.len() / 2,
            weights,
        })
    }

    /// The identity kernel of the given radius.
    pub fn delta(radius: usize) -> Self {
        let mut weights = vec![0.0; 2 * radius + 1];
        weights[radius] = 1.0;
        Self { radius, weights }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// True when convolving with this kernel is the identity map.
    pub fn is_delta(&self) -> bool {
        self.weights
            .iter()
            .enumerate()
            .all(|(i, &w)| if i == self.radius { w == 1.0 } else { w == 0.0 })
    }
}

/// Separable 2D kernel: the outer square of a [`Kernel1D`].
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    factor: Kernel1D,
}

impl Kernel2D {
    pub fn separable(factor: Kernel1D) -> Self {
        Self { factor }
    }

    pub fn radius(&self) -> usize {
        self.factor.radius
    }

    pub fn factor(&self) -> &Kernel1D {
        &self.factor
    }

    pub fn is_delta(&self) -> bool {
        self.factor.is_delta()
    }

    /// Full `(2r+1) × (2r+1)` weight matrix, row-major.
    pub fn weights(&self) -> Vec<f64> {
        let w = &self.factor.weights;
        w.iter()
            .flat_map(|a| w.iter().map(move |b| a * b))
            .collect()
    }
}

/// Sampled Gaussian `exp(-(i-r)²/(2σ²))`, normalized to unit mass.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Kernel1D> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    if radius == 0 {
        return Err(invalid("kernel radius must be at least 1"));
    }
    let r = radius as f64;
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - r;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.into_iter().map(|w| w / total).collect();
    Ok(Kernel1D { radius, weights })
}

/// `ceil(3σ)` clamped to `[1, limit - 1]`, where `limit` is the extent of the
/// axis being blurred.
pub fn default_radius(sigma: f64, limit: usize) -> usize {
    let wanted = (3.0 * sigma).ceil().max(1.0) as usize;
    wanted.min(limit.saturating_sub(1)).max(1)
}

/// Reflect index into `0..n` without repeating the edge sample (`d c b | a b c d | c b a`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut j = i;
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * (n - 1) - j;
    }
    j as usize
}

fn convolve_line(src: &[f64], stride: usize, n: usize, kernel: &Kernel1D, out: &mut [f64]) {
    let r = kernel.radius as isize;
    for (i, slot) in out.iter_mut().enumerate().take(n) {
        let mut acc = 0.0;
        for (k, &w) in kernel.weights.iter().enumerate() {
            let j = reflect(i as isize + k as isize - r, n);
            acc += w * src[j * stride];
        }
        *slot = acc;
    }
}

/// 1D convolution of a sequence with reflect padding.
pub fn convolve_1d(values: &[f64], kernel: &Kernel1D) -> Result<Vec<f64>> {
    if kernel.radius >= values.len() {
        return Err(invalid(format!(
            "kernel radius {} too large for length {}",
            kernel.radius,
            values.len()
        )));
    }
    let mut out = vec![0.0; values.len()];
    convolve_line(values, 1, values.len(), kernel, &mut out);
    Ok(out)
}

/// 2D convolution with reflect padding, applied separably (rows, then columns).
pub fn convolve(grid: &Grid, kernel: &Kernel2D) -> Result<Grid> {
    let (h, w) = grid.shape();
    if kernel.radius() >= h.min(w) {
        return Err(invalid(format!(
            "kernel radius {} too large for {h}x{w} grid",
            kernel.radius()
        )));
    }
    let k = kernel.factor();
    let mut rows = vec![0.0; h * w];
    for r in 0..h {
        convolve_line(
            &grid.data[r * w..(r + 1) * w],
            1,
            w,
            k,
            &mut rows[r * w..(r + 1) * w],
        );
    }
    let mut out = vec![0.0; h * w];
    let mut column = vec![0.0; h];
    for c in 0..w {
        convolve_line(&rows[c..], w, h, k, &mut column);
        for (r, v) in column.iter().enumerate() {
            out[r * w + c] = *v;
        }
    }
    Ok(Grid {
        height: h,
        width: w,
        data: out,
    })
}

/// Cosine similarity with an explicit flag for zero-norm inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either input had zero norm; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(FgsError::ShapeMismatch {
            expected: (1, a.len()),
            got: (1, b.len()),
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(Cosine {
        value: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Deterministic random source.
///
/// Backed by ChaCha8 (a counter-mode stream cipher): the key is derived from the
/// 64-bit seed, and independent substreams are selected with the 64-bit stream
/// nonce, so a `(seed, stream)` pair fixes the whole sequence on every platform.
/// Normal draws use the ziggurat sampler of `rand_distr::StandardNormal`.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream for e.g. one run of a sweep.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

/// `n` i.i.d. standard normal draws.
pub fn sample_standard_normal(rng: &mut SeededRng, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid("cannot draw zero samples"));
    }
    Ok((0..n).map(|_| rng.standard_normal()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn kernel_examples() {
        let k = gaussian_kernel(1.0, 1).unwrap();
        // (e^-0.5, 1, e^-0.5) / (1 + 2 e^-0.5)
        for (w, want) in k.weights().iter().zip([0.274069, 0.451863, 0.274069]) {
            assert_abs_diff_eq!(*w, want, epsilon = 1e-6);
        }
        let flat = gaussian_kernel(1e9, 1).unwrap();
        for w in flat.weights() {
            assert_abs_diff_eq!(*w, 1.0 / 3.0, epsilon = 1e-12);
        }
        let sharp = gaussian_kernel(1e-6, 1).unwrap();
        assert!(sharp.weights()[1] > 1.0 - 1e-9);
        assert!(sharp.is_delta());
    }

    #[test]
    fn kernel_rejects_bad_arguments() {
        assert!(gaussian_kernel(0.0, 1).is_err());
        assert!(gaussian_kernel(-1.0, 1).is_err());
        assert!(gaussian_kernel(1.0, 0).is_err());
        assert!(gaussian_kernel(f64::NAN, 2).is_err());
    }

    #[test]
    fn default_radius_caps_at_grid() {
        assert_eq!(default_radius(5.0, 16), 15);
        assert_eq!(default_radius(1.0, 16), 3);
        assert_eq!(default_radius(100.0, 90), 89);
        assert_eq!(default_radius(0.01, 16), 1);
    }

    #[test]
    fn convolve_examples() {
        let c = Grid::filled(5, 7, 0.37);
        let k = Kernel2D::separable(gaussian_kernel(1.3, 3).unwrap());
        let out = convolve(&c, &k).unwrap();
        for v in out.data() {
            assert_abs_diff_eq!(*v, 0.37, epsilon = 1e-12);
        }

        let mut rng = SeededRng::new(3);
        let g = Grid::new(4, 4, sample_standard_normal(&mut rng, 16).unwrap()).unwrap();
        let same = convolve(&g, &Kernel2D::separable(Kernel1D::delta(1))).unwrap();
        assert_eq!(same, g);

        let mut center = Grid::zeros(3, 3);
        center.set(1, 1, 1.0);
        let out = convolve(
            &center,
            &Kernel2D::separable(gaussian_kernel(1.0, 1).unwrap()),
        )
        .unwrap();
        assert_abs_diff_eq!(out.get(1, 1), 0.204180, epsilon = 1e-6);
    }

    #[test]
    fn convolve_rejects_oversized_kernel() {
        let g = Grid::zeros(3, 8);
        let k = Kernel2D::separable(gaussian_kernel(1.0, 3).unwrap());
        assert!(convolve(&g, &k).is_err());
        assert!(convolve_1d(&[1.0, 2.0, 3.0], &gaussian_kernel(1.0, 3).unwrap()).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(
            cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap().value,
            1.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            cosine_similarity(&[1.0, 2.0], &[-1.0, -2.0]).unwrap().value,
            -1.0,
            epsilon = 1e-15
        );
        assert_eq!(
            cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value,
            0.0
        );
        let d = cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.value, 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn normal_samples() {
        let a = sample_standard_normal(&mut SeededRng::new(9), 32).unwrap();
        let b = sample_standard_normal(&mut SeededRng::new(9), 32).unwrap();
        assert_eq!(a, b);
        assert!(sample_standard_normal(&mut SeededRng::new(9), 0).is_err());

        let n = 100_000;
        let x = sample_standard_normal(&mut SeededRng::new(42), n).unwrap();
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn streams_are_independent() {
        let a = sample_standard_normal(&mut SeededRng::with_stream(1, 0), 8).unwrap();
        let b = sample_standard_normal(&mut SeededRng::with_stream(1, 1), 8).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Grid::new(0, 2, vec![]).is_err());
        assert!(Grid::new(1, 2, vec![0.0, f64::INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn kernels_are_normalized_and_symmetric(sigma in 0.05f64..50.0, radius in 1usize..20) {
            let k = gaussian_kernel(sigma, radius).unwrap();
            let w = k.weights();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..w.len() {
                prop_assert_eq!(w[i], w[w.len() - 1 - i]);
            }
        }

        #[test]
        fn convolve_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0, sigma in 0.3f64..4.0) {
            let mut rng = SeededRng::new(seed);
            let x = Grid::new(6, 9, sample_standard_normal(&mut rng, 54).unwrap()).unwrap();
            let y = Grid::new(6, 9, sample_standard_normal(&mut rng, 54).unwrap()).unwrap();
            let k = Kernel2D::separable(gaussian_kernel(sigma, default_radius(sigma, 6)).unwrap());
            let lhs = convolve(&x.zip_map(&y, |p, q| a * p + b * q).unwrap(), &k).unwrap();
            let cx = convolve(&x, &k).unwrap();
            let cy = convolve(&y, &k).unwrap();
            let rhs = cx.zip_map(&cy, |p, q| a * p + b * q).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() < 1e-10);
            }
        }

        #[test]
        fn cosine_is_bounded(seed in 0u64..1000, n in 1usize..40) {
            let mut rng = SeededRng::new(seed);
            let a = sample_standard_normal(&mut rng, n).unwrap();
            let b = sample_standard_normal(&mut rng, n).unwrap();
            let self_sim = cosine_similarity(&a, &a).unwrap().value;
            prop_assert!((self_sim - 1.0).abs() < 1e-12);
            let c = cosine_similarity(&a, &b).unwrap().value;
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
