//! Symmetric and isotropic alpha-stable increments.
//!
//! Scale convention: an increment over time `dt` has characteristic
//! function `h -> exp(-dt |h|^alpha)`, in every dimension.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp1, Open01, StandardNormal};

use crate::error::{check_alpha, check_positive, Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StableSpec {
    alpha: f64,
    dim: usize,
}

impl StableSpec {
    pub fn new(alpha: f64, dim: usize) -> Result<Self> {
        check_alpha(alpha)?;
        if dim == 0 {
            return Err(Error::domain("dim", "must be at least 1"));
        }
        Ok(Self { alpha, dim })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Multiplier turning a unit-time increment into one over `dt`.
    pub fn time_scale(&self, dt: f64) -> f64 {
        dt.powf(1.0 / self.alpha)
    }

    /// Writes one increment over `dt` into `out` (length `dim`).
    #[inline]
    pub fn fill<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let scale = self.time_scale(dt);
        if self.dim == 1 {
            out[0] = scale * cms_symmetric(self.alpha, rng);
        } else {
            let s = positive_stable(self.alpha / 2.0, rng);
            let radial = scale * (2.0 * s).sqrt();
            for v in out.iter_mut() {
                let g: f64 = StandardNormal.sample(rng);
                *v = radial * g;
            }
        }
    }
}

/// Chambers-Mallows-Stuck draw of a standard symmetric stable variable
/// (characteristic function `exp(-|h|^alpha)`). No domain check.
#[inline]
pub(crate) fn cms_symmetric<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let u: f64 = Open01.sample(rng);
    let w: f64 = Exp1.sample(rng);
    let v = PI * (u - 0.5);
    let av = alpha * v;
    av.sin() / v.cos().powf(1.0 / alpha) * ((v - av).cos() / w).powf((1.0 - alpha) / alpha)
}

/// Kanter's draw of a positive stable variable with Laplace transform
/// `exp(-lambda^a)`, `0 < a < 1`.
#[inline]
pub(crate) fn positive_stable<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    let u: f64 = Open01.sample(rng);
    let w: f64 = Exp1.sample(rng);
    let v = PI * u;
    let num = (a * v).sin() / v.sin().powf(1.0 / a);
    num * (((1.0 - a) * v).sin() / w).powf((1.0 - a) / a)
}

/// One standard symmetric alpha-stable draw.
pub fn sample_sym_stable_1d<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(cms_symmetric(alpha, rng))
}

/// Increment over `dt` of the `alpha/2`-stable subordinator: Laplace
/// transform `lambda -> exp(-dt lambda^(alpha/2))`. Strictly positive.
pub fn sample_subordinator_increment<R: Rng + ?Sized>(
    alpha: f64,
    dt: f64,
    rng: &mut R,
) -> Result<f64> {
    check_alpha(alpha)?;
    check_positive("dt", dt)?;
    let a = alpha / 2.0;
    Ok(dt.powf(1.0 / a) * positive_stable(a, rng))
}

/// Isotropic increment over `dt`, built as `G sqrt(2 S)` with `S` a
/// subordinator increment (the `dim == 1` case uses the direct transform).
pub fn sample_isotropic_increment<R: Rng + ?Sized>(
    spec: &StableSpec,
    dt: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_positive("dt", dt)?;
    let mut out = vec![0.0; spec.dim];
    spec.fill(dt, rng, &mut out);
    Ok(out)
}

/// Same law as [`sample_isotropic_increment`] but always through
/// Gaussian subordination, whatever the dimension.
pub fn sample_subordinated<R: Rng + ?Sized>(
    spec: &StableSpec,
    dt: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let s = sample_subordinator_increment(spec.alpha, dt, rng)?;
    let radial = (2.0 * s).sqrt();
    Ok((0..spec.dim)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            radial * g
        })
        .collect())
}

/// `n` i.i.d. increments on a uniform grid, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseIncrements {
    dim: usize,
    h: f64,
    data: Vec<f64>,
}

impl NoiseIncrements {
    pub fn from_raw(dim: usize, h: f64, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Dimension {
                expected: dim,
                got: data.len(),
            });
        }
        Ok(Self { dim, h, data })
    }

    pub fn zeros(dim: usize, h: f64, n: usize) -> Self {
        Self {
            dim,
            h,
            data: vec![0.0; n * dim],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    #[inline]
    pub fn get(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }
}

pub fn increments_on_grid(
    spec: &StableSpec,
    n: usize,
    h: f64,
    stream: RngStream,
) -> Result<NoiseIncrements> {
    if n == 0 {
        return Err(Error::domain("n", "grid needs at least one step"));
    }
    check_positive("h", h)?;
    let mut rng = stream.rng();
    let mut data = vec![0.0; n * spec.dim];
    for chunk in data.chunks_exact_mut(spec.dim) {
        spec.fill(h, &mut rng, chunk);
    }
    Ok(NoiseIncrements {
        dim: spec.dim,
        h,
        data,
    })
}

/// Closed form `E cos(<u, X>) = exp(-dt |u|^alpha)` for a unit-convention
/// increment over `dt`.
pub fn characteristic_function(alpha: f64, dt: f64, freq_norm: f64) -> f64 {
    (-dt * freq_norm.abs().powf(alpha)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_two_sample, ks_critical, mean_stderr, hill_estimator};

    fn draws(alpha: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = RngStream::new(seed).rng();
        (0..n).map(|_| cms_symmetric(alpha, &mut rng)).collect()
    }

    #[test]
    fn rejects_bad_alpha() {
        let mut rng = RngStream::new(0).rng();
        assert!(sample_sym_stable_1d(2.0, &mut rng).is_err());
        assert!(sample_sym_stable_1d(1.0, &mut rng).is_err());
        assert!(sample_sym_stable_1d(0.5, &mut rng).is_err());
        assert!(StableSpec::new(1.5, 0).is_err());
        assert!(sample_subordinator_increment(1.5, 0.0, &mut rng).is_err());
        assert!(sample_subordinator_increment(1.5, -1.0, &mut rng).is_err());
    }

    #[test]
    fn median_and_characteristic_function() {
        let mut x = draws(1.5, 1_000_000, 1);
        let cos: Vec<f64> = x.iter().map(|v| v.cos()).collect();
        let (m, se) = mean_stderr(&cos);
        assert!((m - (-1.0f64).exp()).abs() < 3.0 * se, "E cos = {m} +- {se}");
        x.sort_by(f64::total_cmp);
        let med = x[x.len() / 2];
        assert!(med.abs() < 0.01, "median {med}");
    }

    #[test]
    fn hill_tail_index() {
        let x = draws(1.5, 1_000_000, 2);
        let a = hill_estimator(&x, 10_000).unwrap();
        assert!((a - 1.5).abs() < 0.1, "hill {a}");
    }

    #[test]
    fn subordinator_laplace_positivity_and_scaling() {
        let mut rng = RngStream::new(3).rng();
        let n = 1_000_000;
        let s1: Vec<f64> = (0..n)
            .map(|_| sample_subordinator_increment(1.5, 1.0, &mut rng).unwrap())
            .collect();
        assert!(s1.iter().all(|&s| s > 0.0));
        let lt: Vec<f64> = s1.iter().map(|s| (-s).exp()).collect();
        let (m, se) = mean_stderr(&lt);
        assert!((m - (-1.0f64).exp()).abs() < 3.0 * se, "{m} +- {se}");

        let k = 100_000;
        let s2: Vec<f64> = (0..k)
            .map(|_| sample_subordinator_increment(1.5, 2.0, &mut rng).unwrap())
            .collect();
        let c = 2.0f64.powf(2.0 / 1.5);
        let scaled: Vec<f64> = s1[..k].iter().map(|s| c * s).collect();
        let d = ks_two_sample(&s2, &scaled);
        assert!(d < ks_critical(k, k, 0.01), "ks {d}");
    }

    #[test]
    fn one_dim_constructions_agree() {
        let spec = StableSpec::new(1.5, 1).unwrap();
        let mut rng = RngStream::new(4).rng();
        let n = 100_000;
        let a: Vec<f64> = (0..n)
            .map(|_| sample_subordinated(&spec, 1.0, &mut rng).unwrap()[0])
            .collect();
        let b = draws(1.5, n, 5);
        assert!(ks_two_sample(&a, &b) < ks_critical(n, n, 0.01));
    }

    #[test]
    fn isotropy_in_two_dimensions() {
        let spec = StableSpec::new(1.5, 2).unwrap();
        let mut rng = RngStream::new(6).rng();
        let n = 1_000_000;
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| sample_isotropic_increment(&spec, 1.0, &mut rng).unwrap())
            .collect();
        let target = (-1.0f64).exp();
        for theta in [0.0, 0.4, 1.1, 2.5] {
            let (c, s) = (f64::cos(theta), f64::sin(theta));
            let v: Vec<f64> = xs.iter().map(|x| (c * x[0] + s * x[1]).cos()).collect();
            let (m, se) = mean_stderr(&v);
            assert!((m - target).abs() < 3.0 * se, "theta {theta}: {m} +- {se}");
        }
    }

    #[test]
    fn self_similarity_of_first_moment() {
        let spec = StableSpec::new(1.5, 2).unwrap();
        let n = 200_000;
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let a = increments_on_grid(&spec, n, 0.25, RngStream::new(7)).unwrap();
        let b = increments_on_grid(&spec, n, 1.0, RngStream::new(8)).unwrap();
        let ma: Vec<f64> = a.iter().map(norm).collect();
        let mb: Vec<f64> = b.iter().map(|x| 0.25f64.powf(1.0 / 1.5) * norm(x)).collect();
        let (m1, s1) = mean_stderr(&ma);
        let (m2, s2) = mean_stderr(&mb);
        assert!((m1 - m2).abs() < 3.0 * (s1 * s1 + s2 * s2).sqrt(), "{m1} vs {m2}");
    }

    #[test]
    fn grid_degenerate_and_deterministic() {
        let spec = StableSpec::new(1.5, 3).unwrap();
        assert!(increments_on_grid(&spec, 0, 0.1, RngStream::new(1)).is_err());
        let one = increments_on_grid(&spec, 1, 0.1, RngStream::new(1)).unwrap();
        assert_eq!(one.len(), 1);
        let a = increments_on_grid(&spec, 500, 0.1, RngStream::with_stream(9, 4)).unwrap();
        let b = increments_on_grid(&spec, 500, 0.1, RngStream::with_stream(9, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn consecutive_signs_uncorrelated() {
        let spec = StableSpec::new(1.5, 1).unwrap();
        let n = 1_000_000;
        let inc = increments_on_grid(&spec, n, 0.01, RngStream::new(10)).unwrap();
        let s: Vec<f64> = inc.as_slice().iter().map(|v| v.signum()).collect();
        let prod: Vec<f64> = s.windows(2).map(|w| w[0] * w[1]).collect();
        let (m, se) = mean_stderr(&prod);
        assert!(m.abs() < 3.0 * se, "{m} +- {se}");
    }

    #[test]
    fn symmetry_and_step_scaling() {
        let spec = StableSpec::new(1.5, 1).unwrap();
        let n = 100_000;
        let a = increments_on_grid(&spec, n, 3.0, RngStream::new(11)).unwrap();
        let b = increments_on_grid(&spec, n, 1.0, RngStream::new(12)).unwrap();
        let c = 3.0f64.powf(1.0 / 1.5);
        let bs: Vec<f64> = b.as_slice().iter().map(|v| c * v).collect();
        let crit = ks_critical(n, n, 0.01);
        assert!(ks_two_sample(a.as_slice(), &bs) < crit);
        let neg: Vec<f64> = b.as_slice().iter().map(|v| -v).collect();
        assert!(ks_two_sample(b.as_slice(), &neg) < crit);
    }

    #[test]
    fn heavy_tail_moments() {
        // E|X| stabilises, E X^2 keeps growing with the sample size.
        let x = draws(1.5, 1_000_000, 13);
        let abs_mean = |k: usize| x[..k].iter().map(|v| v.abs()).sum::<f64>() / k as f64;
        let m1 = abs_mean(250_000);
        let m2 = abs_mean(1_000_000);
        assert!((m1 / m2 - 1.0).abs() < 0.05, "{m1} {m2}");
        let running_max_sq: Vec<f64> = [1_000, 10_000, 100_000, 1_000_000]
            .iter()
            .map(|&k| x[..k].iter().map(|v| v * v).sum::<f64>() / k as f64)
            .collect();
        assert!(running_max_sq[3] > running_max_sq[0]);
    }
}
