//! Strong and weak error curves `eps -> error(eps)` between the slow
//! component and the averaged equation, and log-log rate fits with
//! bootstrap confidence intervals.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::averaging::{simulate_averaged, BbarProvider};
use crate::engine::{distance, map_paths, EnsembleStat, TimeGrid};
use crate::error::{check_positive, Error, Result};
use crate::io::CsvTable;
use crate::multiscale::{simulate_slow_fast, MultiscaleRun, SlowFastSystem, MAX_FAST_STEP_RATIO};
use crate::rng::{tag, RngStream};
use crate::stats::{ols, percentile_sorted};

/// Scalar test function of the slow state for weak errors.
pub type TestFunction = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Points whose standard error exceeds this fraction of the strong error
/// are left out of the fit.
pub const STRONG_MAX_REL_STDERR: f64 = 0.2;

/// Weak-error points below this many standard errors are left out of the fit.
pub const WEAK_MIN_SIGNAL: f64 = 3.0;

pub struct RateExperiment {
    pub system: SlowFastSystem,
    pub bbar: BbarProvider,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    /// Strictly decreasing.
    pub eps_list: Vec<f64>,
    /// Strong exponent `p`, in `[1, alpha)`.
    pub p: f64,
    /// Horizon `T` for strong errors, evaluation time `t` for weak errors.
    pub horizon: f64,
    pub n_paths: usize,
    /// Fast steps per unit of `eps`; `h = eps / steps_per_eps`.
    pub steps_per_eps: usize,
    pub test_function: Option<TestFunction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub eps: f64,
    pub error: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub h: f64,
    pub excluded: bool,
}

/// How a point's error is formed from its per-path samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Reduction {
    /// Strong: `mean(samples)`.
    Mean,
    /// Weak: `|mean(samples)|` of paired differences.
    AbsMean,
}

impl Reduction {
    fn apply(self, mean: f64) -> f64 {
        match self {
            Reduction::Mean => mean,
            Reduction::AbsMean => mean.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateCurve {
    pub points: Vec<CurvePoint>,
    #[serde(skip)]
    pub samples: Vec<Vec<f64>>,
    pub reduction: Reduction,
    pub warnings: Vec<String>,
}

impl RateCurve {
    pub fn to_table(&self) -> CsvTable {
        let header = ["eps", "error", "stderr", "n_paths", "h"].map(String::from).to_vec();
        let rows = self
            .points
            .iter()
            .map(|p| vec![p.eps, p.error, p.stderr, p.n_paths as f64, p.h])
            .collect();
        CsvTable { header, rows }
    }

    pub fn fit(&self, n_bootstrap: usize, rng: RngStream) -> Result<RateFit> {
        fit_loglog(&self.points, Some((&self.samples, self.reduction)), n_bootstrap, rng)
    }
}

impl RateExperiment {
    fn validate(&self, need_p: bool) -> Result<()> {
        let alpha = self.system.alpha();
        if need_p && !(self.p >= 1.0 && self.p < alpha) {
            return Err(Error::domain("p", format!("{} outside [1, {alpha})", self.p)));
        }
        if self.eps_list.len() < 4 {
            return Err(Error::domain("eps_list", "need at least four values"));
        }
        for w in self.eps_list.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::domain("eps_list", "must be strictly decreasing"));
            }
        }
        for &eps in &self.eps_list {
            check_positive("eps", eps)?;
        }
        check_positive("horizon", self.horizon)?;
        if self.n_paths < 2 {
            return Err(Error::domain("n_paths", "need at least two paths"));
        }
        if (self.steps_per_eps as f64) < 1.0 / MAX_FAST_STEP_RATIO {
            return Err(Error::Stiffness {
                h: 1.0 / self.steps_per_eps as f64,
                limit: MAX_FAST_STEP_RATIO,
            });
        }
        Ok(())
    }

    fn grid(&self, eps: f64) -> Result<TimeGrid> {
        let n = (self.horizon / eps * self.steps_per_eps as f64).round().max(1.0) as usize;
        TimeGrid::new(self.horizon, n)
    }

    /// Runs both equations on stream `st` with shared slow noise.
    fn paired_paths(&self, eps: f64, st: RngStream) -> Result<(crate::Path, crate::Path)> {
        let run = MultiscaleRun::new(
            self.system.clone(),
            eps,
            self.grid(eps)?,
            self.x0.clone(),
            self.y0.clone(),
        )?;
        let slow = run.slow_increments(st)?;
        let (x, _) = simulate_slow_fast(&run, st, Some(&slow))?;
        let xbar = simulate_averaged(&self.bbar, run.grid(), &self.x0, &slow)?;
        Ok((x, xbar))
    }

    fn finish(&self, samples: Vec<Vec<f64>>, reduction: Reduction, mut warnings: Vec<String>) -> RateCurve {
        let mut points = Vec::with_capacity(samples.len());
        for (j, s) in samples.iter().enumerate() {
            let eps = self.eps_list[j];
            let stat = EnsembleStat::from_samples(s);
            let error = reduction.apply(stat.mean);
            let excluded = match reduction {
                Reduction::Mean => !(stat.stderr <= STRONG_MAX_REL_STDERR * error),
                Reduction::AbsMean => !(error > WEAK_MIN_SIGNAL * stat.stderr),
            };
            if excluded {
                warnings.push(format!(
                    "eps = {eps}: error {error:.4e} with stderr {:.4e} left out of the fit",
                    stat.stderr
                ));
            }
            points.push(CurvePoint {
                eps,
                error,
                stderr: stat.stderr,
                n_paths: stat.n_paths,
                h: eps / self.steps_per_eps as f64,
                excluded,
            });
        }
        let bbar_err = self.bbar.stderr();
        let min_err = points.iter().map(|p| p.error).fold(f64::INFINITY, f64::min);
        if bbar_err > 0.0 && 10.0 * bbar_err > min_err {
            warnings.push(format!(
                "averaged drift stderr {bbar_err:.3e} is not ten times below the smallest error {min_err:.3e}"
            ));
        }
        RateCurve {
            points,
            samples,
            reduction,
            warnings,
        }
    }
}

/// `E sup_{t <= T} |X^eps_t - Xbar_t|^p` for each `eps`, with both
/// equations driven by the same slow noise. The supremum runs over the
/// nodes of the coarsest grid, which every finer grid contains when the
/// `eps` ratios are integers; otherwise each grid uses its own nodes.
pub fn strong_error_curve(exp: &RateExperiment, rng: RngStream) -> Result<RateCurve> {
    exp.validate(true)?;
    let coarse = exp.grid(exp.eps_list[0])?;
    let mut warnings = Vec::new();
    let mut strides = Vec::with_capacity(exp.eps_list.len());
    for &eps in &exp.eps_list {
        let n = exp.grid(eps)?.n_steps();
        if n % coarse.n_steps() == 0 {
            strides.push(n / coarse.n_steps());
        } else {
            warnings.push(format!("eps = {eps}: grid not nested in the coarsest grid, using its own nodes"));
            strides.push(1);
        }
    }
    let d = exp.x0.len();
    let mut samples = Vec::with_capacity(exp.eps_list.len());
    for (j, &eps) in exp.eps_list.iter().enumerate() {
        let stride = strides[j];
        let s = map_paths(exp.n_paths, rng.child(tag::EXPERIMENT, j as u64), |_, st| {
            let (x, xbar) = exp.paired_paths(eps, st)?;
            let (xs, xb) = (x.states(), xbar.states());
            let sup = (0..x.len())
                .step_by(stride)
                .map(|k| distance(&xs[k * d..(k + 1) * d], &xb[k * d..(k + 1) * d]))
                .fold(0.0, f64::max);
            Ok(sup.powf(exp.p))
        })?;
        samples.push(s);
    }
    Ok(exp.finish(samples, Reduction::Mean, warnings))
}

/// `E |X^eps_T - Xbar_T|^p` at the horizon only, for each `eps`.
pub fn strong_endpoint_curve(exp: &RateExperiment, rng: RngStream) -> Result<RateCurve> {
    exp.validate(true)?;
    let mut samples = Vec::with_capacity(exp.eps_list.len());
    for (j, &eps) in exp.eps_list.iter().enumerate() {
        let s = map_paths(exp.n_paths, rng.child(tag::EXPERIMENT, j as u64), |_, st| {
            let (x, xbar) = exp.paired_paths(eps, st)?;
            Ok(distance(x.last(), xbar.last()).powf(exp.p))
        })?;
        samples.push(s);
    }
    Ok(exp.finish(samples, Reduction::Mean, Vec::new()))
}

/// `|E phi(X^eps_t) - E phi(Xbar_t)|` for each `eps`, estimated from the
/// paired differences `phi(X^eps_t) - phi(Xbar_t)` on shared slow noise.
pub fn weak_error_curve(exp: &RateExperiment, rng: RngStream) -> Result<RateCurve> {
    exp.validate(false)?;
    let phi = exp
        .test_function
        .as_ref()
        .ok_or_else(|| Error::domain("test_function", "weak errors need a test function"))?;
    let mut samples = Vec::with_capacity(exp.eps_list.len());
    for (j, &eps) in exp.eps_list.iter().enumerate() {
        let s = map_paths(exp.n_paths, rng.child(tag::EXPERIMENT, j as u64), |_, st| {
            let (x, xbar) = exp.paired_paths(eps, st)?;
            Ok(phi(x.last()) - phi(xbar.last()))
        })?;
        samples.push(s);
    }
    Ok(exp.finish(samples, Reduction::AbsMean, Vec::new()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(into = "FitSummary")]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_points: usize,
    pub excluded_points: Vec<f64>,
}

/// Serialized form of [`RateFit`].
#[derive(Serialize)]
struct FitSummary {
    slope: f64,
    intercept: f64,
    r2: f64,
    ci: [f64; 2],
    n_points: usize,
    excluded_points: Vec<f64>,
}

impl From<RateFit> for FitSummary {
    fn from(f: RateFit) -> Self {
        Self {
            slope: f.slope,
            intercept: f.intercept,
            r2: f.r_squared,
            ci: [f.ci_low, f.ci_high],
            n_points: f.n_points,
            excluded_points: f.excluded_points,
        }
    }
}

/// Least-squares fit of `ln error` on `ln eps` over the non-excluded
/// points, with a 95% percentile bootstrap interval for the slope. Each
/// bootstrap replicate resamples the points and, when per-path samples
/// are supplied, the paths within each drawn point. With `n_bootstrap = 0`
/// the interval collapses to the slope.
pub fn fit_loglog(
    points: &[CurvePoint],
    samples: Option<(&[Vec<f64>], Reduction)>,
    n_bootstrap: usize,
    rng: RngStream,
) -> Result<RateFit> {
    let kept: Vec<usize> = (0..points.len()).filter(|&i| !points[i].excluded).collect();
    let excluded_points = points.iter().filter(|p| p.excluded).map(|p| p.eps).collect();
    if kept.len() < 4 {
        return Err(Error::DegenerateFit(format!(
            "{} usable points, need at least four",
            kept.len()
        )));
    }
    for &i in &kept {
        if !(points[i].error > 0.0 && points[i].error.is_finite()) {
            return Err(Error::DegenerateFit(format!(
                "non-positive error {} at eps = {}",
                points[i].error, points[i].eps
            )));
        }
    }
    let lx: Vec<f64> = kept.iter().map(|&i| points[i].eps.ln()).collect();
    let ly: Vec<f64> = kept.iter().map(|&i| points[i].error.ln()).collect();
    let line = ols(&lx, &ly)?;

    let mut slopes = Vec::with_capacity(n_bootstrap);
    let mut r = rng.rng();
    let m = kept.len();
    let (mut bx, mut by) = (vec![0.0; m], vec![0.0; m]);
    while slopes.len() < n_bootstrap {
        let picks: Vec<usize> = (0..m).map(|_| r.random_range(0..m)).collect();
        if picks.iter().all(|&q| lx[q] == lx[picks[0]]) {
            continue;
        }
        let mut ok = true;
        for (slot, &q) in picks.iter().enumerate() {
            bx[slot] = lx[q];
            by[slot] = match samples {
                Some((s, red)) => {
                    let s = &s[kept[q]];
                    let total: f64 = (0..s.len()).map(|_| s[r.random_range(0..s.len())]).sum();
                    let e = red.apply(total / s.len() as f64);
                    if e <= 0.0 {
                        ok = false;
                    }
                    e.ln()
                }
                None => ly[q],
            };
        }
        if ok {
            slopes.push(ols(&bx, &by)?.slope);
        }
    }
    let (ci_low, ci_high) = if slopes.is_empty() {
        (line.slope, line.slope)
    } else {
        slopes.sort_by(f64::total_cmp);
        // With a handful of points the percentile interval is too narrow;
        // widen it by the Student-t to normal quantile ratio on m - 2
        // degrees of freedom.
        let t = StudentsT::new(0.0, 1.0, (m - 2) as f64)
            .map_err(|e| Error::DegenerateFit(e.to_string()))?
            .inverse_cdf(0.975);
        let z = Normal::standard().inverse_cdf(0.975);
        let inflate = t / z;
        let lo = percentile_sorted(&slopes, 0.025);
        let hi = percentile_sorted(&slopes, 0.975);
        (
            (line.slope - inflate * (line.slope - lo)).min(line.slope),
            (line.slope + inflate * (hi - line.slope)).max(line.slope),
        )
    };
    Ok(RateFit {
        slope: line.slope,
        intercept: line.intercept,
        r_squared: line.r_squared,
        ci_low,
        ci_high,
        n_points: m,
        excluded_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn synthetic(eps: &[f64], c: f64, slope: f64) -> Vec<CurvePoint> {
        eps.iter()
            .map(|&e| CurvePoint {
                eps: e,
                error: c * e.powf(slope),
                stderr: 0.0,
                n_paths: 1,
                h: e / 50.0,
                excluded: false,
            })
            .collect()
    }

    fn eps_list() -> Vec<f64> {
        (2..=6).map(|k| 2f64.powi(-k)).collect()
    }

    #[test]
    fn exact_power_law_recovered() {
        let fit = fit_loglog(&synthetic(&eps_list(), 0.7, 0.5), None, 200, RngStream::new(1)).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-12);
        assert!((fit.intercept - 0.7f64.ln()).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!((fit.ci_high - fit.ci_low).abs() < 1e-9);
    }

    #[test]
    fn exact_linear_and_cube_root_laws() {
        let eps: Vec<f64> = (3..=8).map(|k| 2f64.powi(-k)).collect();
        let fit = fit_loglog(&synthetic(&eps, 1.0, 1.0), None, 1000, RngStream::new(7)).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12);
        assert!(fit.ci_high - fit.ci_low < 1e-6);
        let fit = fit_loglog(&synthetic(&eps, 3.0, 1.0 / 3.0), None, 1000, RngStream::new(8)).unwrap();
        assert!((fit.slope - 1.0 / 3.0).abs() < 1e-6);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn fit_json_schema() {
        let fit = fit_loglog(&synthetic(&eps_list(), 1.0, 0.5), None, 10, RngStream::new(9)).unwrap();
        let v = serde_json::to_value(&fit).unwrap();
        for key in ["slope", "intercept", "r2", "ci", "excluded_points"] {
            assert!(v.get(key).is_some(), "{key} missing in {v}");
        }
        assert_eq!(v["ci"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn excluded_points_ignored_and_reported() {
        let mut pts = synthetic(&eps_list(), 1.0, 1.0 / 3.0);
        pts[0].error = 50.0;
        pts[0].excluded = true;
        let fit = fit_loglog(&pts, None, 0, RngStream::new(2)).unwrap();
        assert!((fit.slope - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(fit.excluded_points, vec![0.25]);
        pts[1].excluded = true;
        assert!(matches!(fit_loglog(&pts, None, 0, RngStream::new(2)), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn zero_error_is_degenerate() {
        let mut pts = synthetic(&eps_list(), 1.0, 0.5);
        pts[2].error = 0.0;
        assert!(matches!(fit_loglog(&pts, None, 0, RngStream::new(3)), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn bootstrap_interval_covers_true_slope() {
        let eps = eps_list();
        let truth = 1.0 / 3.0;
        let mut covered = 0;
        let mut noise = RngStream::new(4).rng();
        for rep in 0..100 {
            let pts: Vec<CurvePoint> = synthetic(&eps, 1.0, truth)
                .into_iter()
                .map(|mut p| {
                    let z: f64 = StandardNormal.sample(&mut noise);
                    p.error *= 1.0 + 0.05 * z;
                    p
                })
                .collect();
            let fit = fit_loglog(&pts, None, 1000, RngStream::new(1000 + rep)).unwrap();
            if fit.ci_low <= truth && truth <= fit.ci_high {
                covered += 1;
            }
        }
        assert!(covered >= 90, "covered {covered} of 100");
    }

    #[test]
    fn path_bootstrap_widens_with_noise() {
        let eps = eps_list();
        let mut r = RngStream::new(5).rng();
        let make = |sd: f64, r: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
            eps.iter()
                .map(|&e| {
                    (0..2000)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(r);
                            e.powf(0.5) * (1.0 + sd * z)
                        })
                        .collect()
                })
                .collect()
        };
        let pts = synthetic(&eps, 1.0, 0.5);
        let quiet = make(0.1, &mut r);
        let loud = make(1.0, &mut r);
        let wq = fit_loglog(&pts, Some((&quiet, Reduction::Mean)), 300, RngStream::new(6)).unwrap();
        let wl = fit_loglog(&pts, Some((&loud, Reduction::Mean)), 300, RngStream::new(6)).unwrap();
        assert!(wl.ci_high - wl.ci_low > wq.ci_high - wq.ci_low);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn interval_brackets_slope(
            errs in proptest::collection::vec(0.01f64..10.0, 5),
            seed in 0u64..1000,
        ) {
            let pts: Vec<CurvePoint> = eps_list()
                .into_iter()
                .zip(errs)
                .map(|(e, err)| CurvePoint { eps: e, error: err, stderr: 0.0, n_paths: 1, h: e, excluded: false })
                .collect();
            let fit = fit_loglog(&pts, None, 100, RngStream::new(seed)).unwrap();
            prop_assert!(fit.ci_low <= fit.slope && fit.slope <= fit.ci_high);
            prop_assert!(fit.r_squared >= 0.0 && fit.r_squared <= 1.0);
        }
    }
}
