//! Exactly solvable linear case `b(x, y) = y`, `f(x, y) = -y`, `Y_0 = 0`,
//! for which the averaged equation is pure noise and
//! `X^eps_t - Xbar_t = Z^eps_t = int_0^t Y^eps_s ds`
//! is symmetric stable with scale
//! `sigma(eps, t) = eps^(1 - 1/alpha) [int_0^t (1 - e^(-r/eps))^alpha dr]^(1/alpha)`.

use serde::Serialize;

use crate::engine::{check_finite, map_paths, EnsembleStat, Path, TimeGrid};
use crate::error::{check_alpha, check_positive, Error, Result};
use crate::io::CsvTable;
use crate::rates::{fit_loglog, CurvePoint, RateFit};
use crate::rng::{tag, RngStream};
use crate::stable::cms_symmetric;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleParams {
    pub alpha: f64,
    pub eps: f64,
    pub t: f64,
    pub p: f64,
}

impl OracleParams {
    pub fn new(alpha: f64, eps: f64, t: f64, p: f64) -> Result<Self> {
        check_alpha(alpha)?;
        check_positive("eps", eps)?;
        check_positive("t", t)?;
        if !(p > 0.0 && p < alpha) {
            return Err(Error::domain("p", format!("{p} outside (0, {alpha})")));
        }
        Ok(Self { alpha, eps, t, p })
    }
}

/// Adaptive Simpson quadrature to relative tolerance `rel_tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn step<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    // Coarse pass fixes the absolute tolerance from the integral's size.
    let scale = whole.abs().max(f64::MIN_POSITIVE);
    step(&f, a, b, fa, fm, fb, whole, rel_tol * scale, 50)
}

/// `int_0^t (1 - e^(-r/eps))^alpha dr`.
pub fn memory_integral(alpha: f64, eps: f64, t: f64) -> f64 {
    adaptive_simpson(|r| (-(-r / eps).exp_m1()).powf(alpha), 0.0, t, 1e-10)
}

pub fn sigma_scale(params: &OracleParams) -> f64 {
    let OracleParams { alpha, eps, t, .. } = *params;
    eps.powf(1.0 - 1.0 / alpha) * memory_integral(alpha, eps, t).powf(1.0 / alpha)
}

/// Scale of the one-step noise of the exact OU recursion with step `h`.
pub fn ou_step_scale(alpha: f64, eps: f64, h: f64) -> f64 {
    (-(-alpha * h / eps).exp_m1() / alpha).powf(1.0 / alpha)
}

/// Exact-in-law recursion `Y_{k+1} = e^(-h/eps) Y_k + xi_k` for
/// `Y^eps_t = eps^(-1/alpha) int_0^t e^(-(t-s)/eps) dL_s`, from `Y_0 = 0`.
pub fn exact_ou_path(alpha: f64, eps: f64, grid: &TimeGrid, rng: RngStream) -> Result<Path> {
    check_alpha(alpha)?;
    check_positive("eps", eps)?;
    let h = grid.step();
    let decay = (-h / eps).exp();
    let scale = ou_step_scale(alpha, eps, h);
    let mut r = rng.child(tag::FAST, 0).rng();
    let mut states = Vec::with_capacity(grid.n_steps() + 1);
    let mut y = 0.0;
    states.push(y);
    for k in 0..grid.n_steps() {
        y = decay * y + scale * cms_symmetric(alpha, &mut r);
        check_finite(&[y], k + 1)?;
        states.push(y);
    }
    Path::from_states(*grid, 1, states)
}

/// `Z^eps_t` by the trapezoid rule over an exact OU path with `steps_per_eps`
/// steps per unit of `eps`.
fn trapezoid_area(alpha: f64, eps: f64, t: f64, steps_per_eps: usize, rng: RngStream) -> Result<f64> {
    let n = ((t / eps) * steps_per_eps as f64).round().max(1.0) as usize;
    let h = t / n as f64;
    let decay = (-h / eps).exp();
    let scale = ou_step_scale(alpha, eps, h);
    let mut r = rng.child(tag::FAST, 0).rng();
    let (mut y, mut area) = (0.0f64, 0.0f64);
    for k in 0..n {
        let next = decay * y + scale * cms_symmetric(alpha, &mut r);
        area += 0.5 * h * (y + next);
        y = next;
        check_finite(&[y], k + 1)?;
    }
    Ok(area)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub eps: f64,
    pub sigma: f64,
    /// `E|Z^eps_t|^p`.
    pub moment: EnsembleStat,
    /// `E|Z^eps_t|^p / sigma^p`, an estimate of `C_{alpha,p}`.
    pub ratio: f64,
    pub ratio_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub rows: Vec<OracleRow>,
    /// `E|S|^p` over standard symmetric stable draws.
    pub direct_constant: EnsembleStat,
    /// Fit of `ln E|Z|^p` against `ln eps` over `eps <= t / 8`.
    pub fit: Option<RateFit>,
}

impl OracleReport {
    /// Columns `eps`, `ratio`, `stderr`, `sigma`, `moment`.
    pub fn to_table(&self) -> CsvTable {
        CsvTable {
            header: ["eps", "ratio", "stderr", "sigma", "moment"].map(String::from).to_vec(),
            rows: self
                .rows
                .iter()
                .map(|r| vec![r.eps, r.ratio, r.ratio_stderr, r.sigma, r.moment.mean])
                .collect(),
        }
    }

    /// `max / min` of the ratios, and the largest relative standard error.
    pub fn ratio_spread(&self) -> (f64, f64) {
        let max = self.rows.iter().map(|r| r.ratio).fold(f64::MIN, f64::max);
        let min = self.rows.iter().map(|r| r.ratio).fold(f64::MAX, f64::min);
        let rel = self
            .rows
            .iter()
            .map(|r| r.ratio_stderr / r.ratio)
            .fold(0.0, f64::max);
        (max / min, rel)
    }
}

#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub alpha: f64,
    pub p: f64,
    pub t: f64,
    pub eps_list: Vec<f64>,
    pub n_paths: usize,
    /// Steps per unit of `eps`; at least 20.
    pub steps_per_eps: usize,
    pub n_bootstrap: usize,
}

pub fn oracle_moment_check(check: &OracleCheck, rng: RngStream) -> Result<OracleReport> {
    let OracleCheck { alpha, p, t, .. } = *check;
    check_alpha(alpha)?;
    if !(1.0..alpha).contains(&p) {
        return Err(Error::domain("p", format!("{p} outside [1, {alpha})")));
    }
    if check.steps_per_eps < 20 {
        return Err(Error::Stiffness {
            h: 1.0 / check.steps_per_eps as f64,
            limit: 1.0 / 20.0,
        });
    }
    if check.n_paths < 2 {
        return Err(Error::domain("n_paths", "need at least two paths"));
    }
    let mut rows = Vec::with_capacity(check.eps_list.len());
    for (j, &eps) in check.eps_list.iter().enumerate() {
        let params = OracleParams::new(alpha, eps, t, p)?;
        let sigma = sigma_scale(&params);
        let values = map_paths(check.n_paths, rng.child(tag::EXPERIMENT, j as u64), |_, st| {
            Ok(trapezoid_area(alpha, eps, t, check.steps_per_eps, st)?.abs().powf(p))
        })?;
        let moment = EnsembleStat::from_samples(&values);
        let sp = sigma.powf(p);
        rows.push(OracleRow {
            eps,
            sigma,
            moment,
            ratio: moment.mean / sp,
            ratio_stderr: moment.stderr / sp,
        });
    }
    let direct = map_paths(check.n_paths, rng.child(tag::INNER, 0), |_, st| {
        Ok(cms_symmetric(alpha, &mut st.rng()).abs().powf(p))
    })?;
    let points: Vec<CurvePoint> = rows
        .iter()
        .filter(|r| r.eps <= t / 8.0 * (1.0 + 1e-12))
        .map(|r| CurvePoint {
            eps: r.eps,
            error: r.moment.mean,
            stderr: r.moment.stderr,
            n_paths: r.moment.n_paths,
            h: r.eps / check.steps_per_eps as f64,
            excluded: false,
        })
        .collect();
    let fit = if points.len() >= 4 {
        Some(fit_loglog(&points, None, check.n_bootstrap, rng.child(tag::BOOTSTRAP, 0))?)
    } else {
        None
    };
    Ok(OracleReport {
        rows,
        direct_constant: EnsembleStat::from_samples(&direct),
        fit,
    })
}
