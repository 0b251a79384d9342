//! Corrector `Phi(x, y) = int_0^inf E[b(x, Y^{x,y}_t) - bbar(x)] dt`,
//! the solution of `-L_x Phi = b - bbar`, estimated by truncated time
//! integrals along frozen fast paths, plus probes of its growth,
//! regularity and of the Dynkin identity it satisfies.

use serde::Serialize;

use crate::averaging::{BbarProvider, FrozenSpec};
use crate::engine::{map_paths, norm, EnsembleStat};
use crate::error::{check_positive, Error, Result};
use crate::io::CsvTable;
use crate::multiscale::{SlowFastSystem, MAX_FAST_STEP_RATIO};
use crate::rng::{tag, RngStream};
use crate::stats::{mean_stderr, ols};

/// Slow system together with the averaged drift it is centred by.
pub struct PoissonProblem<'a> {
    pub system: &'a SlowFastSystem,
    pub bbar: &'a BbarProvider,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectorSettings {
    /// Truncation tolerance.
    pub tol: f64,
    pub n_paths: usize,
    /// Frozen-chain step; by default `min(1/(20 beta), tol / (beta (1 + |y|)))`.
    pub dt: Option<f64>,
    /// Truncation time; by default `(2/beta) ln((1 + |y|) / tol)`.
    pub t_star: Option<f64>,
    /// Each sample averages a path and its mirror image (negated noise).
    pub antithetic: bool,
}

impl CorrectorSettings {
    pub fn new(tol: f64, n_paths: usize) -> Self {
        Self {
            tol,
            n_paths,
            dt: None,
            t_star: None,
            antithetic: true,
        }
    }

    pub fn with_dt(self, dt: f64) -> Self {
        Self { dt: Some(dt), ..self }
    }

    fn signs(&self) -> &'static [f64] {
        if self.antithetic {
            &[1.0, -1.0]
        } else {
            &[1.0]
        }
    }

    fn validate(&self) -> Result<()> {
        check_positive("tol", self.tol)?;
        if self.n_paths < 2 {
            return Err(Error::domain("n_paths", "need at least two paths"));
        }
        Ok(())
    }
}

pub fn truncation_time(beta: f64, y_norm: f64, tol: f64) -> f64 {
    ((2.0 / beta) * ((1.0 + y_norm) / tol).ln()).max(1.0 / beta)
}

/// Finite-difference step `10^-2 (1 + |y|)`.
pub fn default_fd_step(y_norm: f64) -> f64 {
    1e-2 * (1.0 + y_norm)
}

pub fn default_step(beta: f64, y_norm: f64, tol: f64) -> f64 {
    (MAX_FAST_STEP_RATIO / beta).min(tol / (beta * (1.0 + y_norm)))
}

/// Step count and step size actually used: `n * dt = t_star` exactly.
fn discretize(spec: &FrozenSpec, dt: f64, t_star: f64) -> Result<(usize, f64)> {
    check_positive("dt", dt)?;
    check_positive("t_star", t_star)?;
    let n = (t_star / dt * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let h = t_star / n as f64;
    spec.check_step(h)?;
    Ok((n, h))
}

/// Trapezoid integrals of `b(x, Y_t) - bbar(x)` along one frozen path.
struct PathIntegrals {
    full: Vec<f64>,
    /// Up to the node `mid`, when requested.
    partial: Vec<f64>,
    y_mid: Vec<f64>,
    /// Integrand at the last node.
    tail: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn integrate_path(
    system: &SlowFastSystem,
    spec: &FrozenSpec,
    centre: &[f64],
    y0: &[f64],
    h: f64,
    n: usize,
    mid: Option<usize>,
    st: RngStream,
    sign: f64,
) -> Result<PathIntegrals> {
    let d1 = system.d1();
    let mut r = st.child(tag::FROZEN, 0).rng();
    let mut scratch = spec.scratch();
    scratch.sign = sign;
    let mut y = y0.to_vec();
    let mut g = vec![0.0; d1];
    let mut full = vec![0.0; d1];
    let mut partial = vec![0.0; d1];
    let mut y_mid = Vec::new();
    let eval = |y: &[f64], g: &mut [f64]| {
        system.b().eval(spec.x(), y, g);
        for (gi, c) in g.iter_mut().zip(centre) {
            *gi -= c;
        }
    };
    for k in 0..=n {
        eval(&y, &mut g);
        let w = if k == 0 || k == n { 0.5 * h } else { h };
        for i in 0..d1 {
            full[i] += w * g[i];
        }
        if mid == Some(k) {
            partial.clone_from(&full);
            for i in 0..d1 {
                partial[i] -= 0.5 * h * g[i];
            }
            y_mid = y.clone();
        }
        if k < n {
            spec.advance(&mut y, h, 1, &mut r, &mut scratch)?;
        }
    }
    Ok(PathIntegrals {
        full,
        partial,
        y_mid,
        tail: g,
    })
}

fn centre_at(bbar: &BbarProvider, x: &[f64]) -> Result<Vec<f64>> {
    let mut c = vec![0.0; x.len()];
    bbar.eval(x, &mut c)?;
    Ok(c)
}

fn component_stats(rows: &[Vec<f64>], j: usize) -> (f64, f64) {
    mean_stderr(&rows.iter().map(|r| r[j]).collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoissonSolution {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub value: Vec<f64>,
    /// Per component, from the spread of the per-path integrals.
    pub stderr: Vec<f64>,
    pub t_star: f64,
    pub dt: f64,
    pub n_paths: usize,
    /// Mean integrand at the truncation time.
    pub tail: Vec<f64>,
}

impl PoissonSolution {
    pub fn max_stderr(&self) -> f64 {
        self.stderr.iter().copied().fold(0.0, f64::max)
    }
}

/// Per-path integrals at `(x, y)` on streams `rng.path(i)`.
fn path_integrals(
    pb: &PoissonProblem,
    x: &[f64],
    y: &[f64],
    settings: &CorrectorSettings,
    rng: RngStream,
) -> Result<(Vec<PathIntegrals>, f64, f64)> {
    settings.validate()?;
    let spec = FrozenSpec::from_system(pb.system, x)?;
    if spec.beta() <= 0.0 {
        return Err(Error::domain("beta", "the corrector needs a positive dissipativity constant"));
    }
    if y.len() != pb.system.d2() {
        return Err(Error::Dimension {
            expected: pb.system.d2(),
            got: y.len(),
        });
    }
    let yn = norm(y);
    let beta = spec.beta();
    let t_star = settings.t_star.unwrap_or_else(|| truncation_time(beta, yn, settings.tol));
    let dt = settings.dt.unwrap_or_else(|| default_step(beta, yn, settings.tol));
    let (n, h) = discretize(&spec, dt, t_star)?;
    let centre = centre_at(pb.bbar, x)?;
    let signs = settings.signs();
    let paths = map_paths(settings.n_paths, rng, |_, st| {
        let mut acc: Option<PathIntegrals> = None;
        for &sign in signs {
            let p = integrate_path(pb.system, &spec, &centre, y, h, n, None, st, sign)?;
            match acc.as_mut() {
                None => acc = Some(p),
                Some(a) => {
                    for (u, v) in a.full.iter_mut().zip(&p.full) {
                        *u += v;
                    }
                    for (u, v) in a.tail.iter_mut().zip(&p.tail) {
                        *u += v;
                    }
                }
            }
        }
        let mut a = acc.expect("at least one sign");
        let k = signs.len() as f64;
        a.full.iter_mut().chain(a.tail.iter_mut()).for_each(|v| *v /= k);
        Ok(a)
    })?;
    Ok((paths, t_star, h))
}

/// Monte Carlo estimate of `Phi(x, y)`. Fails with [`Error::Truncation`]
/// when the mean integrand at the truncation time exceeds `tol` by more
/// than three standard errors.
pub fn phi_estimate(
    pb: &PoissonProblem,
    x: &[f64],
    y: &[f64],
    settings: &CorrectorSettings,
    rng: RngStream,
) -> Result<PoissonSolution> {
    let (paths, t_star, h) = path_integrals(pb, x, y, settings, rng)?;
    let d1 = pb.system.d1();
    let fulls: Vec<Vec<f64>> = paths.iter().map(|p| p.full.clone()).collect();
    let tails: Vec<Vec<f64>> = paths.into_iter().map(|p| p.tail).collect();
    let mut value = Vec::with_capacity(d1);
    let mut stderr = Vec::with_capacity(d1);
    let mut tail = Vec::with_capacity(d1);
    for j in 0..d1 {
        let (m, s) = component_stats(&fulls, j);
        value.push(m);
        stderr.push(s);
        let (tm, ts) = component_stats(&tails, j);
        if tm.abs() - 3.0 * ts > settings.tol {
            return Err(Error::Truncation {
                value: tm,
                tol: settings.tol,
            });
        }
        tail.push(tm);
    }
    Ok(PoissonSolution {
        x: x.to_vec(),
        y: y.to_vec(),
        value,
        stderr,
        t_star,
        dt: h,
        n_paths: settings.n_paths,
        tail,
    })
}

/// `Phi(x, y) - E Phi(x, Y_t) - int_0^t E[b(x, Y_s) - bbar(x)] ds` for
/// the first slow component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynkinResidual {
    pub residual: f64,
    pub stderr: f64,
    pub phi_start: EnsembleStat,
    pub phi_end: EnsembleStat,
    pub integral: EnsembleStat,
    pub t: f64,
    pub t_star: f64,
}

/// Checks the Dynkin identity at `(x, y)` over `[0, t]`. Each outer path
/// gives `Phi(x, y)`'s integrand, the integral over `[0, t]` and the state
/// `Y_t`; `n_inner` fresh paths from `Y_t` estimate `Phi(x, Y_t)` over the
/// remaining window `[t, T*]`, so the identity holds exactly for the
/// discretised chain and only sampling error remains. With
/// antithetic sampling every outer and inner path comes with its mirror. The
/// residual and its standard error come from the per-path combination, so
/// the correlation between the terms is accounted for. `scale` multiplies
/// every corrector value (1 for the identity itself).
#[allow(clippy::too_many_arguments)]
pub fn dynkin_residual(
    pb: &PoissonProblem,
    x: &[f64],
    y: &[f64],
    t: f64,
    settings: &CorrectorSettings,
    n_inner: usize,
    scale: f64,
    rng: RngStream,
) -> Result<DynkinResidual> {
    settings.validate()?;
    if !(t >= 0.0) {
        return Err(Error::domain("t", "must be non-negative"));
    }
    if n_inner == 0 {
        return Err(Error::domain("n_inner", "need at least one inner path"));
    }
    let spec = FrozenSpec::from_system(pb.system, x)?;
    let beta = spec.beta();
    if beta <= 0.0 {
        return Err(Error::domain("beta", "the corrector needs a positive dissipativity constant"));
    }
    let tol = settings.tol;
    let yn = norm(y);
    let t_star = settings.t_star.unwrap_or_else(|| truncation_time(beta, yn, tol));
    if t > t_star / 2.0 {
        return Err(Error::domain("t", format!("{t} exceeds half the truncation time {t_star}")));
    }
    // A common step with t on the grid.
    let dt = settings.dt.unwrap_or_else(|| default_step(beta, yn, tol));
    let m = (t / dt * (1.0 - 1e-12)).ceil() as usize;
    let h = if m == 0 { dt } else { t / m as f64 };
    spec.check_step(h)?;
    let n = (t_star / h).ceil() as usize;
    let centre = centre_at(pb.bbar, x)?;

    let signs = settings.signs();
    let k = signs.len() as f64;
    let rows = map_paths(settings.n_paths, rng.child(tag::EXPERIMENT, 0), |i, st| {
        let mut row = [0.0; 3];
        for (s, &sign) in signs.iter().enumerate() {
            let outer = integrate_path(pb.system, &spec, &centre, y, h, n, Some(m), st, sign)?;
            let y_t = &outer.y_mid;
            let n_end = n - m;
            let inner_base = rng.child(tag::INNER, (signs.len() * i + s) as u64);
            let mut end = 0.0;
            for j in 0..n_inner {
                for &inner_sign in signs {
                    end += integrate_path(pb.system, &spec, &centre, y_t, h, n_end, None, inner_base.path(j), inner_sign)?
                        .full[0];
                }
            }
            end /= (n_inner * signs.len()) as f64;
            row[0] += scale * outer.full[0] / k;
            row[1] += scale * end / k;
            row[2] += outer.partial[0] / k;
        }
        Ok(row)
    })?;
    let col = |j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();
    let combined: Vec<f64> = rows.iter().map(|r| r[0] - r[1] - r[2]).collect();
    let (residual, stderr) = mean_stderr(&combined);
    // When the terms cancel path by path (linear b with mirrored paths) the
    // spread is pure rounding; never report less than the rounding scale.
    let magnitude = rows.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>() / rows.len() as f64;
    let stderr = stderr.max(f64::EPSILON * n as f64 * magnitude);
    Ok(DynkinResidual {
        residual,
        stderr,
        phi_start: EnsembleStat::from_samples(&col(0)),
        phi_end: EnsembleStat::from_samples(&col(1)),
        integral: EnsembleStat::from_samples(&col(2)),
        t,
        t_star: n as f64 * h,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthPoint {
    pub y_norm: f64,
    pub phi_norm: f64,
    pub stderr: f64,
    pub resolved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthProbe {
    pub points: Vec<GrowthPoint>,
    /// Slope of `ln |Phi|` on `ln |y|` over resolved points; `None` when
    /// fewer than two points are resolved.
    pub exponent: Option<f64>,
    /// No point distinguishable from zero.
    pub degenerate: bool,
}

/// Estimates `|Phi(x, r e_1)|` for each radius `r` with tolerance
/// `rel_tol (1 + r)` and a common truncation time `(2/beta) ln(1/rel_tol)`.
/// All radii share the same noise.
pub fn phi_growth_probe(
    pb: &PoissonProblem,
    x: &[f64],
    radii: &[f64],
    rel_tol: f64,
    n_paths: usize,
    dt: f64,
    rng: RngStream,
) -> Result<GrowthProbe> {
    check_positive("rel_tol", rel_tol)?;
    if rel_tol >= 1.0 {
        return Err(Error::domain("rel_tol", "must be below 1"));
    }
    let beta = pb.system.beta();
    let t_star = (2.0 / beta) * (1.0 / rel_tol).ln();
    let mut points = Vec::with_capacity(radii.len());
    for &r in radii {
        check_positive("radius", r)?;
        let mut y = vec![0.0; pb.system.d2()];
        y[0] = r;
        let settings = CorrectorSettings {
            tol: rel_tol * (1.0 + r),
            n_paths,
            dt: Some(dt),
            t_star: Some(t_star),
            antithetic: true,
        };
        let sol = phi_estimate(pb, x, &y, &settings, rng)?;
        let phi_norm = norm(&sol.value);
        let stderr = norm(&sol.stderr);
        points.push(GrowthPoint {
            y_norm: r,
            phi_norm,
            stderr,
            resolved: phi_norm > settings.tol + 3.0 * stderr,
        });
    }
    let resolved: Vec<&GrowthPoint> = points.iter().filter(|p| p.resolved).collect();
    let exponent = if resolved.len() >= 2 {
        let lx: Vec<f64> = resolved.iter().map(|p| p.y_norm.ln()).collect();
        let ly: Vec<f64> = resolved.iter().map(|p| p.phi_norm.ln()).collect();
        Some(ols(&lx, &ly)?.slope)
    } else {
        None
    };
    Ok(GrowthProbe {
        degenerate: resolved.is_empty(),
        exponent,
        points,
    })
}

/// Direction of a finite-difference derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Axis {
    X(usize),
    Y(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gradient {
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub delta: f64,
}

/// Central difference of `Phi` along `axis` with step `delta` (by default
/// [`default_fd_step`]), both evaluations on the same noise and truncation
/// time. Fails with
/// [`Error::StepTooSmall`] when the standard error of the difference
/// exceeds half of it in some component.
pub fn phi_gradient_probe(
    pb: &PoissonProblem,
    x: &[f64],
    y: &[f64],
    axis: Axis,
    delta: Option<f64>,
    settings: &CorrectorSettings,
    rng: RngStream,
) -> Result<Gradient> {
    let delta = delta.unwrap_or_else(|| default_fd_step(norm(y)));
    let (diff, stderr) = gradient_raw(pb, x, y, axis, delta, settings, rng)?;
    for (d, s) in diff.iter().zip(&stderr) {
        if *s > 0.5 * d.abs() {
            return Err(Error::StepTooSmall { diff: *d, stderr: *s });
        }
    }
    let k = 1.0 / (2.0 * delta);
    Ok(Gradient {
        value: diff.iter().map(|d| d * k).collect(),
        stderr: stderr.iter().map(|s| s * k).collect(),
        delta,
    })
}

/// `Phi(+delta) - Phi(-delta)` per component with its standard error.
fn gradient_raw(
    pb: &PoissonProblem,
    x: &[f64],
    y: &[f64],
    axis: Axis,
    delta: f64,
    settings: &CorrectorSettings,
    rng: RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_positive("delta", delta)?;
    let (mut xp, mut xm, mut yp, mut ym) = (x.to_vec(), x.to_vec(), y.to_vec(), y.to_vec());
    match axis {
        Axis::X(i) if i < x.len() => {
            xp[i] += delta;
            xm[i] -= delta;
        }
        Axis::Y(i) if i < y.len() => {
            yp[i] += delta;
            ym[i] -= delta;
        }
        _ => return Err(Error::domain("axis", format!("{axis:?} out of range"))),
    }
    let beta = pb.system.beta();
    let far = norm(&yp).max(norm(&ym));
    let common = CorrectorSettings {
        t_star: Some(settings.t_star.unwrap_or_else(|| truncation_time(beta, far, settings.tol))),
        dt: Some(settings.dt.unwrap_or_else(|| default_step(beta, far, settings.tol))),
        ..*settings
    };
    let (plus, _, _) = path_integrals(pb, &xp, &yp, &common, rng)?;
    let (minus, _, _) = path_integrals(pb, &xm, &ym, &common, rng)?;
    let d1 = pb.system.d1();
    let mut diff = Vec::with_capacity(d1);
    let mut stderr = Vec::with_capacity(d1);
    for j in 0..d1 {
        let d: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| p.full[j] - m.full[j]).collect();
        let (m, s) = mean_stderr(&d);
        diff.push(m);
        stderr.push(s);
    }
    Ok((diff, stderr))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HolderProbe {
    pub gaps: Vec<f64>,
    /// `|grad_x Phi(x + g e_i) - grad_x Phi(x)|` for each gap `g`.
    pub increments: Vec<f64>,
    pub exponent: f64,
}

/// Hölder exponent of `x -> d Phi / d x_i` at `(x, y)`: the log-log slope
/// of the gradient increment against the gap. All evaluations share noise.
#[allow(clippy::too_many_arguments)]
pub fn phi_holder_probe(
    pb: &PoissonProblem,
    x: &[f64],
    y: &[f64],
    i: usize,
    gaps: &[f64],
    delta: f64,
    settings: &CorrectorSettings,
    rng: RngStream,
) -> Result<HolderProbe> {
    if gaps.len() < 2 {
        return Err(Error::domain("gaps", "need at least two gaps"));
    }
    let common = CorrectorSettings {
        t_star: Some(settings.t_star.unwrap_or_else(|| truncation_time(pb.system.beta(), norm(y), settings.tol))),
        dt: Some(settings.dt.unwrap_or_else(|| default_step(pb.system.beta(), norm(y), settings.tol))),
        ..*settings
    };
    let (base, _) = gradient_raw(pb, x, y, Axis::X(i), delta, &common, rng)?;
    let mut increments = Vec::with_capacity(gaps.len());
    for &g in gaps {
        check_positive("gap", g)?;
        let mut xg = x.to_vec();
        xg[i] += g;
        let (d, _) = gradient_raw(pb, &xg, y, Axis::X(i), delta, &common, rng)?;
        let inc: Vec<f64> = d.iter().zip(&base).map(|(a, b)| (a - b) / (2.0 * delta)).collect();
        increments.push(norm(&inc));
    }
    if increments.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::DegenerateFit("zero gradient increment".into()));
    }
    let lx: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
    let ly: Vec<f64> = increments.iter().map(|v| v.ln()).collect();
    Ok(HolderProbe {
        gaps: gaps.to_vec(),
        exponent: ols(&lx, &ly)?.slope,
        increments,
    })
}

/// `Phi(x, v e_1)` for each `v` in `ys`: columns `x_i`, `y_i`, `phi_j`, `stderr_j`.
pub fn corrector_scan(
    pb: &PoissonProblem,
    x: &[f64],
    ys: &[f64],
    settings: &CorrectorSettings,
    rng: RngStream,
) -> Result<CsvTable> {
    let d1 = pb.system.d1();
    let d2 = pb.system.d2();
    let mut header: Vec<String> = (1..=x.len()).map(|i| format!("x_{i}")).collect();
    header.extend((1..=d2).map(|i| format!("y_{i}")));
    header.extend((1..=d1).map(|j| format!("phi_{j}")));
    header.extend((1..=d1).map(|j| format!("stderr_{j}")));
    let mut rows = Vec::with_capacity(ys.len());
    for (k, &v) in ys.iter().enumerate() {
        let mut y = vec![0.0; pb.system.d2()];
        y[0] = v;
        let sol = phi_estimate(pb, x, &y, settings, rng.child(tag::EXPERIMENT, k as u64))?;
        let mut row = x.to_vec();
        row.extend(&y);
        row.extend(&sol.value);
        row.extend(&sol.stderr);
        rows.push(row);
    }
    CsvTable::new(header, rows)
}
