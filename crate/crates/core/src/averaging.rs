//! Frozen fast dynamics `dY = f(x, Y) dt + dL2` at a fixed slow state,
//! their invariant measure, the averaged drift `bbar(x) = int b(x, y) mu^x(dy)`
//! and the averaged slow equation `dXbar = bbar(Xbar) dt + dL1`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::Serialize;

use crate::engine::{
    check_finite, distance, map_paths, norm, CoupledField, DriftField, EnsembleStat, Path, TimeGrid,
};
use crate::error::{check_positive, Error, Result};
use crate::io::CsvTable;
use crate::multiscale::{check_dissipative, check_stiffness, SlowFastSystem};
use crate::rng::{tag, RngStream};
use crate::stable::{NoiseIncrements, StableSpec};
use crate::stats::{mean_stderr, ols};

/// Burn-in, in units of `1 / beta`, before invariant-measure sampling.
pub const BURN_IN_RELAXATION_TIMES: f64 = 10.0;

/// Scalar observable of the fast state.
pub type Observable<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

#[derive(Clone)]
pub struct FrozenSpec {
    x: Vec<f64>,
    f: Arc<dyn CoupledField>,
    noise: StableSpec,
    beta: f64,
}

impl std::fmt::Debug for FrozenSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenSpec")
            .field("x", &self.x)
            .field("beta", &self.beta)
            .field("alpha", &self.noise.alpha())
            .finish()
    }
}

impl FrozenSpec {
    /// `beta = 0` is accepted (pure noise, no relaxation); operations that
    /// need a relaxation time then refuse to run.
    pub fn new(x: Vec<f64>, f: Arc<dyn CoupledField>, alpha: f64, beta: f64) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(Error::domain("beta", "must be non-negative"));
        }
        if x.len() != f.x_dim() {
            return Err(Error::Dimension {
                expected: f.x_dim(),
                got: x.len(),
            });
        }
        if f.output_dim() != f.y_dim() {
            return Err(Error::Dimension {
                expected: f.y_dim(),
                got: f.output_dim(),
            });
        }
        check_dissipative(f.as_ref(), beta, Some(&x))?;
        let noise = StableSpec::new(alpha, f.y_dim())?;
        Ok(Self { x, f, noise, beta })
    }

    pub fn from_system(system: &SlowFastSystem, x: &[f64]) -> Result<Self> {
        Self::new(x.to_vec(), system.f().clone(), system.alpha(), system.beta())
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn alpha(&self) -> f64 {
        self.noise.alpha()
    }

    pub fn dim(&self) -> usize {
        self.noise.dim()
    }

    /// Same dynamics at another slow state.
    pub fn at(&self, x: &[f64]) -> Self {
        Self {
            x: x.to_vec(),
            ..self.clone()
        }
    }

    /// `y -> f(x, y)` as a field of the fast variable alone.
    pub fn drift(&self) -> FrozenDrift {
        FrozenDrift(self.clone())
    }

    fn relaxation_time(&self) -> Result<f64> {
        if self.beta > 0.0 {
            Ok(1.0 / self.beta)
        } else {
            Err(Error::domain("beta", "operation needs a positive dissipativity constant"))
        }
    }

    pub(crate) fn check_step(&self, h: f64) -> Result<()> {
        if self.beta > 0.0 {
            check_stiffness(h, 1.0 / self.beta)
        } else {
            Ok(())
        }
    }

    /// Euler steps in place, drawing noise from `rng`.
    pub(crate) fn advance<R: Rng + ?Sized>(
        &self,
        y: &mut [f64],
        h: f64,
        n_steps: usize,
        rng: &mut R,
        scratch: &mut Scratch,
    ) -> Result<()> {
        for k in 0..n_steps {
            self.f.eval(&self.x, y, &mut scratch.drift);
            self.noise.fill(h, rng, &mut scratch.noise);
            for ((yi, d), dl) in y.iter_mut().zip(&scratch.drift).zip(&scratch.noise) {
                *yi += d * h + scratch.sign * dl;
            }
            check_finite(y, k + 1)?;
        }
        Ok(())
    }

    pub(crate) fn scratch(&self) -> Scratch {
        Scratch {
            drift: vec![0.0; self.dim()],
            noise: vec![0.0; self.dim()],
            sign: 1.0,
        }
    }
}

pub struct FrozenDrift(FrozenSpec);

impl DriftField for FrozenDrift {
    fn input_dim(&self) -> usize {
        self.0.dim()
    }
    fn output_dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, y: &[f64], out: &mut [f64]) {
        self.0.f.eval(&self.0.x, y, out)
    }
}

pub(crate) struct Scratch {
    drift: Vec<f64>,
    noise: Vec<f64>,
    /// `-1` runs the mirrored path, which has the same law.
    pub(crate) sign: f64,
}

pub fn simulate_frozen(spec: &FrozenSpec, y0: &[f64], grid: &TimeGrid, rng: RngStream) -> Result<Path> {
    spec.check_step(grid.step())?;
    if y0.len() != spec.dim() {
        return Err(Error::Dimension {
            expected: spec.dim(),
            got: y0.len(),
        });
    }
    let d = spec.dim();
    let mut r = rng.child(tag::FROZEN, 0).rng();
    let mut scratch = spec.scratch();
    let mut y = y0.to_vec();
    let mut states = Vec::with_capacity((grid.n_steps() + 1) * d);
    states.extend_from_slice(&y);
    for k in 0..grid.n_steps() {
        spec.advance(&mut y, grid.step(), 1, &mut r, &mut scratch)
            .map_err(|_| Error::NonFinite(crate::error::BlowUp { path: None, step: k + 1 }))?;
        states.extend_from_slice(&y);
    }
    Path::from_states(*grid, d, states)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionCurve {
    pub times: Vec<f64>,
    /// `|Y1_t - Y2_t|` for the first coupled realisation.
    pub single: Vec<f64>,
    /// Ensemble mean of `|Y1_t - Y2_t|`.
    pub mean: Vec<f64>,
}

/// Synchronously coupled pair started at `y1`, `y2`; the second copy uses
/// the frozen state `x_alt` when given.
pub fn contraction_check(
    spec: &FrozenSpec,
    y1: &[f64],
    y2: &[f64],
    x_alt: Option<&[f64]>,
    grid: &TimeGrid,
    n_paths: usize,
    rng: RngStream,
) -> Result<ContractionCurve> {
    spec.check_step(grid.step())?;
    if n_paths < 1 {
        return Err(Error::domain("n_paths", "need at least one path"));
    }
    let other = match x_alt {
        Some(x) => spec.at(x),
        None => spec.clone(),
    };
    let n = grid.n_steps();
    let h = grid.step();
    let curves = map_paths(n_paths, rng, |_, st| {
        coupled_difference(spec, &other, y1, y2, h, n, st)
    })?;
    let mean = (0..=n)
        .map(|k| curves.iter().map(|c| c[k]).sum::<f64>() / n_paths as f64)
        .collect();
    Ok(ContractionCurve {
        times: (0..=n).map(|k| grid.time(k)).collect(),
        single: curves[0].clone(),
        mean,
    })
}

fn coupled_difference(
    a: &FrozenSpec,
    b: &FrozenSpec,
    y1: &[f64],
    y2: &[f64],
    h: f64,
    n: usize,
    st: RngStream,
) -> Result<Vec<f64>> {
    let d = a.dim();
    let mut r = st.child(tag::FROZEN, 0).rng();
    let (mut u, mut v) = (y1.to_vec(), y2.to_vec());
    let (mut fu, mut fv, mut dl) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut out = Vec::with_capacity(n + 1);
    out.push(distance(&u, &v));
    for k in 0..n {
        a.f.eval(&a.x, &u, &mut fu);
        b.f.eval(&b.x, &v, &mut fv);
        a.noise.fill(h, &mut r, &mut dl);
        for i in 0..d {
            u[i] += fu[i] * h + dl[i];
            v[i] += fv[i] * h + dl[i];
        }
        check_finite(&u, k + 1)?;
        check_finite(&v, k + 1)?;
        out.push(distance(&u, &v));
    }
    Ok(out)
}

/// Per-step ratios `|D_{k+1}| / |D_k|` of a single coupled pair, together
/// with the rounding budget of each step (used to assert the linear
/// recursion `D_{k+1} = (1 - h) D_k` to machine precision).
pub fn coupled_step_ratios(
    spec: &FrozenSpec,
    y1: &[f64],
    y2: &[f64],
    grid: &TimeGrid,
    rng: RngStream,
) -> Result<Vec<(f64, f64, f64)>> {
    spec.check_step(grid.step())?;
    let d = spec.dim();
    let h = grid.step();
    let mut r = rng.child(tag::FROZEN, 0).rng();
    let (mut u, mut v) = (y1.to_vec(), y2.to_vec());
    let (mut fu, mut fv, mut dl) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut out = Vec::with_capacity(grid.n_steps());
    for k in 0..grid.n_steps() {
        let before = u[0] - v[0];
        spec.f.eval(&spec.x, &u, &mut fu);
        spec.f.eval(&spec.x, &v, &mut fv);
        spec.noise.fill(h, &mut r, &mut dl);
        for i in 0..d {
            u[i] += fu[i] * h + dl[i];
            v[i] += fv[i] * h + dl[i];
        }
        check_finite(&u, k + 1)?;
        let after = u[0] - v[0];
        let budget = 4.0 * f64::EPSILON * (norm(&u) + norm(&v) + norm(&dl) + before.abs());
        out.push((before, after, budget));
    }
    Ok(out)
}

/// Decay rate `-slope` of `ln value` against time over points with
/// `t >= t_min` and positive value.
pub fn fit_decay_rate(times: &[f64], values: &[f64], t_min: f64) -> Result<f64> {
    let (t, v): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(values)
        .filter(|(t, v)| **t >= t_min && **v > 0.0)
        .map(|(t, v)| (*t, v.ln()))
        .unzip();
    Ok(-ols(&t, &v)?.slope)
}

/// Time average of `b(x, Y_t)` over `[burn_in, horizon]`, replicated
/// `n_reps` times. One [`EnsembleStat`] per output component.
pub fn ergodic_average_bbar(
    spec: &FrozenSpec,
    b: &dyn CoupledField,
    y0: &[f64],
    grid: &TimeGrid,
    burn_in: f64,
    n_reps: usize,
    rng: RngStream,
) -> Result<Vec<EnsembleStat>> {
    spec.check_step(grid.step())?;
    let relax = spec.relaxation_time()?;
    if grid.horizon() < burn_in + BURN_IN_RELAXATION_TIMES * relax - 1e-9 {
        return Err(Error::domain(
            "horizon",
            format!(
                "{} is shorter than burn-in {burn_in} plus {} relaxation times",
                grid.horizon(),
                BURN_IN_RELAXATION_TIMES
            ),
        ));
    }
    if n_reps < 2 {
        return Err(Error::domain("n_reps", "need at least two replicas"));
    }
    if b.x_dim() != spec.x.len() || b.y_dim() != spec.dim() {
        return Err(Error::Dimension {
            expected: spec.dim(),
            got: b.y_dim(),
        });
    }
    let dout = b.output_dim();
    let h = grid.step();
    let first = grid.node(burn_in);
    let n = grid.n_steps();
    let reps = map_paths(n_reps, rng, |_, st| {
        let mut r = st.child(tag::FROZEN, 0).rng();
        let mut scratch = spec.scratch();
        let mut y = y0.to_vec();
        spec.advance(&mut y, h, first, &mut r, &mut scratch)?;
        let mut acc = vec![0.0; dout];
        let mut bv = vec![0.0; dout];
        for _ in first..n {
            b.eval(&spec.x, &y, &mut bv);
            for (a, v) in acc.iter_mut().zip(&bv) {
                *a += v;
            }
            spec.advance(&mut y, h, 1, &mut r, &mut scratch)?;
        }
        let count = (n - first).max(1) as f64;
        Ok(acc.into_iter().map(|a| a / count).collect::<Vec<f64>>())
    })?;
    Ok((0..dout)
        .map(|j| EnsembleStat::from_samples(&reps.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect())
}

/// Samples of `mu^x` taken along one long path after burn-in.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantMeasureEstimate {
    pub x: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub burn_in: f64,
    pub spacing: f64,
}

impl InvariantMeasureEstimate {
    /// Burn-in `10 / beta`, spacing `1 / beta`.
    pub fn collect(
        spec: &FrozenSpec,
        y0: &[f64],
        n_samples: usize,
        h: f64,
        rng: RngStream,
    ) -> Result<Self> {
        let relax = spec.relaxation_time()?;
        Self::collect_with(spec, y0, n_samples, h, BURN_IN_RELAXATION_TIMES * relax, relax, rng)
    }

    pub fn collect_with(
        spec: &FrozenSpec,
        y0: &[f64],
        n_samples: usize,
        h: f64,
        burn_in: f64,
        spacing: f64,
        rng: RngStream,
    ) -> Result<Self> {
        spec.check_step(h)?;
        let relax = spec.relaxation_time()?;
        if burn_in < BURN_IN_RELAXATION_TIMES * relax - 1e-12 || spacing < relax - 1e-12 {
            return Err(Error::domain(
                "burn_in",
                format!("need burn-in >= {} and spacing >= {relax}", BURN_IN_RELAXATION_TIMES * relax),
            ));
        }
        let mut r = rng.child(tag::FROZEN, 0).rng();
        let mut scratch = spec.scratch();
        let mut y = y0.to_vec();
        let burn_steps = (burn_in / h).round() as usize;
        let gap = ((spacing / h).round() as usize).max(1);
        spec.advance(&mut y, h, burn_steps, &mut r, &mut scratch)?;
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            samples.push(y.clone());
            spec.advance(&mut y, h, gap, &mut r, &mut scratch)?;
        }
        Ok(Self {
            x: spec.x.clone(),
            samples,
            burn_in,
            spacing,
        })
    }

    /// `mu(g)` with a batch-means standard error (20 batches).
    pub fn functional(&self, g: Observable) -> EnsembleStat {
        let values: Vec<f64> = self.samples.iter().map(|y| g(y)).collect();
        let batches = 20.min(values.len());
        let size = values.len() / batches.max(1);
        let means: Vec<f64> = values
            .chunks(size.max(1))
            .take(batches)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        EnsembleStat {
            mean,
            stderr: mean_stderr(&means).1,
            n_paths: values.len(),
        }
    }
}

/// `mu(g)` from endpoints of independent paths run for `horizon`.
pub fn ensemble_invariant_mean(
    spec: &FrozenSpec,
    g: Observable,
    y0: &[f64],
    horizon: f64,
    h: f64,
    n_paths: usize,
    rng: RngStream,
) -> Result<EnsembleStat> {
    spec.check_step(h)?;
    let steps = (horizon / h).round() as usize;
    let values = map_paths(n_paths, rng, |_, st| {
        let mut r = st.child(tag::FROZEN, 0).rng();
        let mut scratch = spec.scratch();
        let mut y = y0.to_vec();
        spec.advance(&mut y, h, steps, &mut r, &mut scratch)?;
        Ok(g(&y))
    })?;
    Ok(EnsembleStat::from_samples(&values))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayCurve {
    pub times: Vec<f64>,
    /// `P_t g(y0) - mu(g)` estimated by paired differences.
    pub diff: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `mu(g)` from the endpoints at four times the largest requested time.
    pub plateau: EnsembleStat,
    /// Exponential decay rate fitted to the points resolved above 3 stderr.
    pub rate: Option<f64>,
}

/// Relaxation of `E g(Y_t)` towards `mu(g)`. Each path is run to four times
/// the last requested time; its value there is the plateau sample paired
/// with the earlier readings.
pub fn ergodicity_decay(
    spec: &FrozenSpec,
    g: Observable,
    y0: &[f64],
    times: &[f64],
    h: f64,
    n_paths: usize,
    rng: RngStream,
) -> Result<DecayCurve> {
    spec.check_step(h)?;
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) || times[0] < 0.0 {
        return Err(Error::domain("times", "must be non-negative and increasing"));
    }
    if n_paths < 2 {
        return Err(Error::domain("n_paths", "need at least two paths"));
    }
    let t_end = 4.0 * times[times.len() - 1];
    let nodes: Vec<usize> = times.iter().map(|t| (t / h).round() as usize).collect();
    let end = (t_end / h).round() as usize;
    let per_path = map_paths(n_paths, rng, |_, st| {
        let mut r = st.child(tag::FROZEN, 0).rng();
        let mut scratch = spec.scratch();
        let mut y = y0.to_vec();
        let mut at = 0usize;
        let mut readings = Vec::with_capacity(nodes.len() + 1);
        for &k in nodes.iter().chain(std::iter::once(&end)) {
            spec.advance(&mut y, h, k - at, &mut r, &mut scratch)?;
            at = k;
            readings.push(g(&y));
        }
        Ok(readings)
    })?;
    let m = times.len();
    let plateau_samples: Vec<f64> = per_path.iter().map(|r| r[m]).collect();
    let plateau = EnsembleStat::from_samples(&plateau_samples);
    let mut diff = Vec::with_capacity(m);
    let mut stderr = Vec::with_capacity(m);
    for j in 0..m {
        let d: Vec<f64> = per_path.iter().map(|r| r[j] - r[m]).collect();
        let (mu, se) = mean_stderr(&d);
        diff.push(mu);
        stderr.push(se);
    }
    let (ft, fv): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(diff.iter().zip(&stderr))
        .filter(|(_, (d, s))| d.abs() > 3.0 * **s && d.abs() > 0.0)
        .map(|(t, (d, _))| (*t, d.abs()))
        .unzip();
    let rate = if ft.len() >= 2 {
        fit_decay_rate(&ft, &fv, f64::NEG_INFINITY).ok()
    } else {
        None
    };
    Ok(DecayCurve {
        times: times.to_vec(),
        diff,
        stderr,
        plateau,
        rate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthFit {
    pub slope: f64,
    pub horizons: Vec<f64>,
    pub moments: Vec<EnsembleStat>,
}

/// Slope of `ln E[sup_{[0,T]} |Y|^p]` against `ln T`. Paths are run once to
/// the largest horizon and the running supremum is read off at each `T`.
pub fn frozen_sup_moment_growth(
    spec: &FrozenSpec,
    y0: &[f64],
    p: f64,
    horizons: &[f64],
    h: f64,
    n_paths: usize,
    rng: RngStream,
) -> Result<GrowthFit> {
    if horizons.len() < 2 {
        return Err(Error::DegenerateFit("need at least two horizons".into()));
    }
    if !(1.0..spec.alpha()).contains(&p) {
        return Err(Error::domain("p", format!("{p} outside [1, {})", spec.alpha())));
    }
    if horizons.windows(2).any(|w| w[1] <= w[0]) || horizons[0] <= 0.0 {
        return Err(Error::domain("horizons", "must be positive and increasing"));
    }
    spec.check_step(h)?;
    let nodes: Vec<usize> = horizons.iter().map(|t| (t / h).round() as usize).collect();
    let per_path = map_paths(n_paths, rng, |_, st| {
        let mut r = st.child(tag::FROZEN, 0).rng();
        let mut scratch = spec.scratch();
        let mut y = y0.to_vec();
        let mut sup = norm(&y);
        let mut at = 0;
        let mut out = Vec::with_capacity(nodes.len());
        for &k in &nodes {
            for _ in at..k {
                spec.advance(&mut y, h, 1, &mut r, &mut scratch)?;
                sup = sup.max(norm(&y));
            }
            at = k;
            out.push(sup.powf(p));
        }
        Ok(out)
    })?;
    let moments: Vec<EnsembleStat> = (0..nodes.len())
        .map(|j| EnsembleStat::from_samples(&per_path.iter().map(|v| v[j]).collect::<Vec<_>>()))
        .collect();
    let lx: Vec<f64> = horizons.iter().map(|t| t.ln()).collect();
    let ly: Vec<f64> = moments.iter().map(|m| m.mean.ln()).collect();
    Ok(GrowthFit {
        slope: ols(&lx, &ly)?.slope,
        horizons: horizons.to_vec(),
        moments,
    })
}

/// Tabulated `bbar` on a uniform grid of a scalar slow variable, evaluated
/// by piecewise-linear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct BbarTable {
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl BbarTable {
    pub fn new(xs: Vec<f64>, values: Vec<f64>, stderr: Vec<f64>) -> Result<Self> {
        if xs.len() < 2 || values.len() != xs.len() || stderr.len() != xs.len() {
            return Err(Error::domain("table", "need at least two nodes and matching columns"));
        }
        let dx = xs[1] - xs[0];
        if !(dx > 0.0) || xs.windows(2).any(|w| ((w[1] - w[0]) - dx).abs() > 1e-9 * dx.max(1.0)) {
            return Err(Error::domain("xs", "nodes must be uniform and increasing"));
        }
        Ok(Self { xs, values, stderr })
    }

    pub fn range(&self) -> (f64, f64) {
        (self.xs[0], self.xs[self.xs.len() - 1])
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        let (lo, hi) = self.range();
        if !(x >= lo && x <= hi) {
            return Err(Error::InterpolationRange { x, lo, hi });
        }
        let dx = self.xs[1] - self.xs[0];
        let pos = (x - lo) / dx;
        let i = (pos.floor() as usize).min(self.xs.len() - 2);
        let w = pos - i as f64;
        Ok(self.values[i] * (1.0 - w) + self.values[i + 1] * w)
    }

    pub fn max_stderr(&self) -> f64 {
        self.stderr.iter().copied().fold(0.0, f64::max)
    }

    /// Columns `x, bbar, stderr`.
    pub fn to_table(&self) -> CsvTable {
        let rows = (0..self.xs.len())
            .map(|i| vec![self.xs[i], self.values[i], self.stderr[i]])
            .collect();
        CsvTable::new(vec!["x".into(), "bbar".into(), "stderr".into()], rows)
            .expect("three columns")
    }

    pub fn from_table(t: &CsvTable) -> Result<Self> {
        let col = |n: &str| t.column(n).ok_or_else(|| Error::Parse(format!("missing column `{n}`")));
        Self::new(col("x")?, col("bbar")?, col("stderr")?)
    }
}

/// Estimates `bbar` at each node of `xs` for a scalar slow variable.
pub fn tabulate_bbar(
    system: &SlowFastSystem,
    xs: &[f64],
    grid: &TimeGrid,
    burn_in: f64,
    n_reps: usize,
    rng: RngStream,
) -> Result<BbarTable> {
    if system.d1() != 1 {
        return Err(Error::Dimension {
            expected: 1,
            got: system.d1(),
        });
    }
    let y0 = vec![0.0; system.d2()];
    let mut values = Vec::with_capacity(xs.len());
    let mut stderr = Vec::with_capacity(xs.len());
    for (i, &x) in xs.iter().enumerate() {
        let spec = FrozenSpec::from_system(system, &[x])?;
        let est = ergodic_average_bbar(
            &spec,
            system.b().as_ref(),
            &y0,
            grid,
            burn_in,
            n_reps,
            rng.child(tag::FROZEN, i as u64),
        )?;
        values.push(est[0].mean);
        stderr.push(est[0].stderr);
    }
    BbarTable::new(xs.to_vec(), values, stderr)
}

/// Estimation settings for on-the-fly `bbar`.
#[derive(Debug, Clone, Copy)]
pub struct OnTheFlySettings {
    pub grid: TimeGrid,
    pub burn_in: f64,
    pub n_reps: usize,
    /// Lattice spacing: `bbar` is estimated at the nearest lattice point.
    pub resolution: f64,
}

/// `bbar` estimated lazily at lattice points of `R^{d1}` and memoised. The
/// value at a lattice point depends only on the point (its random stream
/// is derived from the lattice index), so concurrent fills agree.
pub struct OnTheFlyBbar {
    system: SlowFastSystem,
    settings: OnTheFlySettings,
    root: RngStream,
    memo: Mutex<HashMap<Vec<i64>, Vec<f64>>>,
}

impl OnTheFlyBbar {
    pub fn new(system: SlowFastSystem, settings: OnTheFlySettings, root: RngStream) -> Result<Self> {
        check_positive("resolution", settings.resolution)?;
        Ok(Self {
            system,
            settings,
            root,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn cached_points(&self) -> usize {
        self.memo.lock().map(|m| m.len()).unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let key: Vec<i64> = x
            .iter()
            .map(|v| (v / self.settings.resolution).round() as i64)
            .collect();
        if let Some(v) = self.memo.lock().ok().and_then(|m| m.get(&key).cloned()) {
            return Ok(v);
        }
        let point: Vec<f64> = key.iter().map(|&k| k as f64 * self.settings.resolution).collect();
        let stream = key.iter().fold(self.root, |s, &k| s.child(tag::FROZEN, k as u64));
        let spec = FrozenSpec::from_system(&self.system, &point)?;
        let y0 = vec![0.0; self.system.d2()];
        let est = ergodic_average_bbar(
            &spec,
            self.system.b().as_ref(),
            &y0,
            &self.settings.grid,
            self.settings.burn_in,
            self.settings.n_reps,
            stream,
        )?;
        let value: Vec<f64> = est.iter().map(|e| e.mean).collect();
        if let Ok(mut m) = self.memo.lock() {
            m.entry(key).or_insert_with(|| value.clone());
        }
        Ok(value)
    }
}

/// Source of the averaged drift.
pub enum BbarProvider {
    Analytic(Arc<dyn DriftField>),
    Table(BbarTable),
    OnTheFly(Arc<OnTheFlyBbar>),
}

impl BbarProvider {
    pub fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            BbarProvider::Analytic(f) => {
                f.eval(x, out);
                Ok(())
            }
            BbarProvider::Table(t) => {
                out[0] = t.eval(x[0])?;
                Ok(())
            }
            BbarProvider::OnTheFly(o) => {
                out.copy_from_slice(&o.eval(x)?);
                Ok(())
            }
        }
    }

    /// Largest standard error of the provider's values (zero when analytic).
    pub fn stderr(&self) -> f64 {
        match self {
            BbarProvider::Table(t) => t.max_stderr(),
            _ => 0.0,
        }
    }
}

/// Euler path of the averaged equation driven by `slow_noise`.
pub fn simulate_averaged(
    bbar: &BbarProvider,
    grid: &TimeGrid,
    x0: &[f64],
    slow_noise: &NoiseIncrements,
) -> Result<Path> {
    let d = x0.len();
    if slow_noise.len() != grid.n_steps() || slow_noise.dim() != d {
        return Err(Error::domain(
            "slow_noise",
            format!("{} x {} increments for a {}-step grid", slow_noise.len(), slow_noise.dim(), grid.n_steps()),
        ));
    }
    let h = grid.step();
    let mut xs = Vec::with_capacity((grid.n_steps() + 1) * d);
    xs.extend_from_slice(x0);
    let mut drift = vec![0.0; d];
    for k in 0..grid.n_steps() {
        bbar.eval(&xs[k * d..(k + 1) * d], &mut drift)?;
        let dl = slow_noise.get(k);
        for i in 0..d {
            xs.push(xs[k * d + i] + drift[i] * h + dl[i]);
        }
        check_finite(&xs[(k + 1) * d..], k + 1)?;
    }
    Path::from_states(*grid, d, xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{FnCoupled, FnField};
    use crate::stable::{cms_symmetric, increments_on_grid};
    use crate::stats::{ks_critical, ks_two_sample};

    fn ou(rate: f64) -> FrozenSpec {
        let f = Arc::new(FnCoupled::new(1, 1, 1, move |_: &[f64], y: &[f64], o: &mut [f64]| {
            o[0] = -rate * y[0]
        }));
        FrozenSpec::new(vec![0.0], f, 1.5, rate).unwrap()
    }

    fn stationary_samples(n: usize, seed: u64) -> Vec<f64> {
        let scale = (1.0f64 / 1.5).powf(1.0 / 1.5);
        let mut r = RngStream::new(seed).rng();
        (0..n).map(|_| scale * cms_symmetric(1.5, &mut r)).collect()
    }

    #[test]
    fn zero_noise_recursion() {
        let spec = ou(1.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let quiet = NoiseIncrements::zeros(1, 0.1, 10);
        let p = crate::engine::euler_path(&spec.drift(), &[1.0], &grid, &quiet).unwrap();
        for k in 0..=10 {
            assert!((p.state(k)[0] - 0.9f64.powi(k as i32)).abs() < 1e-14, "{k}");
        }
        assert!(simulate_frozen(&spec, &[1.0], &grid, RngStream::new(1)).is_err());
    }

    #[test]
    fn frozen_state_is_inert_when_f_ignores_it() {
        let a = ou(1.0);
        let b = a.at(&[42.0]);
        let grid = TimeGrid::new(2.0, 40).unwrap();
        let st = RngStream::new(2);
        assert_eq!(
            simulate_frozen(&a, &[0.3], &grid, st).unwrap(),
            simulate_frozen(&b, &[0.3], &grid, st).unwrap()
        );
    }

    #[test]
    fn long_run_matches_stationary_law() {
        let spec = ou(1.0);
        let grid = TimeGrid::new(20.0, 2000).unwrap();
        let n = 10_000;
        let ends = map_paths(n, RngStream::new(3), |_, st| {
            Ok(simulate_frozen(&spec, &[0.0], &grid, st)?.last()[0])
        })
        .unwrap();
        let exact = stationary_samples(n, 4);
        let d = ks_two_sample(&ends, &exact);
        assert!(d < ks_critical(n, n, 0.01), "{d}");
    }

    #[test]
    fn contraction_identical_starts_and_linear_rate() {
        let spec = ou(1.0);
        let grid = TimeGrid::new(3.0, 300).unwrap();
        let c = contraction_check(&spec, &[1.0], &[1.0], None, &grid, 3, RngStream::new(5)).unwrap();
        assert!(c.single.iter().chain(&c.mean).all(|&v| v == 0.0));
        let c = contraction_check(&spec, &[2.0], &[-1.0], None, &grid, 3, RngStream::new(5)).unwrap();
        for (k, v) in c.single.iter().enumerate() {
            let expect = 3.0 * 0.99f64.powi(k as i32);
            assert!((v - expect).abs() < 1e-9 * (1.0 + expect) + 1e-9, "{k}");
        }
    }

    #[test]
    fn contraction_with_shifted_frozen_state() {
        // f(x, y) = x - y: the difference tends to |x1 - x2|.
        let f = Arc::new(FnCoupled::new(1, 1, 1, |x: &[f64], y: &[f64], o: &mut [f64]| o[0] = x[0] - y[0]));
        let spec = FrozenSpec::new(vec![0.0], f, 1.5, 1.0).unwrap();
        let grid = TimeGrid::new(10.0, 1000).unwrap();
        let c = contraction_check(&spec, &[0.0], &[0.0], Some(&[0.5]), &grid, 2, RngStream::new(6)).unwrap();
        assert!((c.single.last().unwrap() - 0.5).abs() < 1e-3);
        assert!(c.single.iter().all(|&v| v <= 0.5 + 1e-12));
    }

    #[test]
    fn saturating_cubic_contracts_fast() {
        let f = Arc::new(FnCoupled::new(1, 1, 1, |_: &[f64], y: &[f64], o: &mut [f64]| {
            o[0] = -y[0] - y[0].powi(3) / (1.0 + y[0] * y[0])
        }));
        let spec = FrozenSpec::new(vec![0.0], f, 1.5, 1.0).unwrap();
        let grid = TimeGrid::new(6.0, 600).unwrap();
        let c = contraction_check(&spec, &[3.0], &[-2.0], None, &grid, 200, RngStream::new(7)).unwrap();
        let rate = fit_decay_rate(&c.times, &c.single, 1.0).unwrap();
        assert!(-rate <= -0.5 + 0.05, "single slope {}", -rate);
        let rate = fit_decay_rate(&c.times, &c.mean, 1.0).unwrap();
        assert!(-rate <= -0.5 + 0.05, "mean slope {}", -rate);
    }

    #[test]
    fn linear_step_ratio_to_rounding() {
        let spec = ou(1.0);
        let grid = TimeGrid::new(5.0, 500).unwrap();
        for (before, after, budget) in coupled_step_ratios(&spec, &[4.0], &[-1.0], &grid, RngStream::new(8)).unwrap() {
            assert!((after - 0.99 * before).abs() <= budget, "{before} {after} {budget}");
        }
    }

    #[test]
    fn bbar_constant_integrand() {
        let spec = ou(1.0);
        let b = FnCoupled::new(1, 1, 1, |_: &[f64], _: &[f64], o: &mut [f64]| o[0] = 2.5);
        let grid = TimeGrid::new(12.0, 240).unwrap();
        let e = ergodic_average_bbar(&spec, &b, &[0.0], &grid, 1.0, 8, RngStream::new(9)).unwrap();
        assert_eq!(e[0].mean, 2.5);
        assert_eq!(e[0].stderr, 0.0);
        assert!(ergodic_average_bbar(&spec, &b, &[0.0], &TimeGrid::new(5.0, 100).unwrap(), 1.0, 8, RngStream::new(9)).is_err());
    }

    #[test]
    fn bbar_of_linear_problem_vanishes() {
        let f = Arc::new(FnCoupled::new(1, 1, 1, |x: &[f64], y: &[f64], o: &mut [f64]| o[0] = x[0] - y[0]));
        let b = FnCoupled::new(1, 1, 1, |x: &[f64], y: &[f64], o: &mut [f64]| o[0] = -x[0] + y[0]);
        let spec = FrozenSpec::new(vec![0.8], f, 1.5, 1.0).unwrap();
        let grid = TimeGrid::new(60.0, 3000).unwrap();
        let e = ergodic_average_bbar(&spec, &b, &[0.0], &grid, 10.0, 200, RngStream::new(10)).unwrap();
        assert!(e[0].mean.abs() < 3.0 * e[0].stderr, "{:?}", e[0]);
    }

    #[test]
    fn bbar_cosine_matches_stationary_samples() {
        let spec = ou(1.0);
        let b = FnCoupled::new(1, 1, 1, |_: &[f64], y: &[f64], o: &mut [f64]| o[0] = y[0].cos());
        let grid = TimeGrid::new(60.0, 6000).unwrap();
        let e = ergodic_average_bbar(&spec, &b, &[0.0], &grid, 10.0, 200, RngStream::new(11)).unwrap()[0];
        let exact: Vec<f64> = stationary_samples(1_000_000, 12).iter().map(|y| y.cos()).collect();
        let (m, se) = mean_stderr(&exact);
        assert!((e.mean - m).abs() < 3.0 * (e.stderr * e.stderr + se * se).sqrt(), "{e:?} vs {m}");
    }

    #[test]
    fn decay_constant_and_linear_mean() {
        let spec = ou(1.0);
        let times = [0.0, 0.5, 1.0, 1.5, 2.0];
        let c = ergodicity_decay(&spec, &|_: &[f64]| 1.0, &[3.0], &times, 0.01, 100, RngStream::new(13)).unwrap();
        assert!(c.diff.iter().all(|&d| d == 0.0));
        assert!(c.rate.is_none());
        let c = ergodicity_decay(&spec, &|y: &[f64]| y[0], &[5.0], &times, 0.01, 10_000, RngStream::new(14)).unwrap();
        for (i, t) in times.iter().enumerate() {
            let expect = 5.0 * (-t).exp();
            assert!((c.diff[i] - expect).abs() < 3.0 * c.stderr[i] + 1e-12, "t {t}: {} vs {expect}", c.diff[i]);
        }
    }

    #[test]
    fn decay_rate_of_cosine() {
        let spec = ou(1.0);
        let times = [0.0, 0.5, 1.0, 1.5, 2.0];
        let c = ergodicity_decay(&spec, &|y: &[f64]| y[0].cos(), &[3.0], &times, 0.01, 20_000, RngStream::new(15)).unwrap();
        assert!(c.rate.unwrap() >= 0.4, "{c:?}");
    }

    #[test]
    fn birkhoff_and_ensemble_agree() {
        let spec = ou(1.0);
        let g = |y: &[f64]| y[0].cos();
        let im = InvariantMeasureEstimate::collect(&spec, &[0.0], 20_000, 0.01, RngStream::new(16)).unwrap();
        let a = im.functional(&g);
        let b = ensemble_invariant_mean(&spec, &g, &[0.0], 10.0, 0.01, 20_000, RngStream::new(17)).unwrap();
        assert!((a.mean - b.mean).abs() < 3.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt(), "{a:?} {b:?}");
        assert!(InvariantMeasureEstimate::collect_with(&spec, &[0.0], 10, 0.01, 2.0, 1.0, RngStream::new(1)).is_err());
    }

    #[test]
    fn sup_growth_slopes() {
        let spec = ou(1.0);
        let ts = [4.0, 8.0, 16.0, 32.0, 64.0, 128.0];
        assert!(frozen_sup_moment_growth(&spec, &[0.0], 1.0, &[4.0], 0.05, 10, RngStream::new(0)).is_err());
        let g = frozen_sup_moment_growth(&spec, &[0.0], 1.0, &ts, 0.05, 4000, RngStream::new(18)).unwrap();
        assert!((g.slope - 1.0 / 1.5).abs() < 0.12, "{}", g.slope);

        let f = Arc::new(FnCoupled::new(1, 1, 1, |_: &[f64], _: &[f64], o: &mut [f64]| o[0] = 0.0));
        let pure = FrozenSpec::new(vec![0.0], f, 1.5, 0.0).unwrap();
        let g = frozen_sup_moment_growth(&pure, &[0.0], 1.0, &ts, 0.05, 4000, RngStream::new(19)).unwrap();
        assert!((g.slope - 1.0 / 1.5).abs() < 0.1, "{}", g.slope);
    }

    #[test]
    fn table_interpolation_and_range() {
        let t = BbarTable::new(vec![-1.0, 0.0, 1.0], vec![1.0, 0.0, -1.0], vec![0.1; 3]).unwrap();
        assert_eq!(t.eval(0.5).unwrap(), -0.5);
        assert_eq!(t.eval(1.0).unwrap(), -1.0);
        assert!(matches!(t.eval(1.5), Err(Error::InterpolationRange { .. })));
        let back = BbarTable::from_table(&CsvTable::parse(&t.to_table().to_csv_string()).unwrap()).unwrap();
        assert_eq!(back, t);
        assert!(BbarTable::new(vec![0.0, 1.0, 3.0], vec![0.0; 3], vec![0.0; 3]).is_err());
    }

    #[test]
    fn averaged_equation_basics() {
        let zero = BbarProvider::Analytic(Arc::new(FnField::new(1, 1, |_: &[f64], o: &mut [f64]| o[0] = 0.0)));
        let spec = StableSpec::new(1.5, 1).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let noise = increments_on_grid(&spec, 100, grid.step(), RngStream::new(20)).unwrap();
        let p = simulate_averaged(&zero, &grid, &[1.0], &noise).unwrap();
        let mut acc = 1.0;
        for k in 0..100 {
            acc += noise.get(k)[0];
            assert_eq!(p.state(k + 1)[0], acc);
        }
        let decay = BbarProvider::Analytic(Arc::new(FnField::new(1, 1, |x: &[f64], o: &mut [f64]| o[0] = -x[0])));
        let quiet = NoiseIncrements::zeros(1, 0.1, 10);
        let p = simulate_averaged(&decay, &TimeGrid::new(1.0, 10).unwrap(), &[1.0], &quiet).unwrap();
        assert!((p.last()[0] - 0.9f64.powi(10)).abs() < 1e-14);
    }
}
