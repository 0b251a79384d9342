//! Uniform grids, Euler stepping for jump SDEs, and ensemble reductions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_positive, BlowUp, Error, Result};
use crate::io::CsvTable;
use crate::rng::RngStream;
use crate::stable::NoiseIncrements;
use crate::stats::mean_stderr;

/// Uniform grid on `[0, horizon]`. `step * n_steps == horizon` holds exactly:
/// the horizon is recomputed from the rounded step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    step: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        check_positive("horizon", horizon)?;
        if n_steps == 0 {
            return Err(Error::domain("n_steps", "must be at least 1"));
        }
        let step = horizon / n_steps as f64;
        Ok(Self {
            horizon: step * n_steps as f64,
            n_steps,
            step,
        })
    }

    /// Grid with step as close to `step` as the horizon allows (never larger
    /// than `step` by more than rounding).
    pub fn with_step(horizon: f64, step: f64) -> Result<Self> {
        check_positive("step", step)?;
        check_positive("horizon", horizon)?;
        let n = (horizon / step - 1e-9).ceil().max(1.0) as usize;
        Self::new(horizon, n)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.step
    }

    /// Index of the node closest to `t`.
    pub fn node(&self, t: f64) -> usize {
        ((t / self.step).round() as usize).min(self.n_steps)
    }
}

/// A coefficient field `R^in -> R^out`. Evaluation must be pure.
pub trait DriftField: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
    fn lipschitz(&self) -> Option<f64> {
        None
    }
}

/// A coefficient field on the product space, `(x, y) -> R^out`.
pub trait CoupledField: Send + Sync {
    fn x_dim(&self) -> usize;
    fn y_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]);
}

/// Closure-backed [`DriftField`].
pub struct FnField<F> {
    in_dim: usize,
    out_dim: usize,
    lipschitz: Option<f64>,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(in_dim: usize, out_dim: usize, f: F) -> Self {
        Self {
            in_dim,
            out_dim,
            lipschitz: None,
            f,
        }
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = Some(l);
        self
    }
}

impl<F> DriftField for FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn input_dim(&self) -> usize {
        self.in_dim
    }
    fn output_dim(&self) -> usize {
        self.out_dim
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
    fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }
}

/// Closure-backed [`CoupledField`].
pub struct FnCoupled<F> {
    dims: (usize, usize, usize),
    f: F,
}

impl<F> FnCoupled<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(x_dim: usize, y_dim: usize, out_dim: usize, f: F) -> Self {
        Self {
            dims: (x_dim, y_dim, out_dim),
            f,
        }
    }
}

impl<F> CoupledField for FnCoupled<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync,
{
    fn x_dim(&self) -> usize {
        self.dims.0
    }
    fn y_dim(&self) -> usize {
        self.dims.1
    }
    fn output_dim(&self) -> usize {
        self.dims.2
    }
    fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.f)(x, y, out)
    }
}

/// A sample path on a uniform grid. States are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    grid: TimeGrid,
    dim: usize,
    states: Vec<f64>,
}

impl Path {
    pub fn from_states(grid: TimeGrid, dim: usize, states: Vec<f64>) -> Result<Self> {
        if states.len() != (grid.n_steps() + 1) * dim {
            return Err(Error::Dimension {
                expected: (grid.n_steps() + 1) * dim,
                got: states.len(),
            });
        }
        Ok(Self { grid, dim, states })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    #[inline]
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// First coordinate at every node.
    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        self.states.iter().skip(i).step_by(self.dim).copied().collect()
    }

    /// CSV table with columns `t, <prefix>_1 .. <prefix>_d` per path.
    /// All paths must share the grid.
    pub fn to_table(paths: &[(&Path, &str)]) -> Result<CsvTable> {
        let grid = match paths.first() {
            Some((p, _)) => p.grid,
            None => return Err(Error::domain("paths", "nothing to export")),
        };
        let mut header = vec!["t".to_string()];
        for (p, name) in paths {
            if p.grid != grid {
                return Err(Error::GridMismatch);
            }
            header.extend((1..=p.dim).map(|i| format!("{name}_{i}")));
        }
        let rows = (0..=grid.n_steps())
            .map(|k| {
                let mut row = vec![grid.time(k)];
                for (p, _) in paths {
                    row.extend_from_slice(p.state(k));
                }
                row
            })
            .collect();
        CsvTable::new(header, rows)
    }
}

/// Mean of a scalar path functional with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStat {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
}

impl EnsembleStat {
    pub fn from_samples(xs: &[f64]) -> Self {
        let (mean, stderr) = mean_stderr(xs);
        Self {
            mean,
            stderr,
            n_paths: xs.len(),
        }
    }
}

#[inline]
pub(crate) fn check_finite(state: &[f64], step: usize) -> Result<()> {
    if state.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(BlowUp { path: None, step }))
    }
}

/// Euler scheme `X_{k+1} = X_k + drift(X_k) h + dL_k`.
pub fn euler_path(
    drift: &dyn DriftField,
    x0: &[f64],
    grid: &TimeGrid,
    noise: &NoiseIncrements,
) -> Result<Path> {
    let d = x0.len();
    if drift.input_dim() != d || drift.output_dim() != d {
        return Err(Error::Dimension {
            expected: d,
            got: drift.output_dim(),
        });
    }
    if noise.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            got: noise.dim(),
        });
    }
    if noise.len() != grid.n_steps() {
        return Err(Error::domain(
            "noise",
            format!("{} increments for {} steps", noise.len(), grid.n_steps()),
        ));
    }
    let h = grid.step();
    let mut states = Vec::with_capacity((grid.n_steps() + 1) * d);
    states.extend_from_slice(x0);
    check_finite(x0, 0)?;
    let mut buf = vec![0.0; d];
    for k in 0..grid.n_steps() {
        let base = k * d;
        drift.eval(&states[base..base + d], &mut buf);
        let dl = noise.get(k);
        for i in 0..d {
            let next = states[base + i] + buf[i] * h + dl[i];
            states.push(next);
        }
        check_finite(&states[base + d..], k + 1)?;
    }
    Path::from_states(*grid, d, states)
}

/// `(max_k |p1_k - p2_k|)^p` over the grid nodes.
pub fn sup_norm_error(p1: &Path, p2: &Path, p: f64) -> Result<f64> {
    if p1.grid != p2.grid {
        return Err(Error::GridMismatch);
    }
    if p1.dim != p2.dim {
        return Err(Error::Dimension {
            expected: p1.dim,
            got: p2.dim,
        });
    }
    if !(p >= 1.0) {
        return Err(Error::domain("p", format!("{p} must be at least 1")));
    }
    let sup = p1
        .states
        .chunks_exact(p1.dim)
        .zip(p2.states.chunks_exact(p2.dim))
        .map(|(a, b)| distance(a, b))
        .fold(0.0, f64::max);
    Ok(sup.powf(p))
}

#[inline]
pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v) * (u - v))
        .sum::<f64>()
        .sqrt()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|u| u * u).sum::<f64>().sqrt()
}

/// Evaluates `f(i, stream_i)` for every path index on the current rayon
/// pool and returns the results in index order. On failure the error of
/// the smallest failing index is returned, tagged with that index.
pub fn map_paths<T, F>(n_paths: usize, base: RngStream, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, RngStream) -> Result<T> + Sync,
{
    let results: Vec<Result<T>> = (0..n_paths)
        .into_par_iter()
        .map(|i| f(i, base.path(i)).map_err(|e| e.at_path(i)))
        .collect();
    results.into_iter().collect()
}

/// Ensemble mean and standard error of a scalar path functional. Reduction
/// runs in path order, so the result does not depend on the worker count.
pub fn ensemble_mc<F>(functional: F, n_paths: usize, base: RngStream) -> Result<EnsembleStat>
where
    F: Fn(usize, RngStream) -> Result<f64> + Sync,
{
    if n_paths < 2 {
        return Err(Error::domain("n_paths", "need at least two paths"));
    }
    let values = map_paths(n_paths, base, functional)?;
    Ok(EnsembleStat::from_samples(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stable::{increments_on_grid, StableSpec};
    use proptest::prelude::*;

    fn zero_drift(d: usize) -> FnField<impl Fn(&[f64], &mut [f64]) + Send + Sync> {
        FnField::new(d, d, |_x: &[f64], out: &mut [f64]| out.fill(0.0))
    }

    fn linear_drift() -> FnField<impl Fn(&[f64], &mut [f64]) + Send + Sync> {
        FnField::new(1, 1, |x: &[f64], out: &mut [f64]| out[0] = -x[0]).with_lipschitz(1.0)
    }

    #[test]
    fn grid_invariant() {
        for (t, n) in [(1.0, 3), (0.7, 11), (12.0, 4800), (1.0, 12800)] {
            let g = TimeGrid::new(t, n).unwrap();
            assert_eq!(g.step() * g.n_steps() as f64, g.horizon());
            assert!((g.horizon() - t).abs() < 1e-12 * t);
        }
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(-1.0, 4).is_err());
        let g = TimeGrid::with_step(1.0, 0.1).unwrap();
        assert_eq!(g.n_steps(), 10);
    }

    #[test]
    fn zero_drift_is_partial_sums_bitwise() {
        let spec = StableSpec::new(1.5, 2).unwrap();
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let noise = increments_on_grid(&spec, 200, grid.step(), RngStream::new(1)).unwrap();
        let x0 = [0.3, -1.0];
        let path = euler_path(&zero_drift(2), &x0, &grid, &noise).unwrap();
        let mut acc = x0.to_vec();
        for k in 0..200 {
            for (a, dl) in acc.iter_mut().zip(noise.get(k)) {
                *a += dl;
            }
            assert_eq!(path.state(k + 1), acc.as_slice());
        }
    }

    #[test]
    fn deterministic_linear_recursion() {
        let grid = TimeGrid::new(0.2, 2).unwrap();
        let noise = NoiseIncrements::zeros(1, 0.1, 2);
        let path = euler_path(&linear_drift(), &[1.0], &grid, &noise).unwrap();
        assert!((path.state(1)[0] - 0.9).abs() < 1e-15);
        assert!((path.state(2)[0] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn blow_up_is_reported() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let noise = NoiseIncrements::from_raw(1, 0.25, vec![0.0, f64::INFINITY, 0.0, 0.0]).unwrap();
        match euler_path(&zero_drift(1), &[0.0], &grid, &noise) {
            Err(Error::NonFinite(b)) => assert_eq!(b.step, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sup_error_cases() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let a = Path::from_states(grid, 3, vec![1.0; 15]).unwrap();
        assert_eq!(sup_norm_error(&a, &a, 1.0).unwrap(), 0.0);
        let b = Path::from_states(grid, 3, vec![1.5; 15]).unwrap();
        let e = sup_norm_error(&a, &b, 1.0).unwrap();
        assert!((e - 0.5 * 3f64.sqrt()).abs() < 1e-15);
        let other = Path::from_states(TimeGrid::new(1.0, 2).unwrap(), 3, vec![0.0; 9]).unwrap();
        assert!(matches!(sup_norm_error(&a, &other, 1.0), Err(Error::GridMismatch)));
    }

    proptest! {
        #[test]
        fn sup_error_matches_loop(
            xs in prop::collection::vec(-10.0f64..10.0, 12),
            ys in prop::collection::vec(-10.0f64..10.0, 12),
            p in 1.0f64..1.9,
        ) {
            let grid = TimeGrid::new(1.0, 5).unwrap();
            let a = Path::from_states(grid, 2, xs.clone()).unwrap();
            let b = Path::from_states(grid, 2, ys.clone()).unwrap();
            let mut best: f64 = 0.0;
            for k in 0..6 {
                let dx = xs[2 * k] - ys[2 * k];
                let dy = xs[2 * k + 1] - ys[2 * k + 1];
                best = best.max((dx * dx + dy * dy).sqrt());
            }
            let got = sup_norm_error(&a, &b, p).unwrap();
            prop_assert!((got - best.powf(p)).abs() <= 1e-12 * (1.0 + got));
        }
    }

    #[test]
    fn ensemble_constant_and_symmetric() {
        let s = ensemble_mc(|_, _| Ok(1.0), 100, RngStream::new(2)).unwrap();
        assert_eq!((s.mean, s.stderr, s.n_paths), (1.0, 0.0, 100));
        let spec = StableSpec::new(1.5, 1).unwrap();
        let s = ensemble_mc(
            |_, st| Ok(increments_on_grid(&spec, 1, 1.0, st)?.get(0)[0]),
            100_000,
            RngStream::new(3),
        )
        .unwrap();
        assert!(s.mean.abs() < 3.0 * s.stderr, "{s:?}");
        assert!(ensemble_mc(|_, _| Ok(1.0), 1, RngStream::new(2)).is_err());
    }

    #[test]
    fn ensemble_reports_failing_path() {
        let r = ensemble_mc(
            |i, _| {
                if i == 7 || i == 9 {
                    Err(Error::NonFinite(BlowUp { path: None, step: 3 }))
                } else {
                    Ok(0.0)
                }
            },
            20,
            RngStream::new(0),
        );
        match r {
            Err(Error::NonFinite(b)) => assert_eq!(b, BlowUp { path: Some(7), step: 3 }),
            other => panic!("{other:?}"),
        }
    }

    fn abs_endpoints(h_steps: usize, st: RngStream) -> Result<(f64, f64)> {
        // Noise on the fine grid, summed pairwise for the coarse grid.
        let spec = StableSpec::new(1.5, 1).unwrap();
        let fine = TimeGrid::new(1.0, 2 * h_steps)?;
        let noise = increments_on_grid(&spec, 2 * h_steps, fine.step(), st)?;
        let coarse_noise: Vec<f64> = noise.as_slice().chunks(2).map(|c| c[0] + c[1]).collect();
        let coarse = TimeGrid::new(1.0, h_steps)?;
        let c = NoiseIncrements::from_raw(1, coarse.step(), coarse_noise)?;
        let a = euler_path(&linear_drift(), &[1.0], &fine, &noise)?;
        let b = euler_path(&linear_drift(), &[1.0], &coarse, &c)?;
        Ok((a.last()[0].abs(), b.last()[0].abs()))
    }

    #[test]
    fn halving_step_is_stable() {
        let pairs = map_paths(10_000, RngStream::new(4), |_, st| abs_endpoints(20, st)).unwrap();
        let fine: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let coarse: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let (f, c) = (EnsembleStat::from_samples(&fine), EnsembleStat::from_samples(&coarse));
        assert!((f.mean - c.mean).abs() < 3.0 * f.stderr, "{f:?} {c:?}");
    }

    #[test]
    fn deterministic_at_any_worker_count() {
        let spec = StableSpec::new(1.5, 1).unwrap();
        let f = |_, st| Ok(increments_on_grid(&spec, 3, 0.1, st)?.get(2)[0].abs());
        let run = |w| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .unwrap()
                .install(|| ensemble_mc(f, 1000, RngStream::new(5)).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }
}
