//! The coupled slow-fast system
//!
//! ```text
//! dX = b(X, Y) dt + dL1
//! dY = f(X, Y) / eps dt + eps^(-1/alpha) dL2
//! ```
//!
//! discretised with explicit Euler on a grid with `h <= eps / 20`.

use std::sync::Arc;

use rand::Rng;

use crate::engine::{check_finite, map_paths, CoupledField, EnsembleStat, Path, TimeGrid};
use crate::error::{check_positive, Error, Result};
use crate::rng::{tag, RngStream};
use crate::stable::{increments_on_grid, NoiseIncrements, StableSpec};
use crate::stats::ks_two_sample;

/// Largest admissible `h / eps` for the explicit fast step.
pub const MAX_FAST_STEP_RATIO: f64 = 1.0 / 20.0;

const SPOT_CHECKS: usize = 1000;
const SPOT_BOX: f64 = 10.0;

#[derive(Clone)]
pub struct SlowFastSystem {
    b: Arc<dyn CoupledField>,
    f: Arc<dyn CoupledField>,
    beta: f64,
    slow_noise: StableSpec,
    fast_noise: StableSpec,
}

impl std::fmt::Debug for SlowFastSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlowFastSystem")
            .field("d1", &self.d1())
            .field("d2", &self.d2())
            .field("beta", &self.beta)
            .field("alpha", &self.alpha())
            .finish()
    }
}

/// Spot-checks `<f(x,y1) - f(x,y2), y1 - y2> <= -beta |y1 - y2|^2` and
/// boundedness of `f(x, 0)` on random points of a box.
pub(crate) fn check_dissipative(
    f: &dyn CoupledField,
    beta: f64,
    x_fixed: Option<&[f64]>,
) -> Result<()> {
    let (d1, d2) = (f.x_dim(), f.y_dim());
    let mut rng = RngStream::with_stream(0x5eed, 0xd155).rng();
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| rng.random_range(-SPOT_BOX..SPOT_BOX))
            .collect()
    };
    let (mut f1, mut f2) = (vec![0.0; d2], vec![0.0; d2]);
    let zero = vec![0.0; d2];
    for _ in 0..SPOT_CHECKS {
        let x = match x_fixed {
            Some(x) => x.to_vec(),
            None => draw(d1),
        };
        let y1 = draw(d2);
        let y2 = draw(d2);
        f.eval(&x, &y1, &mut f1);
        f.eval(&x, &y2, &mut f2);
        let dy2: f64 = y1.iter().zip(&y2).map(|(a, b)| (a - b) * (a - b)).sum();
        let inner: f64 = (0..d2).map(|i| (f1[i] - f2[i]) * (y1[i] - y2[i])).sum();
        if inner > -beta * dy2 + 1e-9 * (1.0 + dy2) {
            return Err(Error::domain(
                "f",
                format!("not {beta}-dissipative at x = {x:?}, y1 = {y1:?}, y2 = {y2:?}"),
            ));
        }
        f.eval(&x, &zero, &mut f1);
        if !f1.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("f", format!("f(x, 0) is not finite at x = {x:?}")));
        }
    }
    Ok(())
}

impl SlowFastSystem {
    pub fn new(
        b: Arc<dyn CoupledField>,
        f: Arc<dyn CoupledField>,
        beta: f64,
        alpha: f64,
    ) -> Result<Self> {
        let (d1, d2) = (b.x_dim(), b.y_dim());
        if b.output_dim() != d1 {
            return Err(Error::Dimension {
                expected: d1,
                got: b.output_dim(),
            });
        }
        if f.x_dim() != d1 || f.y_dim() != d2 || f.output_dim() != d2 {
            return Err(Error::Dimension {
                expected: d2,
                got: f.output_dim(),
            });
        }
        check_positive("beta", beta)?;
        check_dissipative(f.as_ref(), beta, None)?;
        Ok(Self {
            b,
            f,
            beta,
            slow_noise: StableSpec::new(alpha, d1)?,
            fast_noise: StableSpec::new(alpha, d2)?,
        })
    }

    pub fn d1(&self) -> usize {
        self.slow_noise.dim()
    }

    pub fn d2(&self) -> usize {
        self.fast_noise.dim()
    }

    pub fn alpha(&self) -> f64 {
        self.slow_noise.alpha()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn slow_noise(&self) -> &StableSpec {
        &self.slow_noise
    }

    pub fn fast_noise(&self) -> &StableSpec {
        &self.fast_noise
    }

    pub fn b(&self) -> &Arc<dyn CoupledField> {
        &self.b
    }

    pub fn f(&self) -> &Arc<dyn CoupledField> {
        &self.f
    }
}

#[derive(Debug, Clone)]
pub struct MultiscaleRun {
    pub system: SlowFastSystem,
    epsilon: f64,
    grid: TimeGrid,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
}

pub(crate) fn check_stiffness(h: f64, time_scale: f64) -> Result<()> {
    let limit = time_scale * MAX_FAST_STEP_RATIO;
    if h > limit * (1.0 + 1e-12) {
        Err(Error::Stiffness { h, limit })
    } else {
        Ok(())
    }
}

impl MultiscaleRun {
    pub fn new(
        system: SlowFastSystem,
        epsilon: f64,
        grid: TimeGrid,
        x0: Vec<f64>,
        y0: Vec<f64>,
    ) -> Result<Self> {
        check_positive("epsilon", epsilon)?;
        check_stiffness(grid.step(), epsilon)?;
        if x0.len() != system.d1() {
            return Err(Error::Dimension {
                expected: system.d1(),
                got: x0.len(),
            });
        }
        if y0.len() != system.d2() {
            return Err(Error::Dimension {
                expected: system.d2(),
                got: y0.len(),
            });
        }
        Ok(Self {
            system,
            epsilon,
            grid,
            x0,
            y0,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Slow-noise increments this run consumes for stream `rng` when no
    /// shared noise is supplied.
    pub fn slow_increments(&self, rng: RngStream) -> Result<NoiseIncrements> {
        increments_on_grid(
            &self.system.slow_noise,
            self.grid.n_steps(),
            self.grid.step(),
            rng.child(tag::SLOW, 0),
        )
    }
}

/// Simulates `(X, Y)`. With `shared_slow_noise` the slow equation is driven
/// by the given increments (synchronous coupling with another equation);
/// otherwise by the slow child stream of `rng`. The fast noise always comes
/// from the fast child stream of `rng`.
pub fn simulate_slow_fast(
    run: &MultiscaleRun,
    rng: RngStream,
    shared_slow_noise: Option<&NoiseIncrements>,
) -> Result<(Path, Path)> {
    let sys = &run.system;
    let (d1, d2) = (sys.d1(), sys.d2());
    let grid = run.grid;
    let n = grid.n_steps();
    let h = grid.step();
    check_stiffness(h, run.epsilon)?;

    let owned;
    let slow = match shared_slow_noise {
        Some(s) => {
            if s.len() != n || s.dim() != d1 {
                return Err(Error::domain(
                    "shared_slow_noise",
                    format!("{} x {} increments for a {n}-step grid in dimension {d1}", s.len(), s.dim()),
                ));
            }
            s
        }
        None => {
            owned = run.slow_increments(rng)?;
            &owned
        }
    };

    let mut fast_rng = rng.child(tag::FAST, 0).rng();
    let fast_scale = run.epsilon.powf(-1.0 / sys.alpha());
    let ratio = h / run.epsilon;

    let mut xs = Vec::with_capacity((n + 1) * d1);
    let mut ys = Vec::with_capacity((n + 1) * d2);
    xs.extend_from_slice(&run.x0);
    ys.extend_from_slice(&run.y0);
    let mut bx = vec![0.0; d1];
    let mut fy = vec![0.0; d2];
    let mut dl2 = vec![0.0; d2];
    for k in 0..n {
        let (xk, yk) = (&xs[k * d1..(k + 1) * d1], &ys[k * d2..(k + 1) * d2]);
        sys.b.eval(xk, yk, &mut bx);
        sys.f.eval(xk, yk, &mut fy);
        sys.fast_noise.fill(h, &mut fast_rng, &mut dl2);
        let dl1 = slow.get(k);
        for i in 0..d1 {
            xs.push(xs[k * d1 + i] + bx[i] * h + dl1[i]);
        }
        for i in 0..d2 {
            ys.push(ys[k * d2 + i] + ratio * fy[i] + fast_scale * dl2[i]);
        }
        check_finite(&xs[(k + 1) * d1..], k + 1)?;
        check_finite(&ys[(k + 1) * d2..], k + 1)?;
    }
    Ok((
        Path::from_states(grid, d1, xs)?,
        Path::from_states(grid, d2, ys)?,
    ))
}

/// Fast chain with the slow state frozen at `x`, run for `n_steps` steps
/// of size `h` on time scale `eps`; returns the endpoint.
#[allow(clippy::too_many_arguments)]
fn frozen_fast_endpoint<R: Rng + ?Sized>(
    sys: &SlowFastSystem,
    x: &[f64],
    y0: &[f64],
    eps: f64,
    h: f64,
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let d2 = sys.d2();
    let scale = eps.powf(-1.0 / sys.alpha());
    let ratio = h / eps;
    let mut y = y0.to_vec();
    let mut fy = vec![0.0; d2];
    let mut dl = vec![0.0; d2];
    for k in 0..n_steps {
        sys.f.eval(x, &y, &mut fy);
        sys.fast_noise.fill(h, rng, &mut dl);
        for i in 0..d2 {
            y[i] += ratio * fy[i] + scale * dl[i];
        }
        check_finite(&y, k + 1)?;
    }
    Ok(y)
}

/// Parameters of the time-rescaling comparison.
#[derive(Debug, Clone)]
pub struct RescaleCheck {
    /// Frozen slow state.
    pub x: Vec<f64>,
    pub y0: Vec<f64>,
    pub epsilon: f64,
    /// Time on the fast clock; `Y^eps` is observed at slow time `t * eps`.
    pub t: f64,
    pub n: usize,
    /// Euler steps per unit of fast time (`eps / h`), at least 20.
    pub steps_per_unit: usize,
}

/// Two-sample KS distance between the first coordinate of `Y^eps` at slow
/// time `t eps` and of the unit-scale process `Y~` at time `t`, both with
/// the slow state frozen. These have the same law.
pub fn rescaled_fast_law_check(
    system: &SlowFastSystem,
    check: &RescaleCheck,
    rng: RngStream,
) -> Result<f64> {
    rescaled_fast_law_check_vs(system, system, check, rng)
}

/// As [`rescaled_fast_law_check`], with `Y~` driven by `reference` (negative
/// controls use a mismatched drift there).
pub fn rescaled_fast_law_check_vs(
    system: &SlowFastSystem,
    reference: &SlowFastSystem,
    check: &RescaleCheck,
    rng: RngStream,
) -> Result<f64> {
    check_positive("epsilon", check.epsilon)?;
    if check.t < 0.0 {
        return Err(Error::domain("t", "must be non-negative"));
    }
    if check.n < 1 {
        return Err(Error::domain("n", "need at least one sample"));
    }
    if (check.steps_per_unit as f64) < 1.0 / MAX_FAST_STEP_RATIO {
        return Err(Error::Stiffness {
            h: 1.0 / check.steps_per_unit as f64,
            limit: MAX_FAST_STEP_RATIO,
        });
    }
    if system.d2() != reference.d2() || check.y0.len() != system.d2() {
        return Err(Error::Dimension {
            expected: system.d2(),
            got: check.y0.len(),
        });
    }
    let n_steps = (check.t * check.steps_per_unit as f64).round() as usize;
    let unit_h = 1.0 / check.steps_per_unit as f64;
    let eps = check.epsilon;

    let fast = map_paths(check.n, rng.child(tag::FAST, 0), |_, st| {
        let y = frozen_fast_endpoint(system, &check.x, &check.y0, eps, unit_h * eps, n_steps, &mut st.rng())?;
        Ok(y[0])
    })?;
    let unit = map_paths(check.n, rng.child(tag::FROZEN, 0), |_, st| {
        let y = frozen_fast_endpoint(reference, &check.x, &check.y0, 1.0, unit_h, n_steps, &mut st.rng())?;
        Ok(y[0])
    })?;
    Ok(ks_two_sample(&fast, &unit))
}

/// `E|Y_t|^p` of the coupled system at each requested (slow) time.
pub fn fast_moment_bound_scan(
    run: &MultiscaleRun,
    p: f64,
    times: &[f64],
    n_paths: usize,
    rng: RngStream,
) -> Result<Vec<EnsembleStat>> {
    let alpha = run.system.alpha();
    if !(1.0..alpha).contains(&p) {
        return Err(Error::domain("p", format!("{p} outside [1, {alpha})")));
    }
    if n_paths < 2 {
        return Err(Error::domain("n_paths", "need at least two paths"));
    }
    let grid = run.grid();
    if let Some(t) = times.iter().find(|&&t| t < 0.0 || t > grid.horizon() * (1.0 + 1e-12)) {
        return Err(Error::domain("times", format!("{t} outside the simulated horizon")));
    }
    let nodes: Vec<usize> = times.iter().map(|&t| grid.node(t)).collect();
    let per_path = map_paths(n_paths, rng, |_, st| {
        let (_, y) = simulate_slow_fast(run, st, None)?;
        Ok(nodes
            .iter()
            .map(|&k| crate::engine::norm(y.state(k)).powf(p))
            .collect::<Vec<f64>>())
    })?;
    Ok((0..times.len())
        .map(|j| {
            let col: Vec<f64> = per_path.iter().map(|v| v[j]).collect();
            EnsembleStat::from_samples(&col)
        })
        .collect())
}
