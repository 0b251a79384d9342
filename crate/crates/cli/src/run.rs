//! Dispatch of a resolved configuration to the core modules.

use std::sync::Arc;
use std::time::Instant;

use serde_json::{json, Value};
use slowfast_core::averaging::{simulate_averaged, simulate_frozen, tabulate_bbar};
use slowfast_core::multiscale::simulate_slow_fast;
use slowfast_core::oracle::{oracle_moment_check, OracleCheck};
use slowfast_core::poisson::corrector_scan;
use slowfast_core::rates::{strong_error_curve, weak_error_curve, TestFunction};
use slowfast_core::rng::tag;
use slowfast_core::stable::characteristic_function;
use slowfast_core::validation::{run_criterion, CriterionReport, Scale, Status, CRITERIA};
use slowfast_core::{
    CorrectorSettings, CsvTable, FrozenSpec, MultiscaleRun, Path, PoissonProblem, RateCurve, RateExperiment,
    RngStream, StableSpec, TestProblem, TimeGrid,
};

use crate::config::{Config, Kind};

pub const BUILD_ID: &str = env!("SLOWFAST_BUILD_ID");

#[derive(Debug)]
pub enum RunError {
    Core(slowfast_core::Error),
    Io(std::io::Error),
}

impl From<slowfast_core::Error> for RunError {
    fn from(e: slowfast_core::Error) -> Self {
        RunError::Core(e)
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Core(e) => e.fmt(f),
            RunError::Io(e) => e.fmt(f),
        }
    }
}

/// What a run produced. `failed` counts failing validation criteria,
/// which are printed as they finish.
pub struct Outcome {
    pub table: Option<CsvTable>,
    pub results: Value,
    pub failed: usize,
}

impl Outcome {
    fn data(table: CsvTable, results: Value) -> Self {
        Self {
            table: Some(table),
            results,
            failed: 0,
        }
    }
}

pub struct Artifacts {
    pub csv: Option<std::path::PathBuf>,
    pub summary: std::path::PathBuf,
    pub outcome: Outcome,
}

/// Runs the experiment and writes `<kind>.csv` and `<kind>.json` into the
/// output directory.
pub fn run(config: &Config) -> Result<Artifacts, RunError> {
    let start = Instant::now();
    let outcome = match config.params.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| std::io::Error::other(e.to_string()))?
            .install(|| dispatch(config))?,
        None => dispatch(config)?,
    };
    let runtime_s = start.elapsed().as_secs_f64();

    std::fs::create_dir_all(&config.output_dir)?;
    let csv = match &outcome.table {
        Some(t) => {
            let path = config.output_dir.join(format!("{}.csv", config.kind));
            t.save(&path)?;
            Some(path)
        }
        None => None,
    };
    let summary = json!({
        "experiment": config.kind.name(),
        "config": config.summary_json(),
        "results": outcome.results,
        "runtime_s": runtime_s,
        "seed": config.seed(),
        "build_id": BUILD_ID,
    });
    let summary_path = config.output_dir.join(format!("{}.json", config.kind));
    let text = serde_json::to_string_pretty(&summary).map_err(std::io::Error::other)?;
    std::fs::write(&summary_path, text + "\n")?;
    Ok(Artifacts {
        csv,
        summary: summary_path,
        outcome,
    })
}

fn dispatch(c: &Config) -> Result<Outcome, RunError> {
    let root = RngStream::new(c.seed());
    match c.kind {
        Kind::Sample => sample(c, root),
        Kind::Simulate => simulate(c, root),
        Kind::Frozen => frozen(c, root),
        Kind::Bbar => bbar(c, root),
        Kind::StrongRate | Kind::WeakRate => rate(c, root),
        Kind::Poisson => poisson(c, root),
        Kind::Oracle => oracle(c, root),
        Kind::Validate => Ok(validate(c)),
    }
}

fn problem(c: &Config) -> Result<TestProblem, RunError> {
    Ok(TestProblem::by_name(c.params.problem.as_deref().unwrap_or("linear"), alpha(c))?)
}

fn alpha(c: &Config) -> f64 {
    c.params.alpha.expect("alpha is required for every data kind")
}

fn sample(c: &Config, root: RngStream) -> Result<Outcome, RunError> {
    let p = &c.params;
    let (dim, dt, n) = (p.dim.unwrap_or(1), p.dt.unwrap_or(1.0), p.n_paths.unwrap_or(2));
    let spec = StableSpec::new(alpha(c), dim)?;
    let mut rng = root.child(tag::EXPERIMENT, 0).rng();
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = vec![0.0; dim];
        spec.fill(dt, &mut rng, &mut v);
        rows.push(v);
    }
    let cf: Vec<Value> = [0.5, 1.0, 2.0]
        .iter()
        .map(|&u| {
            let empirical = rows.iter().map(|r| (u * r[0]).cos()).sum::<f64>() / n as f64;
            json!({ "freq": u, "empirical": empirical, "exact": characteristic_function(alpha(c), dt, u) })
        })
        .collect();
    let header = (1..=dim).map(|i| format!("x_{i}")).collect();
    Ok(Outcome::data(
        CsvTable::new(header, rows)?,
        json!({ "n": n, "dim": dim, "dt": dt, "characteristic_function": cf }),
    ))
}

fn simulate(c: &Config, root: RngStream) -> Result<Outcome, RunError> {
    let pb = problem(c)?;
    let p = &c.params;
    let eps = p.eps.unwrap_or(0.0625);
    let horizon = p.horizon.unwrap_or(1.0);
    let n = (horizon / eps * c.steps_per_eps() as f64).round().max(1.0) as usize;
    let grid = TimeGrid::new(horizon, n)?;
    let run = MultiscaleRun::new(
        pb.system.clone(),
        eps,
        grid,
        vec![p.x.unwrap_or(0.0)],
        vec![p.y.unwrap_or(0.0)],
    )?;
    let (x, y) = simulate_slow_fast(&run, root, None)?;
    let xbar = simulate_averaged(&pb.bbar_provider(), &grid, &run.x0, &run.slow_increments(root)?)?;
    let sup = (0..x.len())
        .map(|k| (x.state(k)[0] - xbar.state(k)[0]).abs())
        .fold(0.0, f64::max);
    let results = json!({
        "eps": eps,
        "h": grid.step(),
        "n_steps": grid.n_steps(),
        "final_x": x.last()[0],
        "final_y": y.last()[0],
        "final_xbar": xbar.last()[0],
        "sup_abs_error": sup,
    });
    Ok(Outcome::data(Path::to_table(&[(&x, "x"), (&y, "y"), (&xbar, "xbar")])?, results))
}

fn frozen(c: &Config, root: RngStream) -> Result<Outcome, RunError> {
    let pb = problem(c)?;
    let p = &c.params;
    let x = p.x.unwrap_or(0.0);
    let spec = FrozenSpec::from_system(&pb.system, &[x])?;
    let grid = TimeGrid::with_step(p.horizon.unwrap_or(10.0), p.dt.unwrap_or(0.01))?;
    let path = simulate_frozen(&spec, &[p.y.unwrap_or(0.0)], &grid, root)?;
    let ys = path.coordinate(0);
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let results = json!({ "x": x, "n_steps": grid.n_steps(), "final_y": ys[ys.len() - 1], "time_mean_y": mean });
    Ok(Outcome::data(Path::to_table(&[(&path, "y")])?, results))
}

fn bbar(c: &Config, root: RngStream) -> Result<Outcome, RunError> {
    let pb = problem(c)?;
    let p = &c.params;
    let (lo, hi, n) = (p.x_min.unwrap_or(-3.0), p.x_max.unwrap_or(3.0), p.n_x.unwrap_or(13));
    let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let grid = TimeGrid::with_step(p.horizon.unwrap_or(50.0), p.dt.unwrap_or(0.01))?;
    let table = tabulate_bbar(
        &pb.system,
        &xs,
        &grid,
        p.burn_in.unwrap_or(10.0),
        p.n_reps.unwrap_or(100),
        root,
    )?;
    let mut exact = [0.0];
    let mut max_dev: f64 = 0.0;
    for &x in &xs {
        pb.bbar.eval(&[x], &mut exact);
        max_dev = max_dev.max((table.eval(x)? - exact[0]).abs());
    }
    let results = json!({
        "n_x": n,
        "max_stderr": table.max_stderr(),
        "max_abs_deviation_from_closed_form": max_dev,
    });
    Ok(Outcome::data(table.to_table(), results))
}

fn test_function(name: &str) -> TestFunction {
    match name {
        "sin" => Arc::new(|x: &[f64]| x[0].sin()),
        "atan" => Arc::new(|x: &[f64]| x[0].atan()),
        _ => Arc::new(|x: &[f64]| x[0].cos()),
    }
}

fn rate(c: &Config, root: RngStream) -> Result<Outcome, RunError> {
    let pb = problem(c)?;
    let p = &c.params;
    let strong = c.kind == Kind::StrongRate;
    let exp = RateExperiment {
        bbar: pb.bbar_provider(),
        system: pb.system.clone(),
        x0: pb.x0.clone(),
        y0: pb.y0.clone(),
        eps_list: p.eps_list.clone().unwrap_or_default(),
        p: p.p.unwrap_or(1.0),
        horizon: p.horizon.unwrap_or(1.0),
        n_paths: p.n_paths.unwrap_or(1000),
        steps_per_eps: c.steps_per_eps(),
        test_function: (!strong).then(|| test_function(p.phi.as_deref().unwrap_or("cos"))),
    };
    let curve: RateCurve = if strong {
        strong_error_curve(&exp, root)?
    } else {
        weak_error_curve(&exp, root)?
    };
    let mut warnings = curve.warnings.clone();
    let fit = match curve.fit(p.n_bootstrap.unwrap_or(1000), root.child(tag::BOOTSTRAP, 0)) {
        Ok(f) => Some(f),
        Err(slowfast_core::Error::DegenerateFit(why)) => {
            warnings.push(format!("no fit: {why}"));
            None
        }
        Err(e) => return Err(e.into()),
    };
    let results = json!({ "points": curve.points, "fit": fit, "warnings": warnings });
    Ok(Outcome::data(curve.to_table(), results))
}

fn poisson(c: &Config, root: RngStream) -> Result<Outcome, RunError> {
    let pb = problem(c)?;
    let p = &c.params;
    let bbar = pb.bbar_provider();
    let problem = PoissonProblem {
        system: &pb.system,
        bbar: &bbar,
    };
    let mut settings = CorrectorSettings::new(p.tol.unwrap_or(0.01), p.n_paths.unwrap_or(2000));
    if let Some(dt) = p.dt {
        settings = settings.with_dt(dt);
    }
    let x = p.x.unwrap_or(0.0);
    let ys = p.y_list.clone().unwrap_or_default();
    let table = corrector_scan(&problem, &[x], &ys, &settings, root)?;
    let phi = table.column("phi_1").unwrap_or_default();
    let stderr = table.column("stderr_1").unwrap_or_default();
    let results = json!({ "x": x, "y": ys, "phi": phi, "stderr": stderr, "tol": settings.tol });
    Ok(Outcome::data(table, results))
}

fn oracle(c: &Config, root: RngStream) -> Result<Outcome, RunError> {
    let p = &c.params;
    let check = OracleCheck {
        alpha: alpha(c),
        p: p.p.unwrap_or(1.0),
        t: p.horizon.unwrap_or(1.0),
        eps_list: p.eps_list.clone().unwrap_or_default(),
        n_paths: p.n_paths.unwrap_or(10_000),
        steps_per_eps: c.steps_per_eps(),
        n_bootstrap: p.n_bootstrap.unwrap_or(1000),
    };
    let report = oracle_moment_check(&check, root)?;
    let (spread, max_rel_se) = report.ratio_spread();
    let results = json!({
        "rows": report.rows,
        "direct_constant": report.direct_constant,
        "fit": report.fit,
        "ratio_spread": spread,
        "max_ratio_rel_stderr": max_rel_se,
    });
    Ok(Outcome::data(report.to_table(), results))
}

fn validate(c: &Config) -> Outcome {
    let scale = if c.params.quick == Some(true) {
        Scale::Quick
    } else {
        Scale::Full
    };
    let reports: Vec<CriterionReport> = CRITERIA
        .iter()
        .filter_map(|&(id, _)| {
            let r = run_criterion(id, scale, c.seed());
            if let Some(r) = &r {
                println!("{r}");
            }
            r
        })
        .collect();
    let failed = reports.iter().filter(|r| r.status == Status::Fail).count();
    Outcome {
        table: None,
        results: json!({ "scale": scale, "failed": failed, "criteria": reports }),
        failed,
    }
}
