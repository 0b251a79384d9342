use std::sync::Arc;

use slowfast_core::oracle::{sigma_scale, OracleParams};
use slowfast_core::rates::{strong_endpoint_curve, strong_error_curve, weak_error_curve, RateExperiment};
use slowfast_core::rng::tag;
use slowfast_core::stable::sample_sym_stable_1d;
use slowfast_core::stats::mean_stderr;
use slowfast_core::{
    map_paths, BbarProvider, CoupledField, Error, FnCoupled, FnField, RngStream, SlowFastSystem, TestProblem,
};

fn field(f: fn(f64, f64) -> f64) -> Arc<dyn CoupledField> {
    Arc::new(FnCoupled::new(1, 1, 1, move |x: &[f64], y: &[f64], o: &mut [f64]| o[0] = f(x[0], y[0])))
}

fn experiment(pb: &TestProblem, eps_list: Vec<f64>, n_paths: usize) -> RateExperiment {
    RateExperiment {
        system: pb.system.clone(),
        bbar: pb.bbar_provider(),
        x0: pb.x0.clone(),
        y0: pb.y0.clone(),
        eps_list,
        p: 1.0,
        horizon: 0.5,
        n_paths,
        steps_per_eps: 50,
        test_function: Some(Arc::new(|x: &[f64]| x[0].cos())),
    }
}

fn dyadic(from: i32, to: i32) -> Vec<f64> {
    (from..=to).map(|k| 2f64.powi(-k)).collect()
}

fn decoupled() -> RateExperiment {
    let sys = SlowFastSystem::new(field(|x, _| -x), field(|_, y| -y), 1.0, 1.5).unwrap();
    RateExperiment {
        system: sys,
        bbar: BbarProvider::Analytic(Arc::new(FnField::new(1, 1, |x: &[f64], o: &mut [f64]| o[0] = -x[0]))),
        x0: vec![1.0],
        y0: vec![0.0],
        eps_list: dyadic(2, 5),
        p: 1.0,
        horizon: 0.5,
        n_paths: 50,
        steps_per_eps: 20,
        test_function: Some(Arc::new(|x: &[f64]| x[0].cos())),
    }
}

#[test]
fn y_independent_drift_gives_identical_paths() {
    let exp = decoupled();
    let strong = strong_error_curve(&exp, RngStream::new(1)).unwrap();
    assert!(strong.points.iter().all(|p| p.error == 0.0));
    let weak = weak_error_curve(&exp, RngStream::new(1)).unwrap();
    assert!(weak.points.iter().all(|p| p.error == 0.0 && p.excluded));
    assert!(matches!(weak.fit(10, RngStream::new(2)), Err(Error::DegenerateFit(_))));
}

#[test]
fn constant_test_function_has_no_weak_error() {
    let pb = TestProblem::by_name("bounded", 1.5).unwrap();
    let mut exp = experiment(&pb, dyadic(2, 5), 50);
    exp.test_function = Some(Arc::new(|_: &[f64]| 1.0));
    let weak = weak_error_curve(&exp, RngStream::new(3)).unwrap();
    assert!(weak.points.iter().all(|p| p.error == 0.0));
}

#[test]
fn experiment_preconditions() {
    let pb = TestProblem::by_name("linear", 1.5).unwrap();
    let mut exp = experiment(&pb, dyadic(2, 4), 10);
    assert!(matches!(strong_error_curve(&exp, RngStream::new(4)), Err(Error::Domain { .. })));
    exp.eps_list = vec![0.25, 0.125, 0.125, 0.0625];
    assert!(matches!(strong_error_curve(&exp, RngStream::new(4)), Err(Error::Domain { .. })));
    exp.eps_list = dyadic(2, 5);
    exp.p = 1.5;
    assert!(matches!(strong_error_curve(&exp, RngStream::new(4)), Err(Error::Domain { .. })));
    exp.p = 1.0;
    exp.steps_per_eps = 10;
    assert!(matches!(strong_error_curve(&exp, RngStream::new(4)), Err(Error::Stiffness { .. })));
    exp.steps_per_eps = 50;
    exp.test_function = None;
    assert!(weak_error_curve(&exp, RngStream::new(4)).is_err());
}

#[test]
fn strong_error_monotone_in_eps() {
    let pb = TestProblem::by_name("linear", 1.5).unwrap();
    let exp = experiment(&pb, dyadic(2, 6), 2000);
    let c = strong_error_curve(&exp, RngStream::new(5)).unwrap();
    for w in c.points.windows(2) {
        assert!(w[1].error <= w[0].error + 2.0 * (w[0].stderr + w[1].stderr), "{w:?}");
    }
}

#[test]
fn finer_step_barely_moves_strong_error() {
    let pb = TestProblem::by_name("linear", 1.5).unwrap();
    let coarse = experiment(&pb, dyadic(2, 5), 10_000);
    let fine = RateExperiment { steps_per_eps: 100, ..experiment(&pb, dyadic(2, 5), 10_000) };
    let a = strong_error_curve(&coarse, RngStream::new(6)).unwrap();
    let b = strong_error_curve(&fine, RngStream::new(6)).unwrap();
    for (p, q) in a.points.iter().zip(&b.points) {
        assert!((p.error - q.error).abs() < 0.1 * p.error, "{p:?} vs {q:?}");
    }
}

#[test]
fn dropping_largest_eps_keeps_slope_within_interval() {
    let pb = TestProblem::by_name("linear", 1.5).unwrap();
    let exp = experiment(&pb, dyadic(2, 6), 2000);
    let c = strong_error_curve(&exp, RngStream::new(7)).unwrap();
    let full = c.fit(1000, RngStream::new(8)).unwrap();
    let mut trimmed = c.clone();
    trimmed.points.remove(0);
    trimmed.samples.remove(0);
    let cut = trimmed.fit(1000, RngStream::new(8)).unwrap();
    let half = 0.5 * (full.ci_high - full.ci_low);
    assert!((full.slope - cut.slope).abs() < half, "{full:?} {cut:?}");
    assert!(full.ci_low <= full.slope && full.slope <= full.ci_high);
    assert!((0.0..=1.0).contains(&full.r_squared));
}

#[test]
fn example_endpoint_error_matches_oracle_moment() {
    let alpha = 1.5;
    let pb = TestProblem::by_name("example", alpha).unwrap();
    let mut exp = experiment(&pb, dyadic(2, 5), 10_000);
    exp.horizon = 1.0;
    let curve = strong_endpoint_curve(&exp, RngStream::new(9)).unwrap();
    // E|Z|^p = C sigma^p with C = E|S| from direct standard stable draws.
    let draws = map_paths(200_000, RngStream::new(10).child(tag::INNER, 0), |_, st| {
        Ok(sample_sym_stable_1d(alpha, &mut st.rng())?.abs())
    })
    .unwrap();
    let (c, c_se) = mean_stderr(&draws);
    for p in &curve.points {
        let sigma = sigma_scale(&OracleParams::new(alpha, p.eps, 1.0, 1.0).unwrap());
        let expected = c * sigma;
        let se = (p.stderr.powi(2) + (c_se * sigma).powi(2)).sqrt();
        assert!((p.error - expected).abs() < 3.0 * se, "eps {}: {} vs {expected} (se {se})", p.eps, p.error);
    }
}

#[test]
fn curve_table_schema() {
    let exp = decoupled();
    let c = strong_error_curve(&exp, RngStream::new(11)).unwrap();
    let t = c.to_table();
    assert_eq!(t.header, vec!["eps", "error", "stderr", "n_paths", "h"]);
    let parsed = slowfast_core::CsvTable::parse(&t.to_csv_string()).unwrap();
    assert_eq!(parsed, t);
}
