//! Named scalar test problems with closed-form averaged drift.
//!
//! | name      | `b(x, y)`             | `f(x, y)` | `bbar(x)`                |
//! |-----------|-----------------------|-----------|--------------------------|
//! | `linear`  | `-x + y`              | `x - y`   | `0`                      |
//! | `example` | `y`                   | `-y`      | `0`                      |
//! | `bounded` | `-sin x + 2 sin y`    | `-y`      | `-sin x`                 |
//! | `coupled` | `sin y`               | `x - y`   | `e^(-1/alpha) sin x`     |
//!
//! All have dissipativity constant `beta = 1`. The invariant law of the
//! frozen dynamics at `x` is `x + S` (or `S`) with `S` symmetric stable of
//! scale `(1/alpha)^(1/alpha)`, which gives the averaged drifts above.
//! In `example` the slow error `X^eps_t - Xbar_t` is the area under the
//! fast path, for which [`crate::oracle`] has the exact law.

use std::sync::Arc;

use crate::averaging::BbarProvider;
use crate::engine::{CoupledField, DriftField, FnCoupled, FnField};
use crate::error::{Error, Result};
use crate::multiscale::SlowFastSystem;

pub const NAMES: [&str; 4] = ["linear", "example", "bounded", "coupled"];

/// Amplitude of the fast forcing in `bounded`.
const BOUNDED_AMPLITUDE: f64 = 2.0;

#[derive(Clone)]
pub struct TestProblem {
    pub name: &'static str,
    pub system: SlowFastSystem,
    pub bbar: Arc<dyn DriftField>,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
}

impl std::fmt::Debug for TestProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TestProblem")
            .field("name", &self.name)
            .field("alpha", &self.system.alpha())
            .finish()
    }
}

fn coupled(f: fn(f64, f64) -> f64) -> Arc<dyn CoupledField> {
    Arc::new(FnCoupled::new(1, 1, 1, move |x: &[f64], y: &[f64], o: &mut [f64]| {
        o[0] = f(x[0], y[0])
    }))
}

impl TestProblem {
    pub fn by_name(name: &str, alpha: f64) -> Result<Self> {
        let (name, b, f, bbar): (&'static str, _, _, Arc<dyn DriftField>) = match name {
            "linear" => (
                "linear",
                coupled(|x, y| -x + y),
                coupled(|x, y| x - y),
                Arc::new(FnField::new(1, 1, |_: &[f64], o: &mut [f64]| o[0] = 0.0).with_lipschitz(0.0)),
            ),
            "example" => (
                "example",
                coupled(|_, y| y),
                coupled(|_, y| -y),
                Arc::new(FnField::new(1, 1, |_: &[f64], o: &mut [f64]| o[0] = 0.0).with_lipschitz(0.0)),
            ),
            "bounded" => (
                "bounded",
                coupled(|x, y| -x.sin() + BOUNDED_AMPLITUDE * y.sin()),
                coupled(|_, y| -y),
                Arc::new(FnField::new(1, 1, |x: &[f64], o: &mut [f64]| o[0] = -x[0].sin()).with_lipschitz(1.0)),
            ),
            "coupled" => {
                let c = (-1.0 / alpha).exp();
                (
                    "coupled",
                    coupled(|_, y| y.sin()),
                    coupled(|x, y| x - y),
                    Arc::new(FnField::new(1, 1, move |x: &[f64], o: &mut [f64]| o[0] = c * x[0].sin()).with_lipschitz(c)),
                )
            }
            other => {
                return Err(Error::domain(
                    "problem",
                    format!("unknown problem {other:?}; expected one of {}", NAMES.join(", ")),
                ))
            }
        };
        Ok(Self {
            name,
            system: SlowFastSystem::new(b, f, 1.0, alpha)?,
            bbar,
            x0: vec![0.0],
            y0: vec![0.0],
        })
    }

    pub fn bbar_provider(&self) -> BbarProvider {
        BbarProvider::Analytic(self.bbar.clone())
    }
}
