//! Monte Carlo laboratory for slow-fast stochastic differential equations
//! driven by symmetric alpha-stable Lévy noise, `1 < alpha < 2`.
//!
//! The crate simulates the coupled system and its averaged equation,
//! estimates invariant-measure functionals of the frozen fast dynamics,
//! builds the Poisson-equation corrector by simulation, and measures
//! strong and weak convergence rates in the scale parameter.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod averaging;
pub mod engine;
pub mod error;
pub mod io;
pub mod multiscale;
pub mod oracle;
pub mod poisson;
pub mod problems;
pub mod rates;
pub mod rng;
pub mod stable;
pub mod stats;
pub mod validation;

pub use averaging::{BbarProvider, BbarTable, FrozenSpec};
pub use engine::{
    ensemble_mc, euler_path, map_paths, sup_norm_error, CoupledField, DriftField, EnsembleStat,
    FnCoupled, FnField, Path, TimeGrid,
};
pub use error::{Error, Result};
pub use io::CsvTable;
pub use multiscale::{MultiscaleRun, SlowFastSystem};
pub use poisson::{CorrectorSettings, PoissonProblem, PoissonSolution};
pub use problems::TestProblem;
pub use rates::{CurvePoint, RateCurve, RateExperiment, RateFit};
pub use rng::RngStream;
pub use stable::{NoiseIncrements, StableSpec};
