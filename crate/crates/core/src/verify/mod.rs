//! Verification: finite-difference gradient checks, brute-force reference
//! implementations and the check batteries run by tests and the CLI.

pub mod experiments;
pub mod gradcheck;
pub mod oracles;
pub mod reference;
pub mod suite;

pub use gradcheck::{gradcheck, relative_error, GradCheck, GradCheckOptions};
pub use suite::{gradcheck_model_config, gradient_suite, model_gradcheck, oracle_suite, CheckResult, GRAD_TOL, METRIC_TOL, ORACLE_TOL};
