//! Moment-based estimation for three-level meta-analysis of standardized
//! mean differences, with a REML baseline and a Monte Carlo harness.

pub mod linalg;
pub mod model;
pub mod moment;
pub mod optim;
pub mod qform;
pub mod reml;
pub mod simulate;
pub mod smd;

pub use model::{read_csv, Cluster, Dataset, ModelError, StudySummary, WeightSpec};
pub use moment::{fit_ssw, fit_with_weights, MomentError, MomentFit, MomentOptions};
pub use qform::{davies_cdf, het_test, invert_ci, QFormError, QFormSpec};
pub use reml::{reml_fit, Component, RemlError, RemlEstimate, RemlFit, RemlProblem};
pub use smd::{hedges_j, smd_variance, SmdError, SmdMeta};
pub use simulate::{generate, generate_with_theta, run_grid, run_scenario, Scenario, ScenarioResult};
