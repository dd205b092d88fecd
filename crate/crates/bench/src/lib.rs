//! Fixtures shared by the benchmarks.

use mlmeta_core::simulate::{generate, Scenario};
use mlmeta_core::Dataset;

/// A generated dataset with the given shape and τ² = ω² = 0.1.
pub fn dataset(m: usize, k: usize, n: u32) -> Dataset {
    generate(&scenario(m, k, n), 0)
}

pub fn scenario(m: usize, k: usize, n: u32) -> Scenario {
    Scenario::new(m, k, n, 0.5, 0.1).with_seed(1)
}
