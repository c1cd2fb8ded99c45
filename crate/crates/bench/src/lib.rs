//! Fixtures shared by the criterion benchmarks.

use poolrefine::rng::rng_from_seed;
use poolrefine::testbed::{build_synthetic_testbed, Testbed};
use poolrefine::SyntheticBiasSpec;

/// The default synthetic testbed at a given training size.
pub fn testbed(sample_count: usize, seed: u64) -> Testbed {
    let spec = SyntheticBiasSpec {
        sample_count,
        ..SyntheticBiasSpec::default()
    };
    build_synthetic_testbed(&spec, &mut rng_from_seed(seed)).expect("default spec is feasible")
}
