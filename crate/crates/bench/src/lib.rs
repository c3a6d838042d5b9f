//! Fixtures shared by the benchmarks.

use scriptgen_core::data::{synth_cohort, SyntheticCohort, SynthConfig};

/// Full-size course with a 50-student class.
pub fn class_fixture(seed: u64) -> SyntheticCohort {
    synth_cohort(&SynthConfig {
        student_count: 50,
        records_per_student: 2,
        seed,
        ..SynthConfig::default()
    })
    .expect("default synthetic config is valid")
}
