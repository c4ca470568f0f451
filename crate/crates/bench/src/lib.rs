//! Shared inputs for the benchmarks.

use gradleak_core::grad::{fed_sgd_update, SharedUpdate};
use gradleak_core::harness::{synth_dataset, NUM_CLASSES};
use gradleak_core::nn::{init_params, ModelSpec, Params, Sample};

pub struct Fixture {
    pub spec: ModelSpec,
    pub params: Params,
    pub samples: Vec<Sample>,
    pub observed: SharedUpdate,
}

/// A named model on 8x8 inputs with the update of the first synthetic sample.
pub fn fixture(model: &str) -> Fixture {
    let spec = ModelSpec::named(model, (1, 8, 8), NUM_CLASSES).expect("known model");
    let params = init_params(&spec, 0).expect("valid spec");
    let samples = synth_dataset(64, 8, 8, 1).expect("valid dims").samples();
    let observed = fed_sgd_update(&spec, &params, &samples[..1]).expect("valid sample");
    Fixture {
        spec,
        params,
        samples,
        observed,
    }
}
