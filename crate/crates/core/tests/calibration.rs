//! Calibration runs frozen as regression fixtures.

use gradleak_core::attacks::{run_dra, DraConfig};
use gradleak_core::grad::{fed_sgd_update, DistanceKind};
use gradleak_core::harness::{synth_dataset, NUM_CLASSES};
use gradleak_core::nn::{accuracy, init_params, train, ModelSpec};
use serde::Deserialize;

#[derive(Deserialize)]
struct DatasetFixture {
    n: usize,
    height: usize,
    width: usize,
    seed: u64,
}

#[derive(Deserialize)]
struct DraFixture {
    model: String,
    dataset: DatasetFixture,
    sample: usize,
    param_seed: u64,
    attack_seed: u64,
    layers: Vec<usize>,
    steps: usize,
    restarts: usize,
    median_final_over_initial: f64,
}

#[test]
fn dra_on_fc2_shrinks_the_distance_by_three_orders() {
    let text = include_str!("fixtures/dra_fc2_distance.json");
    let fx: DraFixture = serde_json::from_str(text).unwrap();
    let d = &fx.dataset;
    let data = synth_dataset(d.n, d.height, d.width, d.seed).unwrap().samples();
    let spec = ModelSpec::named(&fx.model, (1, d.height, d.width), NUM_CLASSES).unwrap();
    let params = init_params(&spec, fx.param_seed).unwrap();
    let observed = fed_sgd_update(&spec, &params, &data[fx.sample..=fx.sample]).unwrap();
    let mut cfg = DraConfig::new(fx.layers.clone(), fx.attack_seed);
    assert_eq!(cfg.dist_kind, DistanceKind::L2);
    cfg.steps = fx.steps;
    cfg.restarts = fx.restarts;
    let runs = run_dra(&spec, &params, &observed, Some(&data[fx.sample]), &cfg).unwrap();
    let mut ratios: Vec<f64> = runs.iter().map(|r| r.final_distance / r.trace[0]).collect();
    ratios.sort_by(f64::total_cmp);
    let median = 0.5 * (ratios[4] + ratios[5]);
    assert!(median < 1e-3, "median final/initial {median:e}");
    // Converged distances sit at rounding level, so only the order of
    // magnitude is pinned.
    let frozen = fx.median_final_over_initial;
    assert!(
        (median.log10() - frozen.log10()).abs() < 1.0,
        "{median:e} vs frozen {frozen:e}"
    );
}

#[test]
fn lenet_mini_learns_the_synthetic_classes() {
    let data = synth_dataset(256, 8, 8, 1).unwrap().samples();
    let spec = ModelSpec::named("lenet-mini", (1, 8, 8), NUM_CLASSES).unwrap();
    for seed in 0..3 {
        let params = train(&spec, &init_params(&spec, seed).unwrap(), &data, 20, 16, 0.05, seed).unwrap();
        let acc = accuracy(&spec, &params, &data).unwrap();
        assert!(acc > 0.6, "seed {seed}: train accuracy {acc}");
    }
}
