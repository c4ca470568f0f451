//! Attack families whose success defines usable information: gradient-matching
//! reconstruction (with analytic label inference) and attribute inference.

mod aia;
mod dra;
mod label;

pub use aia::{
    aia_predict, build_aia_dataset, build_aia_features, train_aia, AiaMember, AiaModel, AiaSampling, AiaTraining,
    FeatureDescriptor, FeatureSet,
};
pub use dra::{
    random_reconstruction_baseline, reconstruct_from, run_dra, run_restart, DraConfig, DraRun, InitDistribution,
    LabelSource, Optimizer,
};
pub use label::infer_label;
