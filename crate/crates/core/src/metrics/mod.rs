//! Leakage measures: reconstruction similarity, usable information in nats,
//! and input-sensitivity of gradients.

mod sensitivity;
mod ssim;
mod usable;

pub use sensitivity::{
    grassmann_distance, jacobian_pnorm_risk, mean_gradients_by_attribute, principal_angles, PNorm, SensitivityMetric,
    SensitivityValue, DEFAULT_RANK_TOL,
};
pub use ssim::{ssim, ssim_raw};
pub use usable::{
    success_probability, usable_latent_info, usable_original_info, InfoKind, SampleProbabilities, Smoothing,
    UsableInfoValue, LATENT_CLAMP,
};
