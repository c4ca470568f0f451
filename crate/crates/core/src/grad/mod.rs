//! Gradient-space operations: shared updates and their transformations,
//! gradient distances, and second-order derivatives through the backward pass.

mod distance;
mod second_order;
mod update;

pub use distance::{grad_distance, update_distance, DistanceKind};
pub use second_order::{
    grad_of_grad_distance, input_gradient_jacobian, input_gradient_jacobian_layers, Backend, DistanceGradient,
    JacobianMatrix,
};
pub(crate) use second_order::{DummyLabel, Objective};
pub use update::{
    aggregate_mixed, apply_mask, dp_clip_noise, fed_avg_update, fed_sgd_update, DpConfig, MaskSelection, MaskSpec,
    Provenance, SharedUpdate, UpdateMode,
};
