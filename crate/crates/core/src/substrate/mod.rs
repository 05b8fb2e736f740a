//! Small differentiable-computation layer shared by every model in the crate.

mod adam;
mod gaussian;
mod mlp;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gaussian::{gaussian_logpdf, reparam_sample, LN_2PI};
pub use mlp::{Activation, Layer, Mlp};
pub use params::{bias_name, weight_name, ParamVector, Slot};
pub use tape::{grad_check, loss_grad, loss_value, sigmoid, softplus, Tape, Var};
