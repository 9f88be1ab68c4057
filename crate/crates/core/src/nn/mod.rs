//! Parameterised layers and the Adam optimizer.
//!
//! Layers own only [`ParamId`] handles (plus running statistics for batch
//! norm); values live in a [`ParamStore`] so a step graph can borrow them.
//!
//! [`ParamId`]: crate::tensor::ParamId
//! [`ParamStore`]: crate::tensor::ParamStore

mod adam;
mod layers;

pub use adam::{Adam, AdamConfig};
pub use layers::{BatchNorm, Conv2d, ConvTranspose2d, Dense, LEAKY_SLOPE};
