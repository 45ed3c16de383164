//! Trainable building blocks.
//!
//! Blocks hold only [`ParamId`]s and configuration; the numbers live in a
//! [`ParamStore`]. The same block can therefore run in `f32` for training and
//! in `f64` for finite-difference audits by casting the store.

mod blocks;
mod gradcheck;
mod layers;
mod optim;
mod params;

pub use blocks::{
    Activation, Block, BlockConfig, BlockKind, ConvStack, Discriminator, Gating, Mlp,
    RecurrentEncoder, ResidualUnet,
};
pub use gradcheck::{gradient_check, rel_error, GradCheckOptions, GradCheckReport, GradSample};
pub use layers::{Conv, Linear};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
