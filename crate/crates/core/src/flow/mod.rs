//! The invertible interpretation network and its building blocks.
//!
//! A network is a stack of blocks, each applying a fixed channel shuffle, an
//! affine coupling and an actnorm, in that order. The output is split into
//! factors according to a [`FactorLayout`] after the last block.

mod layers;
mod layout;
mod mlp;
mod network;

pub use layers::{
    ActNormLayer, CouplingLayer, InvertibleLayer, ShuffleLayer, ACTNORM_EPS, DEFAULT_SCALE_BOUND,
};
pub use layout::{concat, split, FactorLayout};
pub use mlp::Mlp;
pub use network::{FlowBlock, FlowConfig, Init, InterpretationNetwork};
