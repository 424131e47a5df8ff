//! Invertible interpretation networks.
//!
//! An [`InterpretationNetwork`](flow::InterpretationNetwork) is a normalizing
//! flow `T` that maps a fixed latent representation `z` to a factorized code
//! `z̃ = (z̃_0, z̃_1, …, z̃_K)`. Factor `z̃_0` is a residual; every other factor
//! is tied to a semantic concept through pairs of latents that share (or
//! differ in) that concept. Because `T` is bijective, edits made on `z̃`
//! (swapping a factor, walking along an attribute direction, interpolating)
//! map back to valid latents via `T⁻¹`.
//!
//! Modules, bottom up:
//!
//! - [`numerics`]: tensors and reverse-mode differentiation
//! - [`flow`]: shuffle / affine coupling / actnorm blocks and factor layouts
//! - [`objective`]: pair likelihood loss and unsupervised marginal likelihood
//! - [`concepts`]: dimensionality estimation, synthetic worlds, latent pair files
//! - [`analysis`]: swapping, interpolation, attribute vectors, sampling, response analysis
//! - [`trainer`]: Adam, the training loop and checkpoints
//! - [`io`]: atomic file writes shared by the on-disk formats
//!
//! The guide in `book/` walks through each of these with runnable snippets.

pub mod analysis;
pub mod concepts;
mod error;
pub mod flow;
pub mod io;
pub mod numerics;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};

// Book chapters are compiled as doctests so the guide cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/numerics.md")]
    mod numerics {}
    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/concepts.md")]
    mod concepts {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
