//! Concept data: pair scoring, dimension allocation, a synthetic world with
//! known ground truth, and the latent pair file format.
//!
//! A concept `F` is defined only through pairs `(zᵃ, zᵇ)` that share it (or
//! differ in it). The per-component correlation of such pairs gives a score
//! `s_F ∈ [−N, N]`, and [`allocate_dims`] turns the scores into a
//! [`FactorLayout`](crate::flow::FactorLayout).

mod pairfile;
mod score;
mod world;

pub use pairfile::{
    read_pairs, read_pairs_csv, write_pairs, PairBatches, PairFileHeader, PairReader,
    PAIR_FILE_HEADER_LEN, PAIR_FILE_MAGIC, PAIR_FILE_VERSION,
};
pub use score::{allocate_dims, score_concept, ConceptScores, CorrelationAccumulator, VARIANCE_EPS};
pub use world::{
    make_world, mix_nonlinearity, random_orthogonal, unmix_nonlinearity, SyntheticWorld, WorldPairs,
    MIX_NONLINEARITY,
};
