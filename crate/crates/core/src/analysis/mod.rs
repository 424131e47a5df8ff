//! Working with a trained network: factor swaps, interpolation, attribute
//! vectors, sampling, Ornstein-Uhlenbeck response walks against a downstream
//! head, and the projections and correlation metrics used for reporting.

mod edit;
mod ou;
mod response;
mod stats;

pub use edit::{attribute_vector, interpolate, interpolate_codes, sample, swap_factor, AttributeVector};
pub use ou::{ou_walk, OUConfig, DEFAULT_OU_GAMMA};
pub use response::{response_analysis, HeadOracle, ResponseReport, SyntheticHead};
pub use stats::{
    canonical_correlations, max_canonical_correlation, pca_embed, PcaEmbedding, COVARIANCE_RIDGE,
};
