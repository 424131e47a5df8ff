//! Likelihood objectives for training the interpretation network.
//!
//! The supervised per-pair loss is
//!
//! ```text
//! ℓ(zᵃ, zᵇ | F) = Σ_k ‖T(zᵃ)_k‖² − log|T'(zᵃ)|
//!               + Σ_{k≠F} ‖T(zᵇ)_k‖² − log|T'(zᵇ)|
//!               + ‖T(zᵇ)_F − σ_ab T(zᵃ)_F‖² / (1 − σ_ab²)
//! ```
//!
//! for pairs that share concept `F`. For pairs that differ in `F`, the roles
//! of factor `F` and its complement swap. All losses are means over the batch.

mod marginal;
mod pair;

pub use marginal::{
    marginal_nll, nll_bits, nll_bits_per_sample, record_marginal_loss, unsup_loss, MarginalLoss,
};
pub use pair::{
    objective, pair_loss, record_pair_loss, CorrelationConfig, PairBatch, PairLossTerms, PairMode,
    DEFAULT_SIGMA_AB,
};

use crate::error::Result;
use crate::flow::InterpretationNetwork;
use crate::numerics::{gradient_check, Tape, Var};

/// Largest relative gradient error per parameter tensor of `net` for the
/// scalar loss recorded by `loss`, against central differences with step `h`.
pub fn parameter_gradient_errors<F>(net: &InterpretationNetwork, h: f64, loss: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let params = net.parameters();
    let mut errors = Vec::with_capacity(params.len());
    for (j, theta) in params.iter().enumerate() {
        let err = gradient_check(
            |tape, theta_var| {
                let handles: Vec<Var> = params
                    .iter()
                    .enumerate()
                    .map(|(i, p)| if i == j { theta_var } else { tape.constant((*p).clone()) })
                    .collect();
                loss(tape, &handles)
            },
            theta,
            h,
        )?;
        errors.push(err);
    }
    Ok(errors)
}

/// Sum of squares of a `[B, n]` matrix divided by `B`.
pub(crate) fn mean_sq(tape: &mut Tape, x: Var, batch: usize) -> Result<Var> {
    let s = tape.square(x)?;
    let total = tape.sum_all(s);
    Ok(tape.scale(total, 1.0 / batch as f64))
}
