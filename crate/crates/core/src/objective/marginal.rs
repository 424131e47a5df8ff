use std::f64::consts::{LN_2, PI};

use super::mean_sq;
use crate::error::{Error, Result};
use crate::flow::InterpretationNetwork;
use crate::numerics::{Tape, Tensor, Var};

/// Quadratic weighting of the unsupervised marginal loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MarginalLoss {
    /// `‖T(z)‖² − log|T'(z)|`, the same weighting as the pair loss.
    Literal,
    /// `½‖T(z)‖² − log|T'(z)|`: the standard-normal negative log-likelihood
    /// up to the constant `(N/2) log 2π`. Its optimum has unit-variance codes.
    GaussianNll,
}

impl MarginalLoss {
    fn quadratic_weight(self) -> f64 {
        match self {
            MarginalLoss::Literal => 1.0,
            MarginalLoss::GaussianNll => 0.5,
        }
    }
}

/// Records the batch mean of the marginal loss on the tape.
pub fn record_marginal_loss(
    tape: &mut Tape,
    net: &InterpretationNetwork,
    params: &[Var],
    z: &Tensor,
    kind: MarginalLoss,
) -> Result<Var> {
    let b = z.rows();
    if b == 0 {
        return Err(Error::dim("empty batch"));
    }
    let zv = tape.constant(z.clone());
    let (y, ld) = net.record(tape, params, zv)?;
    let q = mean_sq(tape, y, b)?;
    let q = tape.scale(q, kind.quadratic_weight());
    let lds = tape.sum_all(ld);
    let ldm = tape.scale(lds, 1.0 / b as f64);
    tape.sub(q, ldm)
}

fn evaluate(net: &InterpretationNetwork, z: &Tensor, kind: MarginalLoss) -> Result<f64> {
    let mut tape = Tape::new();
    let params = net.register(&mut tape, false);
    let l = record_marginal_loss(&mut tape, net, &params, z, kind)?;
    let v = tape.value(l).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("marginal loss".into()));
    }
    Ok(v)
}

/// Mean of `‖T(z)‖² − log|T'(z)|` over the batch.
pub fn unsup_loss(net: &InterpretationNetwork, z: &Tensor) -> Result<f64> {
    evaluate(net, z, MarginalLoss::Literal)
}

/// Mean of `½‖T(z)‖² − log|T'(z)|` over the batch.
pub fn marginal_nll(net: &InterpretationNetwork, z: &Tensor) -> Result<f64> {
    evaluate(net, z, MarginalLoss::GaussianNll)
}

/// Mean negative log-likelihood in bits per dimension, including the
/// Gaussian normalization constant.
pub fn nll_bits(net: &InterpretationNetwork, z: &Tensor) -> Result<f64> {
    let (y, ld) = net.forward(z)?;
    Ok(nll_bits_from_codes(&y, &ld))
}

/// Per-row negative log-likelihood in bits per dimension.
pub fn nll_bits_per_sample(net: &InterpretationNetwork, z: &Tensor) -> Result<Vec<f64>> {
    let (y, ld) = net.forward(&z.as_batch()?)?;
    let n = y.cols() as f64;
    Ok((0..y.rows())
        .map(|r| {
            let quad = 0.5 * y.row(r).iter().map(|v| v * v).sum::<f64>();
            (quad + 0.5 * n * (2.0 * PI).ln() - ld.data()[r]) / (n * LN_2)
        })
        .collect())
}

pub(crate) fn nll_bits_from_codes(codes: &Tensor, logdet: &Tensor) -> f64 {
    let n = codes.cols() as f64;
    let b = codes.rows() as f64;
    let quad = 0.5 * codes.norm_sq() / b;
    let ld = logdet.data().iter().sum::<f64>() / b;
    (quad + 0.5 * n * (2.0 * PI).ln() - ld) / (n * LN_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{ActNormLayer, FactorLayout, FlowConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn identity(n: usize) -> InterpretationNetwork {
        let layout = FactorLayout::residual_only(n).unwrap();
        let cfg = FlowConfig::new(n).with_blocks(1, 4, 1);
        InterpretationNetwork::identity(cfg, layout, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn identity_at_origin_is_zero() {
        assert_eq!(unsup_loss(&identity(2), &Tensor::zeros(&[1, 2])).unwrap(), 0.0);
    }

    #[test]
    fn identity_at_ones() {
        let z = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(unsup_loss(&identity(2), &z).unwrap(), 2.0);
        assert_eq!(marginal_nll(&identity(2), &z).unwrap(), 1.0);
    }

    #[test]
    fn actnorm_only_at_origin() {
        let mut net = identity(2);
        let shift = [0.3, -0.4];
        net.blocks_mut()[0].actnorm = ActNormLayer::with_params(vec![2.0, 2.0], shift.to_vec()).unwrap();
        let l = unsup_loss(&net, &Tensor::zeros(&[1, 2])).unwrap();
        let expected = 0.09 + 0.16 - 2.0 * 2f64.ln();
        assert!((l - expected).abs() < 1e-14);
    }

    #[test]
    fn bits_per_dim_closed_form() {
        let b = nll_bits(&identity(2), &Tensor::zeros(&[1, 2])).unwrap();
        let expected = (2.0 * PI).sqrt().log2();
        assert!((b - expected).abs() < 1e-12);
        assert!((b - 1.3257).abs() < 1e-4);
    }

    #[test]
    fn bits_per_dim_of_standard_normal_matches_entropy() {
        // Differential entropy of N(0,1) is ½ log(2πe) nats.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 4;
        let rows = 20_000;
        let d = (0..rows * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = Tensor::matrix(rows, n, d).unwrap();
        let b = nll_bits(&identity(n), &z).unwrap();
        let entropy_bits = 0.5 * (2.0 * PI * std::f64::consts::E).ln() / LN_2;
        assert!((entropy_bits - 2.047).abs() < 1e-3);
        assert!((b - entropy_bits).abs() < 0.01, "{}", b);
    }
}
