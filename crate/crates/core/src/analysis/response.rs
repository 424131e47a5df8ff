use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ou::{ou_walk, OUConfig};
use crate::concepts::SyntheticWorld;
use crate::error::{Error, Result};
use crate::flow::InterpretationNetwork;
use crate::io::atomic_write;
use crate::numerics::{kernels, Tensor};

/// A downstream map from latents `[B, N]` to class logits `[B, C]`.
pub trait HeadOracle {
    fn logits(&self, z: &Tensor) -> Result<Tensor>;
}

/// Head for a synthetic world: recovers ground truth with the analytic
/// inverse mixing and applies a fixed linear map to one ground-truth factor.
#[derive(Debug, Clone)]
pub struct SyntheticHead {
    world: SyntheticWorld,
    factor: usize,
    weights: Tensor,
    bias: Tensor,
}

impl SyntheticHead {
    /// Random Gaussian weights `[M_factor, classes]`, zero bias.
    pub fn new(world: SyntheticWorld, factor: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidConfig("a head needs at least 2 classes".into()));
        }
        let m = world.dims().range(factor)?.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..m * classes).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(SyntheticHead {
            world,
            factor,
            weights: Tensor::matrix(m, classes, w)?,
            bias: Tensor::zeros(&[classes]),
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }
}

impl HeadOracle for SyntheticHead {
    fn logits(&self, z: &Tensor) -> Result<Tensor> {
        let g = self.world.unmix(z)?;
        let r = self.world.dims().range(self.factor)?;
        let gf = kernels::slice_cols(&g, r.start, r.len())?;
        kernels::affine(&gf, &self.weights, &self.bias)
    }
}

/// Outcome of walking one factor and watching the head.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseReport {
    /// Prediction on the unperturbed latent.
    pub base_prediction: usize,
    /// Raw logits per step, `[steps, C]`.
    pub logits: Tensor,
    /// Log-softmax per step, `[steps, C]`.
    pub log_softmax: Tensor,
    /// Argmax class per step.
    pub predictions: Vec<usize>,
    /// Fraction of steps whose prediction differs from `base_prediction`.
    pub change_rate: f64,
    /// Variance of each class logit over the walk.
    pub logit_variance: Vec<f64>,
}

impl ResponseReport {
    /// One row per step: `step,argmax,max_log_softmax,logit_0,…`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let c = self.logits.cols();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["step".to_string(), "argmax".into(), "max_log_softmax".into()];
        header.extend((0..c).map(|j| format!("logit_{}", j)));
        out.write_record(&header)?;
        for (t, &p) in self.predictions.iter().enumerate() {
            let mut rec = vec![(t + 1).to_string(), p.to_string(), self.log_softmax.get(t, p).to_string()];
            rec.extend(self.logits.row(t).iter().map(f64::to_string));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| self.write_csv(w))
    }
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for r in 0..x.rows() {
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Walks factor `k` of `T(z)` with an OU process, maps each step back with
/// `T⁻¹` and records how the head's prediction responds.
pub fn response_analysis(
    net: &InterpretationNetwork,
    head: &dyn HeadOracle,
    z: &Tensor,
    k: usize,
    cfg: &OUConfig,
    seed: u64,
) -> Result<ResponseReport> {
    let z = z.as_batch()?;
    if z.rows() != 1 {
        return Err(Error::dim("response analysis takes a single latent"));
    }
    let range = net.layout().range(k)?;
    let codes = net.forward(&z)?.0;
    let base_logits = head.logits(&z)?;
    let base_prediction = argmax(base_logits.row(0));
    let walk = ou_walk(&codes.data()[range.clone()], cfg, seed)?;
    let n = codes.cols();
    let mut walked = Vec::with_capacity(cfg.steps * n);
    for t in 0..cfg.steps {
        let mut row = codes.data().to_vec();
        row[range.clone()].copy_from_slice(walk.row(t));
        walked.extend(row);
    }
    let latents = net.inverse(&Tensor::matrix(cfg.steps, n, walked)?)?;
    let logits = head.logits(&latents)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite("head logits".into()));
    }
    let log_softmax = log_softmax_rows(&logits);
    let predictions: Vec<usize> = (0..cfg.steps).map(|t| argmax(logits.row(t))).collect();
    let changed = predictions.iter().filter(|&&p| p != base_prediction).count();
    let change_rate = if cfg.steps == 0 { 0.0 } else { changed as f64 / cfg.steps as f64 };
    let c = logits.cols();
    let logit_variance = (0..c)
        .map(|j| {
            let s = cfg.steps as f64;
            if cfg.steps < 2 {
                return 0.0;
            }
            let m = (0..cfg.steps).map(|t| logits.get(t, j)).sum::<f64>() / s;
            (0..cfg.steps).map(|t| (logits.get(t, j) - m).powi(2)).sum::<f64>() / (s - 1.0)
        })
        .collect();
    Ok(ResponseReport { base_prediction, logits, log_softmax, predictions, change_rate, logit_variance })
}
