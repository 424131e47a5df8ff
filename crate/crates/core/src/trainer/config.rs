use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{FactorLayout, FlowConfig};
use crate::objective::MarginalLoss;

/// Which objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossMode {
    /// Pair loss over concepts `1..=K`, visited round robin.
    Supervised,
    /// Marginal likelihood of plain latents.
    Unsupervised,
}

impl LossMode {
    pub fn code(self) -> u8 {
        match self {
            LossMode::Supervised => 0,
            LossMode::Unsupervised => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(LossMode::Supervised),
            1 => Ok(LossMode::Unsupervised),
            _ => Err(Error::Format(format!("unknown loss mode code {}", c))),
        }
    }
}

pub(crate) fn marginal_code(m: MarginalLoss) -> u8 {
    match m {
        MarginalLoss::Literal => 0,
        MarginalLoss::GaussianNll => 1,
    }
}

pub(crate) fn marginal_from_code(c: u8) -> Result<MarginalLoss> {
    match c {
        0 => Ok(MarginalLoss::Literal),
        1 => Ok(MarginalLoss::GaussianNll),
        _ => Err(Error::Format(format!("unknown marginal loss code {}", c))),
    }
}

/// Hyperparameters of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub sigma_ab: f64,
    pub n_flow: usize,
    pub hidden: usize,
    pub depth: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps.
    pub checkpoint_every: Option<u64>,
    pub loss_mode: LossMode,
    /// Quadratic weighting used in unsupervised mode.
    pub marginal_loss: MarginalLoss,
    /// Clip the joint gradient norm to this value.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 25,
            steps: 1000,
            sigma_ab: 0.9,
            n_flow: 6,
            hidden: 512,
            depth: 2,
            seed: 0,
            checkpoint_every: None,
            loss_mode: LossMode::Supervised,
            marginal_loss: MarginalLoss::GaussianNll,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch < 2 {
            return bad(format!("batch must be at least 2 for actnorm initialization, got {}", self.batch));
        }
        if !(self.sigma_ab > 0.0 && self.sigma_ab < 1.0) {
            return bad(format!("sigma_ab must lie in (0, 1), got {}", self.sigma_ab));
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive".into());
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint interval must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip norm must be positive, got {}", c));
            }
        }
        Ok(())
    }

    /// Network architecture for latents of dimension `dim`.
    pub fn flow_config(&self, dim: usize) -> FlowConfig {
        FlowConfig::new(dim).with_blocks(self.n_flow, self.hidden, self.depth)
    }

    /// SHA-256 over every setting that shapes the model or its optimization
    /// trajectory. Seed, step budget and checkpoint interval are excluded so a
    /// run can be extended or resumed under a new budget.
    pub fn digest(&self, flow: &FlowConfig, layout: &FactorLayout) -> [u8; 32] {
        let text = format!(
            "layout={};dim={};n_flow={};hidden={};depth={};slope={:016x};bound={:016x};\
             lr={:016x};batch={};sigma={:016x};mode={};marginal={};clip={}",
            layout,
            flow.dim,
            flow.n_flow,
            flow.hidden,
            flow.depth,
            flow.leaky_slope.to_bits(),
            flow.scale_bound.to_bits(),
            self.lr.to_bits(),
            self.batch,
            self.sigma_ab.to_bits(),
            self.loss_mode.code(),
            marginal_code(self.marginal_loss),
            self.clip_norm.map_or("none".to_string(), |c| format!("{:016x}", c.to_bits())),
        );
        Sha256::digest(text.as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.lr, c.batch, c.sigma_ab), (1e-4, 25, 0.9));
    }

    #[test]
    fn invalid_settings() {
        for f in [
            |c: &mut TrainConfig| c.lr = 0.0,
            |c: &mut TrainConfig| c.batch = 1,
            |c: &mut TrainConfig| c.sigma_ab = 1.0,
            |c: &mut TrainConfig| c.checkpoint_every = Some(0),
            |c: &mut TrainConfig| c.clip_norm = Some(-1.0),
        ] {
            let mut c = TrainConfig::default();
            f(&mut c);
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn digest_ignores_seed_and_budget_only() {
        let l = FactorLayout::new(vec![2, 2]).unwrap();
        let base = TrainConfig::default();
        let d = base.digest(&base.flow_config(4), &l);
        let mut other = base.clone();
        other.seed = 9;
        other.steps = 5;
        other.checkpoint_every = Some(3);
        assert_eq!(other.digest(&other.flow_config(4), &l), d);
        other.lr = 2e-4;
        assert_ne!(other.digest(&other.flow_config(4), &l), d);
        let l2 = FactorLayout::new(vec![3, 1]).unwrap();
        assert_ne!(base.digest(&base.flow_config(4), &l2), d);
    }
}
