use std::f64::consts::{LN_2, PI};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use super::checkpoint::Checkpoint;
use super::config::{LossMode, TrainConfig};
use super::data::DataSource;
use crate::error::{Error, Result};
use crate::flow::InterpretationNetwork;
use crate::numerics::{Tape, Tensor};
use crate::objective::{mean_sq, record_pair_loss, CorrelationConfig, MarginalLoss};

/// Loss terms of one optimization step, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// 1-based step index.
    pub step: u64,
    /// Concept of the batch; 0 for unsupervised steps.
    pub concept: usize,
    pub loss: f64,
    /// Negative log-likelihood of the `a` stream in bits per dimension.
    pub nll_bits: f64,
    pub marginal_a: f64,
    pub logdet_a: f64,
    pub marginal_b: f64,
    pub logdet_b: f64,
    pub conditional: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str =
        "step,concept,loss,nll_bits,marginal_a,logdet_a,marginal_b,logdet_b,conditional";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.concept,
            self.loss,
            self.nll_bits,
            self.marginal_a,
            self.logdet_a,
            self.marginal_b,
            self.logdet_b,
            self.conditional
        )
    }
}

/// Writes metrics as CSV with [`StepMetrics::CSV_HEADER`].
pub fn write_metrics_csv<W: Write>(mut w: W, metrics: &[StepMetrics]) -> Result<()> {
    writeln!(w, "{}", StepMetrics::CSV_HEADER)?;
    for m in metrics {
        writeln!(w, "{}", m.csv_row())?;
    }
    Ok(())
}

fn bits_per_dim(mean_sq_norm: f64, mean_logdet: f64, n: usize) -> f64 {
    let n = n as f64;
    (0.5 * mean_sq_norm + 0.5 * n * (2.0 * PI).ln() - mean_logdet) / (n * LN_2)
}

/// Optimization state: network, Adam moments, rng and per-concept draw counts.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub(crate) config: TrainConfig,
    pub(crate) net: InterpretationNetwork,
    pub(crate) adam: AdamState,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) step: u64,
    pub(crate) draws: Vec<u64>,
}

impl Trainer {
    /// Starts a run from `net`. Its architecture must match `config`.
    pub fn new(net: InterpretationNetwork, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let flow = net.config();
        if (flow.n_flow, flow.hidden, flow.depth) != (config.n_flow, config.hidden, config.depth) {
            return Err(Error::InvalidConfig(format!(
                "network has n_flow/hidden/depth {}/{}/{}, config asks for {}/{}/{}",
                flow.n_flow, flow.hidden, flow.depth, config.n_flow, config.hidden, config.depth
            )));
        }
        let adam = AdamState::new(net.parameters());
        let draws = vec![0; net.layout().num_factors()];
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer { config, net, adam, rng, step: 0, draws })
    }

    /// Builds a fresh identity-leaning network for `layout` and starts a run.
    pub fn from_scratch(layout: crate::flow::FactorLayout, config: TrainConfig) -> Result<Self> {
        let flow = config.flow_config(layout.total());
        // Shuffle permutations and hidden weights use a stream separate from data sampling.
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(u64::MAX);
        let net = InterpretationNetwork::new(flow, layout, &mut init_rng)?;
        Trainer::new(net, config)
    }

    /// Continues from a checkpoint. `config` must have the same digest; its
    /// step budget and checkpoint interval replace the stored ones.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig, source: &mut dyn DataSource) -> Result<Self> {
        config.validate()?;
        let flow = config.flow_config(ckpt.network.dim());
        if config.digest(&flow, ckpt.network.layout()) != ckpt.digest() {
            return Err(Error::DigestMismatch);
        }
        source.restore(&ckpt.draws, config.batch)?;
        let mut config = config;
        config.seed = ckpt.config.seed;
        Ok(Trainer {
            config,
            net: ckpt.network,
            adam: ckpt.adam,
            rng: ckpt.rng,
            step: ckpt.step,
            draws: ckpt.draws,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &InterpretationNetwork {
        &self.net
    }

    pub fn into_network(self) -> InterpretationNetwork {
        self.net
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_trainer(self)
    }

    fn check_source(&self, source: &dyn DataSource) -> Result<()> {
        if source.dim() != self.net.dim() {
            return Err(Error::dim(format!(
                "data source has dimension {}, network expects {}",
                source.dim(),
                self.net.dim()
            )));
        }
        if self.config.loss_mode == LossMode::Supervised {
            let k = self.net.layout().num_concepts();
            if k == 0 {
                return Err(Error::Layout("supervised training needs at least one concept factor".into()));
            }
            if let Some(c) = (1..=k).find(|&c| !source.has_concept(c)) {
                return Err(Error::MissingConcept(c));
            }
        }
        Ok(())
    }

    /// One Adam step on a fresh batch. Actnorms are initialized from the
    /// first batch (both pair streams stacked). A non-finite loss or
    /// gradient aborts without touching the parameters.
    pub fn train_step(&mut self, source: &mut dyn DataSource) -> Result<StepMetrics> {
        let batch = self.config.batch;
        let mut tape = Tape::new();
        let n = self.net.dim();
        let (concept, metrics_of, total) = match self.config.loss_mode {
            LossMode::Supervised => {
                let k = self.net.layout().num_concepts();
                let concept = 1 + (self.step % k as u64) as usize;
                let pairs = source.pairs(concept, batch, &mut self.rng)?;
                self.draws[concept] += 1;
                if !self.net.is_initialized() {
                    self.net.initialize(&pairs.stacked()?)?;
                    self.adam = AdamState::new(self.net.parameters());
                }
                let params = self.net.register(&mut tape, true);
                let corr = CorrelationConfig::new(self.config.sigma_ab)?;
                let t = record_pair_loss(&mut tape, &self.net, &params, &pairs, &corr)?;
                let v = |x| tape.value(x).data()[0];
                let m = [v(t.total), v(t.marginal_a), v(t.logdet_a), v(t.marginal_b), v(t.logdet_b), v(t.conditional)];
                (concept, (m, params), t.total)
            }
            LossMode::Unsupervised => {
                let z = source.latents(batch, &mut self.rng)?;
                self.draws[0] += 1;
                if !self.net.is_initialized() {
                    self.net.initialize(&z)?;
                    self.adam = AdamState::new(self.net.parameters());
                }
                let params = self.net.register(&mut tape, true);
                let zv = tape.constant(z);
                let (y, ld) = self.net.record(&mut tape, &params, zv)?;
                let q = mean_sq(&mut tape, y, batch)?;
                let w = match self.config.marginal_loss {
                    MarginalLoss::Literal => 1.0,
                    MarginalLoss::GaussianNll => 0.5,
                };
                let qw = tape.scale(q, w);
                let lds = tape.sum_all(ld);
                let ldm = tape.scale(lds, 1.0 / batch as f64);
                let total = tape.sub(qw, ldm)?;
                let v = |x| tape.value(x).data()[0];
                let m = [v(total), v(q), v(ldm), 0.0, 0.0, 0.0];
                (0, (m, params), total)
            }
        };
        let (m, params) = metrics_of;
        let metrics = StepMetrics {
            step: self.step + 1,
            concept,
            loss: m[0],
            nll_bits: bits_per_dim(m[1], m[2], n),
            marginal_a: m[1],
            logdet_a: m[2],
            marginal_b: m[3],
            logdet_b: m[4],
            conditional: m[5],
        };
        if !metrics.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", metrics.step)));
        }
        tape.backward(total)?;
        let mut grads: Vec<Tensor> = params
            .iter()
            .zip(self.net.parameters())
            .map(|(&p, t)| tape.grad(p).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        if !grads.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite(format!("gradient at step {}", metrics.step)));
        }
        if let Some(c) = self.config.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut ps = self.net.parameters_mut();
        adam_step(&mut ps, &grad_refs, &mut self.adam, &AdamConfig::new(self.config.lr))?;
        self.step += 1;
        Ok(metrics)
    }

    /// Runs until `config.steps` steps are complete, calling `on_step` after
    /// each one and saving a checkpoint to `checkpoint` at the configured
    /// interval and at the end. On failure the last written checkpoint stays.
    pub fn run<F>(
        &mut self,
        source: &mut dyn DataSource,
        checkpoint: Option<&Path>,
        mut on_step: F,
    ) -> Result<()>
    where
        F: FnMut(&StepMetrics) -> Result<()>,
    {
        self.check_source(source)?;
        while self.step < self.config.steps {
            let m = self.train_step(source)?;
            log::debug!("step {} concept {} loss {:.6} nll_bits {:.4}", m.step, m.concept, m.loss, m.nll_bits);
            on_step(&m)?;
            if let (Some(path), Some(every)) = (checkpoint, self.config.checkpoint_every) {
                if self.step % every == 0 {
                    self.checkpoint().save(path)?;
                    log::info!("checkpoint at step {} written to {}", self.step, path.display());
                }
            }
        }
        if let Some(path) = checkpoint {
            self.checkpoint().save(path)?;
        }
        Ok(())
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: InterpretationNetwork,
    pub metrics: Vec<StepMetrics>,
}

/// Trains `net` for `config.steps` steps and returns it with the loss log.
pub fn train(net: InterpretationNetwork, source: &mut dyn DataSource, config: TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(net, config)?;
    let mut metrics = Vec::new();
    t.run(source, None, |m| {
        metrics.push(*m);
        Ok(())
    })?;
    Ok(TrainOutcome { network: t.into_network(), metrics })
}
