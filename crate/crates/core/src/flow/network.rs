use rand::Rng;

use super::layers::{
    ActNormLayer, CouplingLayer, InvertibleLayer, ShuffleLayer, DEFAULT_SCALE_BOUND,
};
use super::layout::{self, FactorLayout};
use super::mlp::Mlp;
use crate::error::{Error, Result};
use crate::numerics::{kernels, Tape, Tensor, Var, DEFAULT_LEAKY_SLOPE};

/// Architecture hyperparameters of an [`InterpretationNetwork`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    /// Latent dimensionality `N`; must be even.
    pub dim: usize,
    /// Number of (shuffle, coupling, actnorm) blocks.
    pub n_flow: usize,
    /// Hidden width `H` of the coupling subnetworks.
    pub hidden: usize,
    /// Number of hidden layers `D` of the coupling subnetworks.
    pub depth: usize,
    pub leaky_slope: f64,
    pub scale_bound: f64,
}

impl FlowConfig {
    pub fn new(dim: usize) -> Self {
        FlowConfig {
            dim,
            n_flow: 6,
            hidden: 512,
            depth: 2,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            scale_bound: DEFAULT_SCALE_BOUND,
        }
    }

    pub fn with_blocks(mut self, n_flow: usize, hidden: usize, depth: usize) -> Self {
        self.n_flow = n_flow;
        self.hidden = hidden;
        self.depth = depth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "latent dimension must be even and nonzero, got {}",
                self.dim
            )));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidConfig("hidden width must be positive".into()));
        }
        if !(self.scale_bound > 0.0) || !self.leaky_slope.is_finite() {
            return Err(Error::InvalidConfig("invalid scale bound or slope".into()));
        }
        Ok(())
    }
}

/// How coupling subnetworks are initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero output layers: every coupling starts as the identity.
    IdentityLeaning,
    /// Gaussian output layers with the given standard deviation.
    Random { output_std: f64 },
}

/// One shuffle → coupling → actnorm block.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBlock {
    pub shuffle: ShuffleLayer,
    pub coupling: CouplingLayer,
    pub actnorm: ActNormLayer,
}

impl FlowBlock {
    fn num_tensors(&self) -> usize {
        self.coupling.parameters().len() + 2
    }
}

/// The invertible map `T` from latents `z` to factorized codes `z̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpretationNetwork {
    config: FlowConfig,
    layout: FactorLayout,
    blocks: Vec<FlowBlock>,
}

impl InterpretationNetwork {
    /// Identity-leaning network with random shuffles; actnorms await
    /// [`InterpretationNetwork::initialize`].
    pub fn new<R: Rng + ?Sized>(config: FlowConfig, layout: FactorLayout, rng: &mut R) -> Result<Self> {
        Self::with_init(config, layout, Init::IdentityLeaning, rng)
    }

    pub fn with_init<R: Rng + ?Sized>(
        config: FlowConfig,
        layout: FactorLayout,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        check_layout(&config, &layout)?;
        let output_std = match init {
            Init::IdentityLeaning => 0.0,
            Init::Random { output_std } => output_std,
        };
        let half = config.dim / 2;
        let mut blocks = Vec::with_capacity(config.n_flow);
        for _ in 0..config.n_flow {
            let shuffle = ShuffleLayer::random(config.dim, rng);
            let mut mk = || {
                Mlp::new(half, half, config.hidden, config.depth, config.leaky_slope, output_std, rng)
            };
            let (s1, t1, s2, t2) = (mk(), mk(), mk(), mk());
            let coupling = CouplingLayer::new(s1, t1, s2, t2, config.dim, config.scale_bound)?;
            blocks.push(FlowBlock {
                shuffle,
                coupling,
                actnorm: ActNormLayer::new(config.dim),
            });
        }
        Ok(InterpretationNetwork {
            config,
            layout,
            blocks,
        })
    }

    /// A network whose every layer is the identity: identity shuffles, zero
    /// coupling outputs and unit actnorms.
    pub fn identity<R: Rng + ?Sized>(config: FlowConfig, layout: FactorLayout, rng: &mut R) -> Result<Self> {
        let mut net = Self::new(config, layout, rng)?;
        let n = net.config.dim;
        for b in &mut net.blocks {
            b.shuffle = ShuffleLayer::identity(n);
            b.actnorm = ActNormLayer::with_params(vec![1.0; n], vec![0.0; n])?;
        }
        Ok(net)
    }

    pub(crate) fn from_parts(config: FlowConfig, layout: FactorLayout, blocks: Vec<FlowBlock>) -> Result<Self> {
        config.validate()?;
        check_layout(&config, &layout)?;
        if blocks.len() != config.n_flow {
            return Err(Error::Format(format!(
                "expected {} blocks, found {}",
                config.n_flow,
                blocks.len()
            )));
        }
        Ok(InterpretationNetwork {
            config,
            layout,
            blocks,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn layout(&self) -> &FactorLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn blocks(&self) -> &[FlowBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [FlowBlock] {
        &mut self.blocks
    }

    pub fn is_initialized(&self) -> bool {
        self.blocks.iter().all(|b| b.actnorm.is_initialized())
    }

    /// Data-dependent actnorm initialization: each actnorm is fitted to the
    /// activations that reach it when `batch` is pushed through the network.
    pub fn initialize(&mut self, batch: &Tensor) -> Result<()> {
        self.check_input(batch)?;
        if self.blocks.iter().any(|b| b.actnorm.is_initialized()) {
            return Err(Error::AlreadyInitialized);
        }
        let mut h = batch.clone();
        for b in &mut self.blocks {
            h = b.shuffle.forward(&h)?.0;
            h = b.coupling.forward(&h)?.0;
            b.actnorm.initialize(&h)?;
            h = b.actnorm.forward(&h)?.0;
        }
        Ok(())
    }

    fn check_input(&self, z: &Tensor) -> Result<()> {
        if z.rank() != 2 || z.cols() != self.config.dim {
            return Err(Error::dim(format!(
                "network of dimension {} got input of shape {:?}",
                self.config.dim,
                z.shape()
            )));
        }
        Ok(())
    }

    /// `z̃ = T(z)` and the per-sample `log |det T'(z)|`.
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(z)?;
        let b = z.rows();
        let mut h = z.clone();
        let mut ld = Tensor::zeros(&[b]);
        for blk in &self.blocks {
            h = blk.shuffle.forward(&h)?.0;
            let (hc, lc) = blk.coupling.forward(&h)?;
            ld = kernels::add(&ld, &lc)?;
            let (ha, la) = blk.actnorm.forward(&hc)?;
            ld = kernels::add(&ld, &la)?;
            h = ha;
        }
        Ok((h, ld))
    }

    pub fn inverse(&self, codes: &Tensor) -> Result<Tensor> {
        Ok(self.inverse_with_logdet(codes)?.0)
    }

    /// `z = T⁻¹(z̃)` and the per-sample `log |det (T⁻¹)'(z̃)|`.
    pub fn inverse_with_logdet(&self, codes: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(codes)?;
        let mut h = codes.clone();
        let mut ld = Tensor::zeros(&[codes.rows()]);
        for blk in self.blocks.iter().rev() {
            let (ha, la) = blk.actnorm.inverse_with_logdet(&h)?;
            ld = kernels::add(&ld, &la)?;
            let (hc, lc) = blk.coupling.inverse_with_logdet(&ha)?;
            ld = kernels::add(&ld, &lc)?;
            h = blk.shuffle.inverse(&hc)?;
        }
        Ok((h, ld))
    }

    /// Forward pass followed by a split into factors.
    pub fn encode(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        layout::split(&self.forward(z)?.0, &self.layout)
    }

    /// Concatenates factors and maps them back to latent space.
    pub fn decode(&self, factors: &[Tensor]) -> Result<Tensor> {
        self.inverse(&layout::concat(factors, &self.layout)?)
    }

    /// All parameter tensors in a fixed order: per block, the coupling
    /// subnetworks `s_1, t_1, s_2, t_2` (weight, bias per layer), then actnorm
    /// scale and shift.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.coupling.parameters());
            out.extend(b.actnorm.parameters());
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.coupling.parameters_mut());
            out.extend(b.actnorm.parameters_mut());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Puts every parameter on the tape, as trainable leaves or constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Records `T(z)` on the tape. `params` must follow [`Self::parameters`] order.
    /// Returns the codes `[B, N]` and the per-sample log-determinant `[B]`.
    pub fn record(&self, tape: &mut Tape, params: &[Var], z: Var) -> Result<(Var, Var)> {
        self.check_input(tape.value(z))?;
        let expected: usize = self.blocks.iter().map(FlowBlock::num_tensors).sum();
        if params.len() != expected {
            return Err(Error::dim(format!(
                "expected {} parameter handles, got {}",
                expected,
                params.len()
            )));
        }
        let b = tape.value(z).rows();
        let zeros = tape.constant(Tensor::zeros(&[b]));
        let mut ld = zeros;
        let mut h = z;
        let mut off = 0;
        for blk in &self.blocks {
            let nc = blk.coupling.parameters().len();
            h = blk.shuffle.record(tape, &[], h)?.0;
            let (hc, lc) = blk.coupling.record(tape, &params[off..off + nc], h)?;
            if let Some(lc) = lc {
                ld = tape.add(ld, lc)?;
            }
            off += nc;
            let (ha, la) = blk.actnorm.record(tape, &params[off..off + 2], hc)?;
            if let Some(la) = la {
                let per = tape.add_broadcast(zeros, la)?;
                ld = tape.add(ld, per)?;
            }
            off += 2;
            h = ha;
        }
        Ok((h, ld))
    }
}

fn check_layout(config: &FlowConfig, layout: &FactorLayout) -> Result<()> {
    if layout.total() != config.dim {
        return Err(Error::Layout(format!(
            "layout {} sums to {}, network dimension is {}",
            layout,
            layout.total(),
            config.dim
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    pub(crate) fn random_net(n: usize, n_flow: usize, seed: u64) -> InterpretationNetwork {
        random_net_with_scale(n, n_flow, seed, 0.2)
    }

    /// Random coupling outputs of std `output_std`; actnorms set from a
    /// standard-normal batch.
    pub(crate) fn random_net_with_scale(n: usize, n_flow: usize, seed: u64, output_std: f64) -> InterpretationNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = FlowConfig::new(n).with_blocks(n_flow, 16, 2);
        let layout = FactorLayout::new(vec![n / 2, n - n / 2]).unwrap();
        let mut net =
            InterpretationNetwork::with_init(cfg, layout, Init::Random { output_std }, &mut rng).unwrap();
        let batch = gaussian(32, n, &mut rng);
        net.initialize(&batch).unwrap();
        net
    }

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let d = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::matrix(rows, cols, d).unwrap()
    }

    fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let u = Uniform::new_inclusive(-bound, bound).unwrap();
        let d = (0..rows * cols).map(|_| u.sample(rng)).collect();
        Tensor::matrix(rows, cols, d).unwrap()
    }

    #[test]
    fn identity_network_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layout = FactorLayout::new(vec![2, 2]).unwrap();
        let net = InterpretationNetwork::identity(FlowConfig::new(4).with_blocks(3, 8, 2), layout, &mut rng).unwrap();
        let z = gaussian(5, 4, &mut rng);
        let (y, ld) = net.forward(&z).unwrap();
        assert_eq!(y, z);
        assert!(ld.data().iter().all(|v| *v == 0.0));
        assert_eq!(net.inverse(&z).unwrap(), z);
    }

    #[test]
    fn actnorm_only_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layout = FactorLayout::new(vec![1, 1]).unwrap();
        let mut net =
            InterpretationNetwork::identity(FlowConfig::new(2).with_blocks(1, 4, 1), layout, &mut rng).unwrap();
        net.blocks_mut()[0].actnorm = ActNormLayer::with_params(vec![2.0, 2.0], vec![0.5, -0.5]).unwrap();
        let z = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let (y, ld) = net.forward(&z).unwrap();
        assert_eq!(y.data(), &[2.5, 1.5]);
        assert!((ld.data()[0] - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn round_trip_six_blocks_dim16() {
        // Larger output scales make deep random nets chaotic on the box
        // |z| <= 10 and the round trip loses digits.
        let net = random_net_with_scale(16, 6, 11, 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = uniform(25, 16, 10.0, &mut rng);
        let back = net.inverse(&net.forward(&z).unwrap().0).unwrap();
        let err = back.max_abs_diff(&z).unwrap();
        assert!(err < 1e-9, "{}", err);
    }

    #[test]
    fn logdet_consistency_between_directions() {
        let net = random_net(8, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = gaussian(10, 8, &mut rng);
        let (y, ld_f) = net.forward(&z).unwrap();
        let (_, ld_i) = net.inverse_with_logdet(&y).unwrap();
        for (a, b) in ld_f.data().iter().zip(ld_i.data()) {
            assert!((a + b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn recorded_forward_matches_plain_bitwise() {
        let net = random_net(8, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = gaussian(6, 8, &mut rng);
        let (y, ld) = net.forward(&z).unwrap();
        let mut tape = Tape::new();
        let params = net.register(&mut tape, true);
        let zv = tape.constant(z);
        let (yv, ldv) = net.record(&mut tape, &params, zv).unwrap();
        assert_eq!(tape.value(yv), &y);
        assert_eq!(tape.value(ldv), &ld);
    }

    #[test]
    fn odd_dimension_and_bad_layout_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(InterpretationNetwork::new(
            FlowConfig::new(5),
            FactorLayout::new(vec![5]).unwrap(),
            &mut rng
        )
        .is_err());
        assert!(InterpretationNetwork::new(
            FlowConfig::new(4),
            FactorLayout::new(vec![2, 3]).unwrap(),
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn uninitialized_network_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = InterpretationNetwork::new(
            FlowConfig::new(4).with_blocks(2, 4, 1),
            FactorLayout::new(vec![4]).unwrap(),
            &mut rng,
        )
        .unwrap();
        assert!(!net.is_initialized());
        assert!(matches!(
            net.forward(&Tensor::zeros(&[1, 4])),
            Err(Error::NotInitialized)
        ));
    }

    #[test]
    fn initialization_standardizes_first_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = FlowConfig::new(6).with_blocks(2, 8, 2);
        let mut net = InterpretationNetwork::new(cfg, FactorLayout::new(vec![6]).unwrap(), &mut rng).unwrap();
        let mut batch = gaussian(50, 6, &mut rng);
        for v in batch.data_mut() {
            *v = 3.0 * *v + 2.0;
        }
        net.initialize(&batch).unwrap();
        let (y, _) = net.forward(&batch).unwrap();
        let mean = kernels::column_mean(&y).unwrap();
        for j in 0..6 {
            assert!(mean.data()[j].abs() < 1e-10);
            let var: f64 = (0..50).map(|i| y.get(i, j).powi(2)).sum::<f64>() / 50.0;
            assert!((var - 1.0).abs() < 1e-10);
        }
        assert!(matches!(net.initialize(&batch), Err(Error::AlreadyInitialized)));
    }
}
