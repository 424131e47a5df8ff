use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::adam::AdamState;
use super::config::{marginal_code, marginal_from_code, LossMode, TrainConfig};
use super::train::Trainer;
use crate::error::{Error, Result};
use crate::flow::{ActNormLayer, CouplingLayer, FactorLayout, FlowBlock, FlowConfig, InterpretationNetwork, Mlp, ShuffleLayer};
use crate::io::atomic_write;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IIN1";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Everything needed to resume a run bit for bit.
///
/// On disk: magic `IIN1`, a little-endian `u32` version, the payload, and a
/// trailing SHA-256 of all preceding bytes.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub network: InterpretationNetwork,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Completed optimization steps.
    pub step: u64,
    /// Batches drawn so far, indexed by concept (0 for unsupervised latents).
    pub draws: Vec<u64>,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.network == other.network
            && self.adam == other.adam
            && self.rng == other.rng
            && self.step == other.step
            && self.draws == other.draws
    }
}

impl Checkpoint {
    pub(crate) fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            config: t.config.clone(),
            network: t.net.clone(),
            adam: t.adam.clone(),
            rng: t.rng.clone(),
            step: t.step,
            draws: t.draws.clone(),
        }
    }

    /// Checkpoint of a network that has not been trained, usable by the
    /// analysis commands.
    pub fn untrained(network: InterpretationNetwork, config: TrainConfig) -> Self {
        let adam = AdamState::new(network.parameters());
        let draws = vec![0; network.layout().num_factors()];
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Checkpoint { config, network, adam, rng, step: 0, draws }
    }

    /// Configuration digest of the stored run.
    pub fn digest(&self) -> [u8; 32] {
        self.config.digest(self.network.config(), self.network.layout())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Enc(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        write_train_config(&mut w, &self.config);
        write_flow_config(&mut w, self.network.config());
        let dims = self.network.layout().dims();
        w.u64(dims.len() as u64);
        dims.iter().for_each(|&d| w.u64(d as u64));
        for b in self.network.blocks() {
            w.u64(b.shuffle.perm().len() as u64);
            b.shuffle.perm().iter().for_each(|&p| w.u64(p as u64));
            for net in b.coupling.subnets() {
                w.u64(net.layers().len() as u64);
                for (wt, bias) in net.layers() {
                    w.tensor(wt);
                    w.tensor(bias);
                }
            }
            w.u8(b.actnorm.is_initialized() as u8);
            w.tensor(b.actnorm.scale());
            w.tensor(b.actnorm.shift());
        }
        w.u64(self.adam.step);
        w.u64(self.adam.m.len() as u64);
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            w.tensor(m);
            w.tensor(v);
        }
        w.0.extend_from_slice(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.0.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        w.u64(self.step);
        w.u64(self.draws.len() as u64);
        self.draws.iter().for_each(|&d| w.u64(d));
        w.0.extend_from_slice(&self.digest());
        let sum = Sha256::digest(&w.0);
        w.0.extend_from_slice(&sum);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(Error::Format(format!("checkpoint truncated: {} bytes", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {} (expected {})",
                version, CHECKPOINT_VERSION
            )));
        }
        let (body, sum) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Format("checkpoint checksum mismatch (truncated or corrupted)".into()));
        }
        let mut r = Dec { buf: body, pos: 8 };
        let config = read_train_config(&mut r)?;
        let flow = read_flow_config(&mut r)?;
        let nd = r.len(64)?;
        let dims = (0..nd).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let layout = FactorLayout::new(dims).map_err(|e| Error::Format(e.to_string()))?;
        let mut blocks = Vec::with_capacity(flow.n_flow);
        for _ in 0..flow.n_flow {
            let np = r.len(1 << 24)?;
            let perm = (0..np).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let shuffle = ShuffleLayer::new(perm).map_err(|e| Error::Format(e.to_string()))?;
            let mut nets = Vec::with_capacity(4);
            for _ in 0..4 {
                let nl = r.len(1 << 16)?;
                let layers = (0..nl).map(|_| Ok((r.tensor()?, r.tensor()?))).collect::<Result<Vec<_>>>()?;
                nets.push(Mlp::from_layers(layers, flow.leaky_slope));
            }
            let t2 = nets.pop().unwrap();
            let s2 = nets.pop().unwrap();
            let t1 = nets.pop().unwrap();
            let s1 = nets.pop().unwrap();
            let coupling = CouplingLayer::new(s1, t1, s2, t2, flow.dim, flow.scale_bound)
                .map_err(|e| Error::Format(e.to_string()))?;
            let initialized = r.u8()? != 0;
            let (scale, shift) = (r.tensor()?, r.tensor()?);
            let mut actnorm = ActNormLayer::with_params(scale.into_data(), shift.into_data())
                .map_err(|e| Error::Format(e.to_string()))?;
            actnorm.set_initialized(initialized);
            blocks.push(FlowBlock { shuffle, coupling, actnorm });
        }
        let network = InterpretationNetwork::from_parts(flow, layout, blocks)
            .map_err(|e| Error::Format(e.to_string()))?;
        let adam_step = r.u64()?;
        let na = r.len(1 << 24)?;
        let (mut m, mut v) = (Vec::with_capacity(na), Vec::with_capacity(na));
        for _ in 0..na {
            m.push(r.tensor()?);
            v.push(r.tensor()?);
        }
        let params = network.parameters();
        if m.len() != params.len() || m.iter().zip(&params).any(|(a, p)| a.shape() != p.shape()) {
            return Err(Error::Format("optimizer state does not match the network parameters".into()));
        }
        let adam = AdamState { step: adam_step, m, v };
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let step = r.u64()?;
        let nd = r.len(1 << 16)?;
        let draws = (0..nd).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let stored: [u8; 32] = r.take(32)?.try_into().unwrap();
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", body.len() - r.pos)));
        }
        let ckpt = Checkpoint { config, network, adam, rng, step, draws };
        if ckpt.digest() != stored {
            return Err(Error::DigestMismatch);
        }
        Ok(ckpt)
    }

    /// Writes atomically to `path`.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let bytes = self.to_bytes();
        atomic_write(path.as_ref(), |w| Ok(w.write_all(&bytes)?))
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks that the stored run was produced under `config` and
    /// `layout`.
    pub fn load_expecting<P: AsRef<Path>>(path: P, config: &TrainConfig, layout: &FactorLayout) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if config.digest(&config.flow_config(layout.total()), layout) != ckpt.digest() {
            return Err(Error::DigestMismatch);
        }
        Ok(ckpt)
    }
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u8(t.rank() as u8);
        t.shape().iter().for_each(|&d| self.u64(d as u64));
        t.data().iter().for_each(|&x| self.f64(x));
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("checkpoint payload ends early".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size field overflows usize".into()))
    }
    /// A count bounded by `max`.
    fn len(&mut self, max: usize) -> Result<usize> {
        let n = self.usize()?;
        if n > max {
            return Err(Error::Format(format!("count {} exceeds limit {}", n, max)));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.len(1 << 28)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n <= (self.buf.len() - self.pos) / 8)
            .ok_or_else(|| Error::Format("tensor larger than remaining payload".into()))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

fn write_train_config(w: &mut Enc, c: &TrainConfig) {
    w.f64(c.lr);
    w.u64(c.batch as u64);
    w.u64(c.steps);
    w.f64(c.sigma_ab);
    w.u64(c.n_flow as u64);
    w.u64(c.hidden as u64);
    w.u64(c.depth as u64);
    w.u64(c.seed);
    w.u64(c.checkpoint_every.unwrap_or(0));
    w.u8(c.loss_mode.code());
    w.u8(marginal_code(c.marginal_loss));
    w.u8(c.clip_norm.is_some() as u8);
    w.f64(c.clip_norm.unwrap_or(0.0));
}

fn read_train_config(r: &mut Dec) -> Result<TrainConfig> {
    let c = TrainConfig {
        lr: r.f64()?,
        batch: r.usize()?,
        steps: r.u64()?,
        sigma_ab: r.f64()?,
        n_flow: r.usize()?,
        hidden: r.usize()?,
        depth: r.usize()?,
        seed: r.u64()?,
        checkpoint_every: Some(r.u64()?).filter(|&e| e != 0),
        loss_mode: LossMode::from_code(r.u8()?)?,
        marginal_loss: marginal_from_code(r.u8()?)?,
        clip_norm: {
            let has = r.u8()? != 0;
            let v = r.f64()?;
            has.then_some(v)
        },
    };
    c.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(c)
}

fn write_flow_config(w: &mut Enc, f: &FlowConfig) {
    w.u64(f.dim as u64);
    w.u64(f.n_flow as u64);
    w.u64(f.hidden as u64);
    w.u64(f.depth as u64);
    w.f64(f.leaky_slope);
    w.f64(f.scale_bound);
}

fn read_flow_config(r: &mut Dec) -> Result<FlowConfig> {
    let f = FlowConfig {
        dim: r.usize()?,
        n_flow: r.len(1 << 16)?,
        hidden: r.usize()?,
        depth: r.usize()?,
        leaky_slope: r.f64()?,
        scale_bound: r.f64()?,
    };
    f.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::make_world;
    use crate::trainer::data::WorldSource;

    fn config(steps: u64) -> TrainConfig {
        TrainConfig { steps, n_flow: 2, hidden: 8, depth: 1, lr: 1e-3, batch: 8, ..TrainConfig::default() }
    }

    fn layout() -> FactorLayout {
        FactorLayout::new(vec![2, 2]).unwrap()
    }

    fn source() -> WorldSource {
        WorldSource::new(make_world(3, layout(), 0.9).unwrap())
    }

    fn trained(steps: u64) -> Trainer {
        let mut t = Trainer::from_scratch(layout(), config(steps)).unwrap();
        t.run(&mut source(), None, |_| Ok(())).unwrap();
        t
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = trained(3).checkpoint();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn uninitialized_network_round_trips() {
        let t = Trainer::from_scratch(layout(), config(0)).unwrap();
        let ck = t.checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert!(!back.network.is_initialized());
        assert_eq!(back, ck);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = trained(1).checkpoint().to_bytes();
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Format(_))));
        for cut in [0, 7, 40, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut ver = bytes.clone();
        ver[4] = 9;
        match Checkpoint::from_bytes(&ver) {
            Err(Error::Format(m)) => assert!(m.contains("version"), "{}", m),
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.iin");
        let full = trained(10);

        let mut first = Trainer::from_scratch(layout(), config(5)).unwrap();
        first.run(&mut source(), Some(&path), |_| Ok(())).unwrap();
        let mut src = source();
        let mut second = Trainer::resume(Checkpoint::load(&path).unwrap(), config(10), &mut src).unwrap();
        second.run(&mut src, None, |_| Ok(())).unwrap();
        assert_eq!(second.checkpoint(), full.checkpoint());
    }

    #[test]
    fn mismatched_config_is_a_digest_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.iin");
        trained(1).checkpoint().save(&path).unwrap();
        Checkpoint::load_expecting(&path, &config(1), &layout()).unwrap();
        let other_layout = FactorLayout::new(vec![3, 1]).unwrap();
        assert!(matches!(
            Checkpoint::load_expecting(&path, &config(1), &other_layout),
            Err(Error::DigestMismatch)
        ));
        let cfg = TrainConfig { hidden: 16, ..config(1) };
        assert!(matches!(
            Trainer::resume(Checkpoint::load(&path).unwrap(), cfg, &mut source()),
            Err(Error::DigestMismatch)
        ));
    }
}
