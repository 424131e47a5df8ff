use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::flow::FactorLayout;
use crate::numerics::{kernels, Tensor};
use crate::objective::{PairBatch, PairMode};

/// Strength `a` of the elementwise nonlinearity `x + a·tanh(x)`.
pub const MIX_NONLINEARITY: f64 = 0.5;

const NEWTON_TOL: f64 = 1e-12;

/// Elementwise `x + a·tanh(x)`. Strictly increasing for `a ≥ 0`.
pub fn mix_nonlinearity(x: f64) -> f64 {
    x + MIX_NONLINEARITY * x.tanh()
}

/// Inverse of [`mix_nonlinearity`]. The root lies in `[y − a, y + a]`; Newton
/// steps that leave the bracket fall back to bisection.
pub fn unmix_nonlinearity(y: f64) -> f64 {
    let a = MIX_NONLINEARITY;
    let (mut lo, mut hi) = (y - a, y + a);
    let mut x = y / (1.0 + a * (1.0 - (y / (1.0 + a)).tanh().powi(2)));
    for _ in 0..100 {
        let t = x.tanh();
        let f = x + a * t - y;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let step = f / (1.0 + a * (1.0 - t * t));
        let mut next = x - step;
        if !(lo..=hi).contains(&next) {
            next = 0.5 * (lo + hi);
        }
        let done = (next - x).abs() <= NEWTON_TOL * (1.0 + x.abs());
        x = next;
        if done || hi - lo <= NEWTON_TOL {
            break;
        }
    }
    x
}

/// Haar-distributed random orthogonal matrix (QR of a Gaussian matrix with
/// the sign of `R`'s diagonal folded into `Q`).
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let a = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut *rng));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Tensor::matrix(n, n, (0..n * n).map(|k| q[(k / n, k % n)]).collect()).expect("square")
}

/// A synthetic data source with known ground-truth factors.
///
/// Ground truth `g = (g_0, g_1, …, g_K)` is standard normal with factor sizes
/// given by `dims`; observations are `z = mix(g)` where `mix` alternates
/// orthogonal rotations with [`mix_nonlinearity`], ending with a rotation.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    seed: u64,
    dims: FactorLayout,
    sigma_true: f64,
    rotations: Vec<Tensor>,
}

/// A pair batch together with the ground truth that produced it.
#[derive(Debug, Clone)]
pub struct WorldPairs {
    pub batch: PairBatch,
    pub ga: Tensor,
    pub gb: Tensor,
}

/// Builds a world with one nonlinear mixing stage.
pub fn make_world(seed: u64, dims: FactorLayout, sigma_true: f64) -> Result<SyntheticWorld> {
    SyntheticWorld::new(seed, dims, sigma_true, 1)
}

impl SyntheticWorld {
    /// `mix_depth` is the number of nonlinear stages; `0` gives a pure rotation.
    pub fn new(seed: u64, dims: FactorLayout, sigma_true: f64, mix_depth: usize) -> Result<Self> {
        if !(sigma_true > 0.0 && sigma_true < 1.0) {
            return Err(Error::InvalidConfig(format!("sigma_true must lie in (0, 1), got {}", sigma_true)));
        }
        let n = dims.total();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rotations = (0..=mix_depth).map(|_| random_orthogonal(n, &mut rng)).collect();
        Ok(SyntheticWorld { seed, dims, sigma_true, rotations })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dims(&self) -> &FactorLayout {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.dims.total()
    }

    pub fn sigma_true(&self) -> f64 {
        self.sigma_true
    }

    pub fn mix_depth(&self) -> usize {
        self.rotations.len() - 1
    }

    /// Independent generator for sample stream `stream` of this world.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(1));
        rng
    }

    /// `z = mix(g)` row-wise for a `[B, N]` batch of ground truth.
    pub fn mix(&self, g: &Tensor) -> Result<Tensor> {
        self.check_width(g)?;
        let (last, stages) = self.rotations.split_last().expect("at least one rotation");
        let mut x = g.clone();
        for q in stages {
            x = kernels::matmul(&x, q)?;
            x.data_mut().iter_mut().for_each(|v| *v = mix_nonlinearity(*v));
        }
        kernels::matmul(&x, last)
    }

    /// Inverse of [`SyntheticWorld::mix`].
    pub fn unmix(&self, z: &Tensor) -> Result<Tensor> {
        self.check_width(z)?;
        let (last, stages) = self.rotations.split_last().expect("at least one rotation");
        let mut x = kernels::matmul_nt(z, last);
        for q in stages.iter().rev() {
            x.data_mut().iter_mut().for_each(|v| *v = unmix_nonlinearity(*v));
            x = kernels::matmul_nt(&x, q);
        }
        Ok(x)
    }

    /// Draws `batch` independent observations; returns `(z, g)`.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<(Tensor, Tensor)> {
        let g = gaussian(batch, self.dim(), rng);
        Ok((self.mix(&g)?, g))
    }

    /// Pairs sharing (or differing in) `concept`. In share mode factor
    /// `concept` of `gᵇ` is `σ·gᵃ + √(1−σ²)·ε` and all other factors are
    /// independent; differ mode swaps the roles of the factor and its
    /// complement.
    pub fn sample_pairs<R: Rng + ?Sized>(
        &self,
        concept: usize,
        mode: PairMode,
        batch: usize,
        rng: &mut R,
    ) -> Result<PairBatch> {
        Ok(self.sample_pairs_with_truth(concept, mode, batch, rng)?.batch)
    }

    pub fn sample_pairs_with_truth<R: Rng + ?Sized>(
        &self,
        concept: usize,
        mode: PairMode,
        batch: usize,
        rng: &mut R,
    ) -> Result<WorldPairs> {
        self.dims.check_concept(concept)?;
        let n = self.dim();
        let range = self.dims.range(concept)?;
        let ga = gaussian(batch, n, rng);
        let noise = gaussian(batch, n, rng);
        let s = self.sigma_true;
        let c = (1.0 - s * s).sqrt();
        let mut gb = noise.clone();
        for r in 0..batch {
            for i in 0..n {
                let correlated = range.contains(&i) == (mode == PairMode::Share);
                if correlated {
                    gb.data_mut()[r * n + i] = s * ga.get(r, i) + c * noise.get(r, i);
                }
            }
        }
        let pb = PairBatch::new(self.mix(&ga)?, self.mix(&gb)?, concept, mode)?;
        Ok(WorldPairs { batch: pb, ga, gb })
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.dim() {
            return Err(Error::dim(format!(
                "world of dimension {} given tensor of shape {:?}",
                self.dim(),
                x.shape()
            )));
        }
        Ok(())
    }
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let d = (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Tensor::matrix(rows, cols, d).expect("sized")
}
