use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::concepts::{random_orthogonal, read_pairs, PairReader, SyntheticWorld};
use crate::error::{Error, Result};
use crate::numerics::{kernels, Tensor};
use crate::objective::{PairBatch, PairMode};

/// Supplies training batches. Randomized sources draw only from the rng
/// they are handed, so the trainer's rng state fully determines the stream.
pub trait DataSource {
    fn dim(&self) -> usize;

    /// Whether pairs for `concept` are available.
    fn has_concept(&self, concept: usize) -> bool;

    fn pairs(&mut self, concept: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<PairBatch>;

    fn latents(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Tensor>;

    /// Repositions a sequential source after `draws[c]` batches of `batch`
    /// rows have been taken for concept `c` (index 0 counts plain latents).
    fn restore(&mut self, draws: &[u64], batch: usize) -> Result<()> {
        let _ = (draws, batch);
        Ok(())
    }
}

/// Pairs and latents drawn from a [`SyntheticWorld`].
#[derive(Debug, Clone)]
pub struct WorldSource {
    pub world: SyntheticWorld,
    pub mode: PairMode,
}

impl WorldSource {
    pub fn new(world: SyntheticWorld) -> Self {
        WorldSource { world, mode: PairMode::Share }
    }
}

impl DataSource for WorldSource {
    fn dim(&self) -> usize {
        self.world.dim()
    }

    fn has_concept(&self, concept: usize) -> bool {
        self.world.dims().check_concept(concept).is_ok()
    }

    fn pairs(&mut self, concept: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<PairBatch> {
        self.world.sample_pairs(concept, self.mode, batch, rng)
    }

    fn latents(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(self.world.sample(batch, rng)?.0)
    }
}

/// Linearly mixed Gaussian latents `z = A·ε`.
#[derive(Debug, Clone)]
pub struct LinearGaussianSource {
    mixing: Tensor,
}

impl LinearGaussianSource {
    /// `mixing` is the square matrix `A`.
    pub fn new(mixing: Tensor) -> Result<Self> {
        let (r, c) = (mixing.rows(), mixing.cols());
        if mixing.rank() != 2 || r != c {
            return Err(Error::dim(format!("mixing matrix must be square, got {:?}", mixing.shape())));
        }
        Ok(LinearGaussianSource { mixing })
    }

    /// `A = U·diag(s)·Vᵀ` with random orthogonal `U`, `V` and singular
    /// values uniform in `[0.5, 2]`.
    pub fn random(dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_orthogonal(dim, &mut rng);
        let v = random_orthogonal(dim, &mut rng);
        let s: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..=2.0)).collect();
        let mut us = u;
        for r in 0..dim {
            for (c, sc) in s.iter().enumerate() {
                us.data_mut()[r * dim + c] *= sc;
            }
        }
        LinearGaussianSource::new(kernels::matmul_nt(&us, &v))
    }

    pub fn mixing(&self) -> &Tensor {
        &self.mixing
    }

    /// `log|det A|`.
    pub fn log_abs_det(&self) -> f64 {
        let n = self.mixing.rows();
        nalgebra::DMatrix::from_row_slice(n, n, self.mixing.data()).lu().determinant().abs().ln()
    }
}

impl DataSource for LinearGaussianSource {
    fn dim(&self) -> usize {
        self.mixing.rows()
    }

    fn has_concept(&self, _concept: usize) -> bool {
        false
    }

    fn pairs(&mut self, concept: usize, _batch: usize, _rng: &mut ChaCha8Rng) -> Result<PairBatch> {
        Err(Error::MissingConcept(concept))
    }

    fn latents(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n = self.dim();
        let eps = Tensor::matrix(batch, n, (0..batch * n).map(|_| StandardNormal.sample(rng)).collect())?;
        Ok(kernels::matmul_nt(&eps, &self.mixing))
    }
}

/// Pairs streamed from pair files, one file per concept, read cyclically.
#[derive(Debug)]
pub struct PairFileSource {
    dim: usize,
    readers: BTreeMap<usize, PairReader>,
}

impl PairFileSource {
    /// Opens every path; each file's header names its concept.
    pub fn open<P: AsRef<Path>>(paths: &[P], dim: usize) -> Result<Self> {
        let mut readers = BTreeMap::new();
        for p in paths {
            let r = read_pairs(p.as_ref())?.expect_dim(dim)?;
            if r.header().rows == 0 {
                return Err(Error::Format(format!("{} holds no pairs", p.as_ref().display())));
            }
            let c = r.header().concept as usize;
            if readers.insert(c, r).is_some() {
                return Err(Error::Format(format!("two pair files for concept {}", c)));
            }
        }
        Ok(PairFileSource { dim, readers })
    }

    pub fn concepts(&self) -> Vec<usize> {
        self.readers.keys().copied().collect()
    }
}

fn read_cyclic(reader: &mut PairReader, batch: usize) -> Result<PairBatch> {
    let mut parts = Vec::new();
    let mut got = 0;
    while got < batch {
        match reader.next_batch(batch - got)? {
            Some(b) => {
                got += b.len();
                parts.push(b);
            }
            None => reader.rewind()?,
        }
    }
    if parts.len() == 1 {
        return Ok(parts.pop().expect("one part"));
    }
    let za: Vec<&Tensor> = parts.iter().map(|p| &p.za).collect();
    let zb: Vec<&Tensor> = parts.iter().map(|p| &p.zb).collect();
    PairBatch::new(kernels::concat_rows(&za)?, kernels::concat_rows(&zb)?, parts[0].concept, parts[0].mode)
}

impl DataSource for PairFileSource {
    fn dim(&self) -> usize {
        self.dim
    }

    fn has_concept(&self, concept: usize) -> bool {
        self.readers.contains_key(&concept)
    }

    fn pairs(&mut self, concept: usize, batch: usize, _rng: &mut ChaCha8Rng) -> Result<PairBatch> {
        let r = self.readers.get_mut(&concept).ok_or(Error::MissingConcept(concept))?;
        read_cyclic(r, batch)
    }

    fn latents(&mut self, _batch: usize, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Err(Error::InvalidConfig("pair files provide pairs, not plain latents".into()))
    }

    fn restore(&mut self, draws: &[u64], batch: usize) -> Result<()> {
        for (&c, r) in self.readers.iter_mut() {
            let taken = draws.get(c).copied().unwrap_or(0) * batch as u64;
            r.seek_row(taken % r.header().rows)?;
        }
        Ok(())
    }
}

/// Plain latents held in memory (for example loaded from CSV), served cyclically.
#[derive(Debug, Clone)]
pub struct LatentTableSource {
    data: Tensor,
    cursor: usize,
}

impl LatentTableSource {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 2 || data.rows() == 0 {
            return Err(Error::Format("latent table is empty".into()));
        }
        Ok(LatentTableSource { data, cursor: 0 })
    }

    /// Headerless numeric CSV, one latent per row.
    pub fn from_csv(path: &Path) -> Result<Self> {
        LatentTableSource::new(crate::io::read_latents_csv(path)?)
    }
}

impl DataSource for LatentTableSource {
    fn dim(&self) -> usize {
        self.data.cols()
    }

    fn has_concept(&self, _concept: usize) -> bool {
        false
    }

    fn pairs(&mut self, concept: usize, _batch: usize, _rng: &mut ChaCha8Rng) -> Result<PairBatch> {
        Err(Error::MissingConcept(concept))
    }

    fn latents(&mut self, batch: usize, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let (rows, n) = (self.data.rows(), self.data.cols());
        let mut out = Vec::with_capacity(batch * n);
        for _ in 0..batch {
            out.extend_from_slice(self.data.row(self.cursor));
            self.cursor = (self.cursor + 1) % rows;
        }
        Tensor::matrix(batch, n, out)
    }

    fn restore(&mut self, draws: &[u64], batch: usize) -> Result<()> {
        let taken = draws.first().copied().unwrap_or(0) * batch as u64;
        self.cursor = (taken % self.data.rows() as u64) as usize;
        Ok(())
    }
}
