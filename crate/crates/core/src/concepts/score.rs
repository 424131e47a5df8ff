use crate::error::{Error, Result};
use crate::flow::FactorLayout;
use crate::numerics::Tensor;
use crate::objective::PairBatch;

/// Below this product of variances a component's correlation is taken as 0.
pub const VARIANCE_EPS: f64 = 1e-12;

/// Streaming per-component correlation between the two members of pairs.
///
/// Uses Welford-style co-moment updates so long streams do not lose precision.
#[derive(Debug, Clone)]
pub struct CorrelationAccumulator {
    count: u64,
    mean_a: Vec<f64>,
    mean_b: Vec<f64>,
    m2_a: Vec<f64>,
    m2_b: Vec<f64>,
    co: Vec<f64>,
}

impl CorrelationAccumulator {
    pub fn new(dim: usize) -> Self {
        CorrelationAccumulator {
            count: 0,
            mean_a: vec![0.0; dim],
            mean_b: vec![0.0; dim],
            m2_a: vec![0.0; dim],
            m2_b: vec![0.0; dim],
            co: vec![0.0; dim],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push_pair(&mut self, a: &[f64], b: &[f64]) -> Result<()> {
        let n = self.mean_a.len();
        if a.len() != n || b.len() != n {
            return Err(Error::dim(format!(
                "pair of widths {}/{} pushed into accumulator of width {}",
                a.len(),
                b.len(),
                n
            )));
        }
        self.count += 1;
        let c = self.count as f64;
        for i in 0..n {
            let da = a[i] - self.mean_a[i];
            let db = b[i] - self.mean_b[i];
            self.mean_a[i] += da / c;
            self.mean_b[i] += db / c;
            self.m2_a[i] += da * (a[i] - self.mean_a[i]);
            self.m2_b[i] += db * (b[i] - self.mean_b[i]);
            self.co[i] += da * (b[i] - self.mean_b[i]);
        }
        Ok(())
    }

    pub fn push(&mut self, za: &Tensor, zb: &Tensor) -> Result<()> {
        if za.shape() != zb.shape() {
            return Err(Error::dim("pair streams differ in shape"));
        }
        for r in 0..za.rows() {
            self.push_pair(za.row(r), zb.row(r))?;
        }
        Ok(())
    }

    /// Per-component sample correlations, clamped to `[-1, 1]`.
    pub fn correlations(&self) -> Result<Vec<f64>> {
        if self.count < 2 {
            return Err(Error::InvalidConfig(format!(
                "correlation needs at least 2 pairs, got {}",
                self.count
            )));
        }
        let d = (self.count - 1) as f64;
        Ok((0..self.mean_a.len())
            .map(|i| {
                let (va, vb) = (self.m2_a[i] / d, self.m2_b[i] / d);
                if va * vb < VARIANCE_EPS {
                    0.0
                } else {
                    (self.co[i] / d / (va * vb).sqrt()).clamp(-1.0, 1.0)
                }
            })
            .collect())
    }

    /// `s_F = Σ_i corr(zᵃ_i, zᵇ_i)`.
    pub fn score(&self) -> Result<f64> {
        Ok(self.correlations()?.iter().sum())
    }
}

/// Score of a concept from a stream of pair batches.
pub fn score_concept<'a, I>(batches: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a PairBatch>,
{
    let mut acc: Option<CorrelationAccumulator> = None;
    for b in batches {
        acc.get_or_insert_with(|| CorrelationAccumulator::new(b.dim()))
            .push(&b.za, &b.zb)?;
    }
    match acc {
        Some(a) => a.score(),
        None => Err(Error::InvalidConfig("no pairs to score".into())),
    }
}

/// Relative scores `(s_0, s_1, …, s_K)` with `s_0 = N` for the residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptScores {
    scores: Vec<f64>,
}

impl ConceptScores {
    pub fn new(dim: usize, concept_scores: Vec<f64>) -> Result<Self> {
        let n = dim as f64;
        for (k, s) in concept_scores.iter().enumerate() {
            if !s.is_finite() || s.abs() > n + 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "score of concept {} is {}, outside [-{}, {}]",
                    k + 1,
                    s,
                    dim,
                    dim
                )));
            }
        }
        let mut scores = Vec::with_capacity(concept_scores.len() + 1);
        scores.push(n);
        scores.extend(concept_scores);
        Ok(ConceptScores { scores })
    }

    /// All scores, residual first.
    pub fn all(&self) -> &[f64] {
        &self.scores
    }

    pub fn concept(&self, f: usize) -> f64 {
        self.scores[f]
    }

    pub fn num_concepts(&self) -> usize {
        self.scores.len() - 1
    }
}

/// Turns scores into a layout: `N_F = ⌊softmax(s)_F · N⌋` for each concept,
/// the flooring remainder goes to the residual, and every factor gets at
/// least one dimension.
pub fn allocate_dims(scores: &ConceptScores, dim: usize) -> Result<FactorLayout> {
    let k = scores.num_concepts();
    if dim < k + 1 {
        return Err(Error::InvalidConfig(format!(
            "{} dimensions cannot hold {} factors",
            dim,
            k + 1
        )));
    }
    let s = scores.all();
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut dims = vec![0usize; k + 1];
    for f in 1..=k {
        dims[f] = (w[f] / z * dim as f64).floor() as usize;
    }
    dims[0] = dim - dims[1..].iter().sum::<usize>();
    while let Some(f) = dims.iter().position(|&d| d == 0) {
        let donor = if dims[0] > 1 {
            0
        } else {
            (0..dims.len()).max_by_key(|&i| dims[i]).expect("non-empty")
        };
        dims[donor] -= 1;
        dims[f] += 1;
    }
    FactorLayout::new(dims)
}
