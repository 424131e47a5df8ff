use std::ops::Range;

use super::mean_sq;
use crate::error::{Error, Result};
use crate::flow::InterpretationNetwork;
use crate::numerics::{Tape, Tensor, Var};

/// Pair correlation used for all experiments unless configured otherwise.
pub const DEFAULT_SIGMA_AB: f64 = 0.9;

/// Whether the two members of a pair share or differ in their concept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairMode {
    Share,
    Differ,
}

impl PairMode {
    pub fn code(self) -> u8 {
        match self {
            PairMode::Share => 0,
            PairMode::Differ => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(PairMode::Share),
            1 => Ok(PairMode::Differ),
            other => Err(Error::Format(format!("unknown pair mode {}", other))),
        }
    }
}

impl std::str::FromStr for PairMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "share" => Ok(PairMode::Share),
            "differ" => Ok(PairMode::Differ),
            other => Err(Error::Format(format!("unknown pair mode {:?}", other))),
        }
    }
}

/// A batch of latent pairs `(zᵃ, zᵇ)` for one concept.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub za: Tensor,
    pub zb: Tensor,
    pub concept: usize,
    pub mode: PairMode,
}

impl PairBatch {
    pub fn new(za: Tensor, zb: Tensor, concept: usize, mode: PairMode) -> Result<Self> {
        za.expect_rank2("pair batch")?;
        if za.shape() != zb.shape() {
            return Err(Error::dim(format!(
                "pair streams have shapes {:?} and {:?}",
                za.shape(),
                zb.shape()
            )));
        }
        if concept == 0 {
            return Err(Error::Layout("the residual factor has no training pairs".into()));
        }
        Ok(PairBatch { za, zb, concept, mode })
    }

    pub fn len(&self) -> usize {
        self.za.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.za.cols()
    }

    /// Rows of both streams stacked as `[2B, N]`.
    pub fn stacked(&self) -> Result<Tensor> {
        crate::numerics::kernels::concat_rows(&[&self.za, &self.zb])
    }
}

/// Pair correlation `σ_ab ∈ (0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationConfig {
    sigma_ab: f64,
}

impl CorrelationConfig {
    pub fn new(sigma_ab: f64) -> Result<Self> {
        if !(sigma_ab > 0.0 && sigma_ab < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma_ab must lie in (0, 1), got {}",
                sigma_ab
            )));
        }
        Ok(CorrelationConfig { sigma_ab })
    }

    pub fn sigma_ab(&self) -> f64 {
        self.sigma_ab
    }

    /// Conditional variance `1 − σ_ab²`.
    pub fn conditional_variance(&self) -> f64 {
        1.0 - self.sigma_ab * self.sigma_ab
    }
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        CorrelationConfig {
            sigma_ab: DEFAULT_SIGMA_AB,
        }
    }
}

/// Batch means of the individual loss terms; `total` combines them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLossTerms<T> {
    pub total: T,
    /// `‖T(zᵃ)‖²`
    pub marginal_a: T,
    /// `log|T'(zᵃ)|`
    pub logdet_a: T,
    /// Squared norm of the factors of `T(zᵇ)` that are modeled as independent of `zᵃ`.
    pub marginal_b: T,
    /// `log|T'(zᵇ)|`
    pub logdet_b: T,
    /// Scaled squared residual of the correlated factors.
    pub conditional: T,
}

fn sum_ranges(
    tape: &mut Tape,
    ranges: &[Range<usize>],
    batch: usize,
    mut term: impl FnMut(&mut Tape, Range<usize>) -> Result<Var>,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for r in ranges {
        let v = term(tape, r.clone())?;
        let s = mean_sq(tape, v, batch)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

/// Records the mean per-pair loss of `batch` on the tape.
pub fn record_pair_loss(
    tape: &mut Tape,
    net: &InterpretationNetwork,
    params: &[Var],
    batch: &PairBatch,
    corr: &CorrelationConfig,
) -> Result<PairLossTerms<Var>> {
    let layout = net.layout();
    layout.check_concept(batch.concept)?;
    if batch.dim() != net.dim() {
        return Err(Error::dim(format!(
            "pairs have dimension {}, network expects {}",
            batch.dim(),
            net.dim()
        )));
    }
    let b = batch.len();
    if b == 0 {
        return Err(Error::dim("empty pair batch"));
    }

    let za = tape.constant(batch.za.clone());
    let zb = tape.constant(batch.zb.clone());
    let (ya, lda) = net.record(tape, params, za)?;
    let (yb, ldb) = net.record(tape, params, zb)?;

    let marginal_a = mean_sq(tape, ya, b)?;
    let lda_sum = tape.sum_all(lda);
    let logdet_a = tape.scale(lda_sum, 1.0 / b as f64);
    let ldb_sum = tape.sum_all(ldb);
    let logdet_b = tape.scale(ldb_sum, 1.0 / b as f64);

    let own = vec![layout.range(batch.concept)?];
    let rest = layout.complement(batch.concept)?;
    let (independent, correlated) = match batch.mode {
        PairMode::Share => (rest, own),
        PairMode::Differ => (own, rest),
    };

    let marginal_b = sum_ranges(tape, &independent, b, |t, r| t.slice_cols(yb, r.start, r.len()))?;
    let sigma = corr.sigma_ab();
    let residual = sum_ranges(tape, &correlated, b, |t, r| {
        let bf = t.slice_cols(yb, r.start, r.len())?;
        let af = t.slice_cols(ya, r.start, r.len())?;
        let scaled = t.scale(af, sigma);
        t.sub(bf, scaled)
    })?;
    let conditional = tape.scale(residual, 1.0 / corr.conditional_variance());

    let t1 = tape.sub(marginal_a, logdet_a)?;
    let t2 = tape.add(t1, marginal_b)?;
    let t3 = tape.sub(t2, logdet_b)?;
    let total = tape.add(t3, conditional)?;

    Ok(PairLossTerms {
        total,
        marginal_a,
        logdet_a,
        marginal_b,
        logdet_b,
        conditional,
    })
}

/// Evaluates the mean per-pair loss of `batch`.
pub fn pair_loss(
    net: &InterpretationNetwork,
    batch: &PairBatch,
    corr: &CorrelationConfig,
) -> Result<PairLossTerms<f64>> {
    let mut tape = Tape::new();
    let params = net.register(&mut tape, false);
    let terms = record_pair_loss(&mut tape, net, &params, batch, corr)?;
    let v = |x: Var| tape.value(x).data()[0];
    let out = PairLossTerms {
        total: v(terms.total),
        marginal_a: v(terms.marginal_a),
        logdet_a: v(terms.logdet_a),
        marginal_b: v(terms.marginal_b),
        logdet_b: v(terms.logdet_b),
        conditional: v(terms.conditional),
    };
    if !out.total.is_finite() {
        return Err(Error::NonFinite("pair loss".into()));
    }
    Ok(out)
}

/// Sum over concepts `F = 1..=K` of the mean pair loss of that concept's batches.
pub fn objective(
    net: &InterpretationNetwork,
    batches: &[PairBatch],
    corr: &CorrelationConfig,
) -> Result<f64> {
    let k = net.layout().num_concepts();
    let mut total = 0.0;
    for concept in 1..=k {
        let mut sum = 0.0;
        let mut count = 0usize;
        for b in batches.iter().filter(|b| b.concept == concept) {
            sum += pair_loss(net, b, corr)?.total;
            count += 1;
        }
        if count == 0 {
            return Err(Error::MissingConcept(concept));
        }
        total += sum / count as f64;
    }
    if let Some(b) = batches.iter().find(|b| b.concept > k) {
        return Err(Error::Layout(format!(
            "batch for concept {} but layout has {} concepts",
            b.concept, k
        )));
    }
    Ok(total)
}
