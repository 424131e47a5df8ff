use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{kernels, Tensor};

/// Partition of an `N`-dimensional code into factors `(N_0, N_1, …, N_K)`.
///
/// Factor 0 is always the residual; factors `1..=K` are semantic concepts.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FactorLayout {
    dims: Vec<usize>,
}

impl FactorLayout {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Layout("layout needs at least the residual factor".into()));
        }
        if let Some(k) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Layout(format!("factor {} has zero dimensions", k)));
        }
        Ok(FactorLayout { dims })
    }

    /// Single residual factor spanning all `n` dimensions.
    pub fn residual_only(n: usize) -> Result<Self> {
        FactorLayout::new(vec![n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Total dimensionality `N = Σ N_k`.
    pub fn total(&self) -> usize {
        self.dims.iter().sum()
    }

    /// Number of semantic factors `K` (excluding the residual).
    pub fn num_concepts(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_factors(&self) -> usize {
        self.dims.len()
    }

    pub fn offset(&self, k: usize) -> usize {
        self.dims[..k].iter().sum()
    }

    /// Column range of factor `k`.
    pub fn range(&self, k: usize) -> Result<Range<usize>> {
        if k >= self.dims.len() {
            return Err(Error::Layout(format!(
                "factor index {} out of range for {} factors",
                k,
                self.dims.len()
            )));
        }
        let start = self.offset(k);
        Ok(start..start + self.dims[k])
    }

    /// Column ranges of every factor other than `k`, merged where contiguous.
    pub fn complement(&self, k: usize) -> Result<Vec<Range<usize>>> {
        let r = self.range(k)?;
        let mut out = Vec::new();
        if r.start > 0 {
            out.push(0..r.start);
        }
        if r.end < self.total() {
            out.push(r.end..self.total());
        }
        Ok(out)
    }

    pub fn check_concept(&self, concept: usize) -> Result<()> {
        if concept == 0 || concept > self.num_concepts() {
            return Err(Error::Layout(format!(
                "concept {} outside 1..={}",
                concept,
                self.num_concepts()
            )));
        }
        Ok(())
    }

    /// Parses a comma separated list such as `8,4,4`.
    pub fn parse(s: &str) -> Result<Self> {
        let dims = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Layout(format!("bad factor size {:?}", p.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        FactorLayout::new(dims)
    }
}

impl fmt::Display for FactorLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Splits `[B, N]` codes into per-factor `[B, N_k]` blocks.
pub fn split(codes: &Tensor, layout: &FactorLayout) -> Result<Vec<Tensor>> {
    let (_, n) = codes.expect_rank2("split")?;
    if n != layout.total() {
        return Err(Error::Layout(format!(
            "layout {} covers {} dimensions, codes have {}",
            layout,
            layout.total(),
            n
        )));
    }
    (0..layout.num_factors())
        .map(|k| kernels::slice_cols(codes, layout.offset(k), layout.dims()[k]))
        .collect()
}

/// Inverse of [`split`].
pub fn concat(factors: &[Tensor], layout: &FactorLayout) -> Result<Tensor> {
    if factors.len() != layout.num_factors() {
        return Err(Error::Layout(format!(
            "expected {} factors, got {}",
            layout.num_factors(),
            factors.len()
        )));
    }
    for (k, (f, &d)) in factors.iter().zip(layout.dims()).enumerate() {
        if f.rank() != 2 || f.cols() != d {
            return Err(Error::dim(format!(
                "factor {} has shape {:?}, layout expects width {}",
                k,
                f.shape(),
                d
            )));
        }
    }
    let refs: Vec<&Tensor> = factors.iter().collect();
    kernels::concat_cols(&refs)
}
