//! The three invertible layers that make up one flow block.

use rand::seq::SliceRandom;
use rand::Rng;

use super::mlp::Mlp;
use crate::error::{Error, Result};
use crate::numerics::{kernels, Tape, Tensor, Unary, Var};

/// Floor applied to per-channel standard deviations during actnorm init.
pub const ACTNORM_EPS: f64 = 1e-6;

/// Bound `c` of the coupling log-scale: `log s = c · tanh(raw)`.
pub const DEFAULT_SCALE_BOUND: f64 = 1.5;

/// A bijection on `[B, N]` batches with a tractable log-determinant.
pub trait InvertibleLayer {
    /// Returns `y` and the per-sample log-determinant `[B]`.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)>;

    /// Returns `x` and the per-sample log-determinant of the inverse map at `y`.
    fn inverse_with_logdet(&self, y: &Tensor) -> Result<(Tensor, Tensor)>;

    fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        Ok(self.inverse_with_logdet(y)?.0)
    }

    /// Records the forward pass. The log-determinant is `[B]` or a scalar to be
    /// broadcast; `None` means zero.
    fn record(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<(Var, Option<Var>)>;

    fn parameters(&self) -> Vec<&Tensor>;

    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
}

fn per_sample(ld: &Tensor, batch: usize) -> Result<Tensor> {
    kernels::add_broadcast(&Tensor::zeros(&[batch]), ld)
}

/// Fixed channel permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleLayer {
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
}

impl ShuffleLayer {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut inv = vec![usize::MAX; n];
        for (i, &p) in perm.iter().enumerate() {
            if p >= n || inv[p] != usize::MAX {
                return Err(Error::InvalidConfig(format!(
                    "{:?} is not a permutation",
                    perm
                )));
            }
            inv[p] = i;
        }
        Ok(ShuffleLayer {
            perm,
            inv_perm: inv,
        })
    }

    pub fn identity(n: usize) -> Self {
        ShuffleLayer::new((0..n).collect()).expect("identity is a permutation")
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        ShuffleLayer::new(perm).expect("shuffled range is a permutation")
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv_perm(&self) -> &[usize] {
        &self.inv_perm
    }
}

impl InvertibleLayer for ShuffleLayer {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let y = kernels::permute_cols(x, &self.perm)?;
        Ok((y, Tensor::zeros(&[x.rows()])))
    }

    fn inverse_with_logdet(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = kernels::permute_cols(y, &self.inv_perm)?;
        Ok((x, Tensor::zeros(&[y.rows()])))
    }

    fn record(&self, tape: &mut Tape, _params: &[Var], x: Var) -> Result<(Var, Option<Var>)> {
        Ok((tape.permute_cols(x, &self.perm)?, None))
    }

    fn parameters(&self) -> Vec<&Tensor> {
        Vec::new()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }
}

/// Per-channel affine `y = x · scale + shift` with data-dependent init.
#[derive(Debug, Clone, PartialEq)]
pub struct ActNormLayer {
    scale: Tensor,
    shift: Tensor,
    initialized: bool,
}

impl ActNormLayer {
    pub fn new(n: usize) -> Self {
        ActNormLayer {
            scale: Tensor::full(&[n], 1.0),
            shift: Tensor::zeros(&[n]),
            initialized: false,
        }
    }

    /// An already initialized layer with the given parameters.
    pub fn with_params(scale: Vec<f64>, shift: Vec<f64>) -> Result<Self> {
        if scale.len() != shift.len() {
            return Err(Error::dim("actnorm scale and shift lengths differ"));
        }
        if scale.iter().any(|s| *s == 0.0 || !s.is_finite()) {
            return Err(Error::InvalidConfig("actnorm scales must be finite and nonzero".into()));
        }
        Ok(ActNormLayer {
            scale: Tensor::vector(scale),
            shift: Tensor::vector(shift),
            initialized: true,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn scale(&self) -> &Tensor {
        &self.scale
    }

    pub fn shift(&self) -> &Tensor {
        &self.shift
    }

    /// Sets `scale = 1/std'` and `shift = -mean/std'` per channel, where
    /// `std' = max(std, ε)` is the population standard deviation of `batch`.
    pub fn initialize(&mut self, batch: &Tensor) -> Result<()> {
        if self.initialized {
            return Err(Error::AlreadyInitialized);
        }
        let (b, n) = batch.expect_rank2("actnorm_init")?;
        if b < 2 {
            return Err(Error::InvalidConfig(format!(
                "actnorm init needs at least 2 samples, got {}",
                b
            )));
        }
        if n != self.scale.numel() {
            return Err(Error::dim(format!(
                "actnorm of width {} initialized with {} channels",
                self.scale.numel(),
                n
            )));
        }
        let mean = kernels::column_mean(batch)?;
        let mut var = vec![0.0; n];
        for i in 0..b {
            for (j, v) in batch.row(i).iter().enumerate() {
                let d = v - mean.data()[j];
                var[j] += d * d;
            }
        }
        for j in 0..n {
            let std = (var[j] / b as f64).sqrt().max(ACTNORM_EPS);
            self.scale.data_mut()[j] = 1.0 / std;
            self.shift.data_mut()[j] = -mean.data()[j] / std;
        }
        self.initialized = true;
        Ok(())
    }

    pub(crate) fn set_initialized(&mut self, v: bool) {
        self.initialized = v;
    }

    fn check(&self) -> Result<()> {
        if !self.initialized {
            return Err(Error::NotInitialized);
        }
        Ok(())
    }

    fn logdet(&self) -> Result<Tensor> {
        let l = kernels::unary(&self.scale, Unary::LogAbs)?;
        Ok(kernels::sum_all(&l))
    }
}

impl InvertibleLayer for ActNormLayer {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check()?;
        let y = kernels::add_broadcast(&kernels::mul_broadcast(x, &self.scale)?, &self.shift)?;
        Ok((y, per_sample(&self.logdet()?, x.rows())?))
    }

    fn inverse_with_logdet(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check()?;
        let n = self.scale.numel();
        if y.cols() != n {
            return Err(Error::dim(format!("actnorm of width {} got width {}", n, y.cols())));
        }
        let mut x = y.clone();
        for row in x.data_mut().chunks_mut(n) {
            for ((v, s), t) in row.iter_mut().zip(self.scale.data()).zip(self.shift.data()) {
                *v = (*v - t) / s;
            }
        }
        let ld = kernels::scale(&self.logdet()?, -1.0);
        Ok((x, per_sample(&ld, y.rows())?))
    }

    fn record(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<(Var, Option<Var>)> {
        self.check()?;
        let (scale, shift) = (params[0], params[1]);
        let m = tape.mul_broadcast(x, scale)?;
        let y = tape.add_broadcast(m, shift)?;
        let l = tape.unary(scale, Unary::LogAbs)?;
        Ok((y, Some(tape.sum_all(l))))
    }

    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.scale, &self.shift]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.scale, &mut self.shift]
    }
}

/// Affine coupling on the two halves `h = (h_1, h_2)`:
///
/// ```text
/// h̃_1 = h_1 · s_1(h_2) + t_1(h_2)
/// h̃_2 = h_2 · s_2(h̃_1) + t_2(h̃_1)
/// ```
///
/// with `s_i = exp(c · tanh(raw_i))` so scales stay positive and bounded.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    s1: Mlp,
    t1: Mlp,
    s2: Mlp,
    t2: Mlp,
    half: usize,
    scale_bound: f64,
}

impl CouplingLayer {
    pub fn new(s1: Mlp, t1: Mlp, s2: Mlp, t2: Mlp, dim: usize, scale_bound: f64) -> Result<Self> {
        if dim % 2 != 0 || dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "coupling needs an even, nonzero width, got {}",
                dim
            )));
        }
        Ok(CouplingLayer {
            s1,
            t1,
            s2,
            t2,
            half: dim / 2,
            scale_bound,
        })
    }

    pub fn subnets(&self) -> [&Mlp; 4] {
        [&self.s1, &self.t1, &self.s2, &self.t2]
    }

    pub fn subnets_mut(&mut self) -> [&mut Mlp; 4] {
        [&mut self.s1, &mut self.t1, &mut self.s2, &mut self.t2]
    }

    pub fn scale_bound(&self) -> f64 {
        self.scale_bound
    }

    fn log_scale(&self, net: &Mlp, x: &Tensor) -> Result<Tensor> {
        let raw = net.eval(x)?;
        Ok(kernels::scale(&kernels::unary(&raw, Unary::Tanh)?, self.scale_bound))
    }

    fn split(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.rank() != 2 || x.cols() != 2 * self.half {
            return Err(Error::dim(format!(
                "coupling of width {} got shape {:?}",
                2 * self.half,
                x.shape()
            )));
        }
        Ok((
            kernels::slice_cols(x, 0, self.half)?,
            kernels::slice_cols(x, self.half, self.half)?,
        ))
    }
}

impl InvertibleLayer for CouplingLayer {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (h1, h2) = self.split(x)?;
        let ls1 = self.log_scale(&self.s1, &h2)?;
        let e1 = kernels::unary(&ls1, Unary::Exp)?;
        let y1 = kernels::add(&kernels::mul(&h1, &e1)?, &self.t1.eval(&h2)?)?;
        let ls2 = self.log_scale(&self.s2, &y1)?;
        let e2 = kernels::unary(&ls2, Unary::Exp)?;
        let y2 = kernels::add(&kernels::mul(&h2, &e2)?, &self.t2.eval(&y1)?)?;
        let ld = kernels::add(
            &kernels::reduce_sum(&ls1, &[1])?,
            &kernels::reduce_sum(&ls2, &[1])?,
        )?;
        Ok((kernels::concat_cols(&[&y1, &y2])?, ld))
    }

    fn inverse_with_logdet(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let (y1, y2) = self.split(y)?;
        let ls2 = self.log_scale(&self.s2, &y1)?;
        let e2 = kernels::unary(&ls2, Unary::Exp)?;
        let h2 = kernels::div(&kernels::sub(&y2, &self.t2.eval(&y1)?)?, &e2)?;
        let ls1 = self.log_scale(&self.s1, &h2)?;
        let e1 = kernels::unary(&ls1, Unary::Exp)?;
        let h1 = kernels::div(&kernels::sub(&y1, &self.t1.eval(&h2)?)?, &e1)?;
        let ld = kernels::add(
            &kernels::reduce_sum(&ls1, &[1])?,
            &kernels::reduce_sum(&ls2, &[1])?,
        )?;
        Ok((kernels::concat_cols(&[&h1, &h2])?, kernels::scale(&ld, -1.0)))
    }

    fn record(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<(Var, Option<Var>)> {
        let mut offsets = [0usize; 5];
        for (i, net) in self.subnets().iter().enumerate() {
            offsets[i + 1] = offsets[i] + net.num_tensors();
        }
        let p = |i: usize| &params[offsets[i]..offsets[i + 1]];
        let c = self.scale_bound;

        let h1 = tape.slice_cols(x, 0, self.half)?;
        let h2 = tape.slice_cols(x, self.half, self.half)?;

        let r1 = self.s1.record(tape, p(0), h2)?;
        let a1 = tape.tanh(r1)?;
        let ls1 = tape.scale(a1, c);
        let e1 = tape.exp(ls1)?;
        let m1 = tape.mul(h1, e1)?;
        let t1 = self.t1.record(tape, p(1), h2)?;
        let y1 = tape.add(m1, t1)?;

        let r2 = self.s2.record(tape, p(2), y1)?;
        let a2 = tape.tanh(r2)?;
        let ls2 = tape.scale(a2, c);
        let e2 = tape.exp(ls2)?;
        let m2 = tape.mul(h2, e2)?;
        let t2 = self.t2.record(tape, p(3), y1)?;
        let y2 = tape.add(m2, t2)?;

        let l1 = tape.reduce_sum(ls1, &[1])?;
        let l2 = tape.reduce_sum(ls2, &[1])?;
        let ld = tape.add(l1, l2)?;
        Ok((tape.concat_cols(&[y1, y2])?, Some(ld)))
    }

    fn parameters(&self) -> Vec<&Tensor> {
        self.subnets().into_iter().flat_map(|n| n.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let [a, b, c, d] = self.subnets_mut();
        a.parameters_mut()
            .chain(b.parameters_mut())
            .chain(c.parameters_mut())
            .chain(d.parameters_mut())
            .collect()
    }
}
