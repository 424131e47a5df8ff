//! Forward kernels shared by the recorded (tape) path and the plain
//! evaluation path. Both paths call the same functions in the same order, so
//! their results agree bit for bit.

use super::tensor::{same_shape, Tensor};
use crate::error::{Error, Result};

/// Pointwise functions with known local derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Tanh,
    LeakyRelu(f64),
    Exp,
    Log,
    /// `log|x|`, used for actnorm log-determinants.
    LogAbs,
    Square,
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

impl Unary {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::LogAbs => x.abs().ln(),
            Unary::Square => x * x,
        }
    }

    /// d/dx evaluated from the input `x` and the forward output `y`.
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::Exp => y,
            Unary::Log | Unary::LogAbs => 1.0 / x,
            Unary::Square => 2.0 * x,
        }
    }
}

pub fn unary(x: &Tensor, f: Unary) -> Result<Tensor> {
    match f {
        Unary::Log => {
            if let Some(v) = x.data().iter().find(|v| **v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain(format!("log of non-positive value {}", v)));
            }
        }
        Unary::LogAbs => {
            if x.data().iter().any(|v| *v == 0.0) {
                return Err(Error::Domain("log|x| of zero".into()));
            }
        }
        _ => {}
    }
    let data = x.data().iter().map(|&v| f.apply(v)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_rank2("matmul")?;
    let (k2, n) = b.expect_rank2("matmul")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: [{}x{}] x [{}x{}]",
            m, k, k2, n
        )));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a · bᵀ` without materializing the transpose.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out[i * n + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    debug_assert_eq!(k, b.cols());
    Tensor::new(vec![m, n], out).expect("shape computed from inputs")
}

/// `aᵀ · b` without materializing the transpose.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![k, n], out).expect("shape computed from inputs")
}

/// `x · w + b` with `b` broadcast over rows.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, n) = w.expect_rank2("affine")?;
    if b.numel() != n || b.rank() > 1 {
        return Err(Error::dim(format!(
            "affine bias has shape {:?}, expected [{}]",
            b.shape(),
            n
        )));
    }
    let mut y = matmul(x, w)?;
    let bd = b.data();
    for row in y.data_mut().chunks_mut(n) {
        for (v, bv) in row.iter_mut().zip(bd) {
            *v += bv;
        }
    }
    Ok(y)
}

fn zip_with(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(a, b, what)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "mul", |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "div", |x, y| x / y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let data = a.data().iter().map(|v| v * c).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Checks that `small`'s shape is a trailing suffix of `big`'s shape and
/// returns the number of repetitions.
pub(crate) fn broadcast_reps(big: &Tensor, small: &Tensor, what: &str) -> Result<usize> {
    let (bs, ss) = (big.shape(), small.shape());
    if ss.len() > bs.len() || bs[bs.len() - ss.len()..] != *ss {
        return Err(Error::dim(format!(
            "{}: cannot broadcast {:?} against {:?}",
            what, ss, bs
        )));
    }
    Ok(big.numel() / small.numel().max(1))
}

fn broadcast_with(
    big: &Tensor,
    small: &Tensor,
    what: &str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    broadcast_reps(big, small, what)?;
    let sd = small.data();
    let w = sd.len();
    let mut data = big.data().to_vec();
    for chunk in data.chunks_mut(w) {
        for (v, s) in chunk.iter_mut().zip(sd) {
            *v = f(*v, *s);
        }
    }
    Tensor::new(big.shape().to_vec(), data)
}

/// `big + small` where `small` broadcasts over the leading axes of `big`.
pub fn add_broadcast(big: &Tensor, small: &Tensor) -> Result<Tensor> {
    broadcast_with(big, small, "add_broadcast", |x, y| x + y)
}

/// `big * small` where `small` broadcasts over the leading axes of `big`.
pub fn mul_broadcast(big: &Tensor, small: &Tensor) -> Result<Tensor> {
    broadcast_with(big, small, "mul_broadcast", |x, y| x * y)
}

pub(crate) fn check_axes(rank: usize, axes: &[usize]) -> Result<()> {
    for &ax in axes {
        if ax >= rank {
            return Err(Error::InvalidAxis { axis: ax, rank });
        }
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each input element, the flat index of the output element it reduces into.
pub(crate) fn reduce_index_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, d)| *d)
        .collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    for flat in 0..numel {
        let mut o = 0;
        let mut oi = 0;
        for (ax, st) in in_strides.iter().enumerate() {
            let idx = (flat / st) % shape[ax];
            if !axes.contains(&ax) {
                o += idx * out_strides[oi];
                oi += 1;
            }
        }
        map.push(o);
    }
    (out_shape, map)
}

/// Sums over the given axes; the reduced axes are removed from the shape.
pub fn reduce_sum(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    check_axes(x.rank(), axes)?;
    // Fast path for the common row-sum of a matrix.
    if x.rank() == 2 && axes == [1] {
        let data = x
            .data()
            .chunks(x.cols().max(1))
            .map(|r| r.iter().sum())
            .collect::<Vec<f64>>();
        return Tensor::new(vec![x.rows()], data);
    }
    let (out_shape, map) = reduce_index_map(x.shape(), axes);
    let mut out = vec![0.0; out_shape.iter().product()];
    for (v, &o) in x.data().iter().zip(&map) {
        out[o] += v;
    }
    Tensor::new(out_shape, out)
}

pub fn sum_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = x.expect_rank2("slice_cols")?;
    if start + len > c {
        return Err(Error::dim(format!(
            "column slice {}..{} out of range for width {}",
            start,
            start + len,
            c
        )));
    }
    let mut data = Vec::with_capacity(r * len);
    for i in 0..r {
        data.extend_from_slice(&x.row(i)[start..start + len]);
    }
    Tensor::matrix(r, len, data)
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let r = parts.first().map_or(0, |p| p.rows());
    let mut width = 0;
    for p in parts {
        let (pr, pc) = p.expect_rank2("concat_cols")?;
        if pr != r {
            return Err(Error::dim(format!(
                "concat_cols: row counts {} and {} differ",
                r, pr
            )));
        }
        width += pc;
    }
    let mut data = Vec::with_capacity(r * width);
    for i in 0..r {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::matrix(r, width, data)
}

pub fn slice_rows(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = x.expect_rank2("slice_rows")?;
    if start + len > r {
        return Err(Error::dim(format!(
            "row slice {}..{} out of range for {} rows",
            start,
            start + len,
            r
        )));
    }
    Tensor::matrix(len, c, x.data()[start * c..(start + len) * c].to_vec())
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let c = parts.first().map_or(0, |p| p.cols());
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (pr, pc) = p.expect_rank2("concat_rows")?;
        if pc != c {
            return Err(Error::dim(format!(
                "concat_rows: widths {} and {} differ",
                c, pc
            )));
        }
        rows += pr;
        data.extend_from_slice(p.data());
    }
    Tensor::matrix(rows, c, data)
}

/// Output column `i` is input column `perm[i]`.
pub fn permute_cols(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let (r, c) = x.expect_rank2("permute_cols")?;
    if perm.len() != c {
        return Err(Error::dim(format!(
            "permutation of length {} applied to width {}",
            perm.len(),
            c
        )));
    }
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row(i);
        data.extend(perm.iter().map(|&p| row[p]));
    }
    Tensor::matrix(r, c, data)
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.expect_rank2("transpose")?;
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::matrix(c, r, data)
}

/// Column means of a matrix.
pub fn column_mean(x: &Tensor) -> Result<Tensor> {
    let (r, _) = x.expect_rank2("column_mean")?;
    if r == 0 {
        return Err(Error::dim("column_mean of an empty batch"));
    }
    Ok(scale(&reduce_sum(x, &[0])?, 1.0 / r as f64))
}
