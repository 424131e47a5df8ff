use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Ridge added to covariance diagonals before factorizing.
pub const COVARIANCE_RIDGE: f64 = 1e-10;

fn centered(x: &Tensor) -> Result<DMatrix<f64>> {
    let (b, n) = (x.rows(), x.cols());
    let mut m = DMatrix::from_row_slice(b, n, x.data());
    for mut c in m.column_iter_mut() {
        let mean = c.mean();
        c.add_scalar_mut(-mean);
    }
    Ok(m)
}

fn check_rows(x: &Tensor, min: usize) -> Result<()> {
    if x.rank() != 2 || x.rows() < min || x.cols() == 0 {
        return Err(Error::dim(format!(
            "need a matrix with at least {} rows, got shape {:?}",
            min,
            x.shape()
        )));
    }
    Ok(())
}

/// Principal-component projection of a set of codes.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaEmbedding {
    /// `[B, out_dims]` projections of the centered data.
    pub coords: Tensor,
    /// `[out_dims, N]` unit principal directions.
    pub components: Tensor,
    /// Share of total variance captured by every component, descending.
    pub explained_variance_ratio: Vec<f64>,
}

/// Projects centered `codes` onto their leading 1 or 2 principal directions.
/// Each direction is signed so that its largest-magnitude loading is positive.
pub fn pca_embed(codes: &Tensor, out_dims: usize) -> Result<PcaEmbedding> {
    if !(1..=2).contains(&out_dims) {
        return Err(Error::InvalidConfig(format!("out_dims must be 1 or 2, got {}", out_dims)));
    }
    check_rows(codes, out_dims + 1)?;
    if codes.cols() < out_dims {
        return Err(Error::dim("fewer columns than requested components"));
    }
    let x = centered(codes)?;
    let b = codes.rows() as f64;
    let mut cov = x.transpose() * &x / (b - 1.0);
    for i in 0..cov.nrows() {
        cov[(i, i)] += COVARIANCE_RIDGE;
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let explained_variance_ratio = order.iter().map(|&i| eig.eigenvalues[i].max(0.0) / total).collect();
    let n = codes.cols();
    let mut comps = Vec::with_capacity(out_dims * n);
    for &i in order.iter().take(out_dims) {
        let v = eig.eigenvectors.column(i);
        let lead = v.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        comps.extend(v.iter().map(|x| sign * x));
    }
    let components = Tensor::matrix(out_dims, n, comps)?;
    let w = DMatrix::from_row_slice(out_dims, n, components.data());
    let proj = x * w.transpose();
    let coords = Tensor::matrix(
        codes.rows(),
        out_dims,
        (0..codes.rows()).flat_map(|r| (0..out_dims).map(move |c| (r, c))).map(|(r, c)| proj[(r, c)]).collect(),
    )?;
    Ok(PcaEmbedding { coords, components, explained_variance_ratio })
}

/// Canonical correlations between the column spaces of `x` `[B, p]` and
/// `y` `[B, q]`, in descending order (`min(p, q)` values in `[0, 1]`).
pub fn canonical_correlations(x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    check_rows(x, 2)?;
    check_rows(y, 2)?;
    if x.rows() != y.rows() {
        return Err(Error::dim("canonical correlation needs paired rows"));
    }
    let b = x.rows() as f64;
    let (xc, yc) = (centered(x)?, centered(y)?);
    let cov = |a: &DMatrix<f64>, c: &DMatrix<f64>| a.transpose() * c / (b - 1.0);
    let whiten = |s: DMatrix<f64>| -> Result<DMatrix<f64>> {
        let scale = s.diagonal().max().max(f64::MIN_POSITIVE);
        let mut s = s;
        for i in 0..s.nrows() {
            s[(i, i)] += COVARIANCE_RIDGE * scale;
        }
        let l = s
            .cholesky()
            .ok_or_else(|| Error::NonFinite("covariance is not positive definite".into()))?
            .l();
        l.try_inverse().ok_or_else(|| Error::NonFinite("singular covariance factor".into()))
    };
    let lx = whiten(cov(&xc, &xc))?;
    let ly = whiten(cov(&yc, &yc))?;
    let m = &lx * cov(&xc, &yc) * ly.transpose();
    let mut sv: Vec<f64> = m.singular_values().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.truncate(x.cols().min(y.cols()));
    Ok(sv)
}

/// Largest canonical correlation between `x` and `y`.
pub fn max_canonical_correlation(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(canonical_correlations(x, y)?.first().copied().unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn points_on_a_line() {
        let t = gaussian(200, 1, 1);
        let d = (0..200).flat_map(|r| { let v = t.get(r, 0); [v, 2.0 * v + 1.0, -v] }).collect();
        let e = pca_embed(&Tensor::matrix(200, 3, d).unwrap(), 1).unwrap();
        assert!(e.explained_variance_ratio[0] > 0.999);
        assert!(e.components.data().iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m }) > 0.0);
    }

    #[test]
    fn isotropic_ratios_are_equal() {
        let e = pca_embed(&gaussian(10_000, 3, 2), 2).unwrap();
        for r in &e.explained_variance_ratio {
            assert!((r * 3.0 - 1.0).abs() < 0.1, "{:?}", e.explained_variance_ratio);
        }
    }

    #[test]
    fn projections_are_centered() {
        let e = pca_embed(&gaussian(50, 4, 3), 2).unwrap();
        for c in 0..2 {
            let m: f64 = (0..50).map(|r| e.coords.get(r, c)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_data_is_regularized() {
        let e = pca_embed(&Tensor::full(&[5, 3], 2.0), 2).unwrap();
        assert!(e.coords.data().iter().all(|v| v.abs() < 1e-12));
        assert!(e.explained_variance_ratio.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pca_preconditions() {
        assert!(pca_embed(&gaussian(2, 3, 1), 2).is_err());
        assert!(pca_embed(&gaussian(20, 3, 1), 3).is_err());
    }

    #[test]
    fn cca_of_linear_images_is_one() {
        let x = gaussian(500, 3, 4);
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0], vec![-1.0, 0.5]]).unwrap();
        let y = crate::numerics::kernels::matmul(&x, &a).unwrap();
        let cc = canonical_correlations(&x, &y).unwrap();
        assert_eq!(cc.len(), 2);
        assert!(cc.iter().all(|c| (c - 1.0).abs() < 1e-6), "{:?}", cc);
    }

    #[test]
    fn cca_of_independent_data_is_small() {
        let c = max_canonical_correlation(&gaussian(10_000, 4, 5), &gaussian(10_000, 4, 6)).unwrap();
        assert!(c < 0.05, "{}", c);
    }

    #[test]
    fn cca_matches_pearson_in_one_dimension() {
        let x = gaussian(300, 1, 7);
        let n = gaussian(300, 1, 8);
        let y = Tensor::matrix(300, 1, (0..300).map(|r| 0.6 * x.get(r, 0) + 0.8 * n.get(r, 0)).collect()).unwrap();
        let xs: Vec<f64> = x.data().to_vec();
        let ys: Vec<f64> = y.data().to_vec();
        let (mx, my) = (xs.iter().sum::<f64>() / 300.0, ys.iter().sum::<f64>() / 300.0);
        let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = xs.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = ys.iter().map(|b| (b - my).powi(2)).sum();
        let pearson = (sxy / (sxx * syy).sqrt()).abs();
        assert!((max_canonical_correlation(&x, &y).unwrap() - pearson).abs() < 1e-8);
    }
}
