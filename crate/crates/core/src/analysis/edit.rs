use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::flow::{FactorLayout, InterpretationNetwork};
use crate::numerics::Tensor;

/// Runs `f` on `x` viewed as a batch and restores a rank-1 shape on output.
fn batched(x: &Tensor, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let out = f(&x.as_batch()?)?;
    if x.rank() == 1 {
        let n = out.numel();
        out.reshape(vec![n])
    } else {
        Ok(out)
    }
}

/// Replaces factor `k` of each source latent with that of the donor:
/// `T⁻¹(z̃_src with slot k taken from T(z_donor))`. Accepts single latents
/// `[N]` or row-aligned batches `[B, N]`.
pub fn swap_factor(
    net: &InterpretationNetwork,
    z_src: &Tensor,
    z_donor: &Tensor,
    k: usize,
) -> Result<Tensor> {
    if z_src.shape() != z_donor.shape() {
        return Err(Error::dim(format!(
            "source {:?} and donor {:?} differ in shape",
            z_src.shape(),
            z_donor.shape()
        )));
    }
    let range = net.layout().range(k)?;
    let donor = z_donor.as_batch()?;
    batched(z_src, |src| {
        let mut codes = net.forward(src)?.0;
        let donor_codes = net.forward(&donor)?.0;
        let n = codes.cols();
        for r in 0..codes.rows() {
            let row = r * n;
            codes.data_mut()[row + range.start..row + range.end]
                .copy_from_slice(&donor_codes.data()[row + range.start..row + range.end]);
        }
        net.inverse(&codes)
    })
}

/// Codes `(1−t)·z̃_1 + t·z̃_2` for `steps` values of `t` evenly spaced on `[0, 1]`.
pub fn interpolate_codes(c1: &Tensor, c2: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
    if steps < 2 {
        return Err(Error::InvalidConfig(format!("interpolation needs at least 2 steps, got {}", steps)));
    }
    if c1.shape() != c2.shape() {
        return Err(Error::dim("interpolation endpoints differ in shape"));
    }
    Ok((0..steps)
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            let data = c1.data().iter().zip(c2.data()).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            Tensor::new(c1.shape().to_vec(), data).expect("same shape")
        })
        .collect())
}

/// Latents along the straight line between `T(z_1)` and `T(z_2)` mapped back
/// through `T⁻¹`; the path is nonlinear in latent space.
pub fn interpolate(
    net: &InterpretationNetwork,
    z1: &Tensor,
    z2: &Tensor,
    steps: usize,
) -> Result<Vec<Tensor>> {
    let c1 = batched(z1, |z| Ok(net.forward(z)?.0))?;
    let c2 = batched(z2, |z| Ok(net.forward(z)?.0))?;
    interpolate_codes(&c1, &c2, steps)?
        .iter()
        .map(|c| batched(c, |c| net.inverse(c)))
        .collect()
}

/// Mean direction in code space from examples with an attribute to examples
/// without it, optionally restricted to one factor.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeVector {
    direction: Tensor,
    factor: Option<usize>,
}

/// `mean(codes_without) − mean(codes_with)` over rows of two `[B, N]` code sets.
pub fn attribute_vector(codes_with: &Tensor, codes_without: &Tensor) -> Result<AttributeVector> {
    for (name, c) in [("with", codes_with), ("without", codes_without)] {
        if c.rank() != 2 || c.rows() == 0 {
            return Err(Error::InvalidConfig(format!("attribute set {:?} is empty", name)));
        }
    }
    if codes_with.cols() != codes_without.cols() {
        return Err(Error::dim("attribute sets differ in code dimension"));
    }
    let mw = crate::numerics::kernels::column_mean(codes_with)?;
    let mo = crate::numerics::kernels::column_mean(codes_without)?;
    Ok(AttributeVector { direction: crate::numerics::kernels::sub(&mo, &mw)?, factor: None })
}

impl AttributeVector {
    /// Direction of length `N`, or `N_F` once restricted.
    pub fn direction(&self) -> &Tensor {
        &self.direction
    }

    pub fn factor(&self) -> Option<usize> {
        self.factor
    }

    /// Keeps only the coordinates of factor `k`.
    pub fn restrict(&self, layout: &FactorLayout, k: usize) -> Result<AttributeVector> {
        if self.factor.is_some() {
            return Err(Error::InvalidConfig("attribute vector is already restricted".into()));
        }
        if self.direction.numel() != layout.total() {
            return Err(Error::dim("attribute vector does not match layout"));
        }
        let r = layout.range(k)?;
        Ok(AttributeVector {
            direction: Tensor::vector(self.direction.data()[r].to_vec()),
            factor: Some(k),
        })
    }

    /// `z̃ + α·v` for every row of `codes`, placing a restricted vector in its
    /// factor slot.
    pub fn apply(&self, layout: &FactorLayout, codes: &Tensor, alpha: f64) -> Result<Tensor> {
        let offset = match self.factor {
            Some(k) => layout.range(k)?.start,
            None => 0,
        };
        let n = layout.total();
        let v = self.direction.data();
        batched(codes, |c| {
            if c.cols() != n || offset + v.len() > n {
                return Err(Error::dim("codes do not match layout"));
            }
            let mut out = c.clone();
            for r in 0..out.rows() {
                for (j, d) in v.iter().enumerate() {
                    out.data_mut()[r * n + offset + j] += alpha * d;
                }
            }
            Ok(out)
        })
    }
}

/// `T⁻¹(ε)` for `batch` standard-normal codes drawn from `seed`.
pub fn sample(net: &InterpretationNetwork, batch: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = net.dim();
    let eps = (0..batch * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    net.inverse(&Tensor::matrix(batch, n, eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::flow::Init;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn identity(dims: Vec<usize>) -> InterpretationNetwork {
        let layout = FactorLayout::new(dims).unwrap();
        let n = layout.total();
        InterpretationNetwork::identity(
            FlowConfig::new(n).with_blocks(1, 4, 1),
            layout,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap()
    }

    fn random_net(seed: u64) -> InterpretationNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = FactorLayout::new(vec![2, 2, 2]).unwrap();
        let mut net = InterpretationNetwork::with_init(
            FlowConfig::new(6).with_blocks(3, 16, 2),
            layout,
            Init::Random { output_std: 0.05 },
            &mut rng,
        )
        .unwrap();
        let b = (0..64 * 6).map(|_| StandardNormal.sample(&mut rng)).collect();
        net.initialize(&Tensor::matrix(64, 6, b).unwrap()).unwrap();
        net
    }

    #[test]
    fn swap_with_identity_flow() {
        let net = identity(vec![1, 1]);
        let out = swap_factor(&net, &Tensor::vector(vec![1.0, 2.0]), &Tensor::vector(vec![3.0, 4.0]), 1).unwrap();
        assert_eq!(out, Tensor::vector(vec![1.0, 4.0]));
    }

    #[test]
    fn swap_shape_mismatch() {
        let net = identity(vec![1, 1]);
        let r = swap_factor(&net, &Tensor::vector(vec![1.0, 2.0]), &Tensor::zeros(&[1, 2]), 1);
        assert!(matches!(r, Err(Error::Dimension(_))));
        assert!(swap_factor(&net, &Tensor::vector(vec![1.0, 2.0]), &Tensor::vector(vec![1.0, 2.0]), 2).is_err());
    }

    #[test]
    fn interpolation_with_identity_flow() {
        let net = identity(vec![1, 1]);
        let path = interpolate(&net, &Tensor::vector(vec![0.0, 2.0]), &Tensor::vector(vec![4.0, -2.0]), 3).unwrap();
        assert_eq!(path[1], Tensor::vector(vec![2.0, 0.0]));
        assert!(interpolate(&net, &path[0], &path[2], 1).is_err());
    }

    #[test]
    fn attribute_vector_examples() {
        let with = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let without = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let v = attribute_vector(&with, &without).unwrap();
        assert_eq!(v.direction(), &Tensor::vector(vec![-1.0, 1.0]));
        let zero = attribute_vector(&with, &with).unwrap();
        assert_eq!(zero.direction(), &Tensor::vector(vec![0.0, 0.0]));
        assert!(attribute_vector(&Tensor::zeros(&[0, 2]), &without).is_err());
    }

    #[test]
    fn restricted_attribute_lands_in_its_slot() {
        let layout = FactorLayout::new(vec![1, 2]).unwrap();
        let with = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let without = Tensor::from_rows(&[vec![5.0, 1.0, 2.0]]).unwrap();
        let v = attribute_vector(&with, &without).unwrap().restrict(&layout, 1).unwrap();
        assert_eq!(v.direction().data(), &[1.0, 2.0]);
        let moved = v.apply(&layout, &Tensor::vector(vec![0.0, 0.0, 0.0]), 2.0).unwrap();
        assert_eq!(moved.data(), &[0.0, 2.0, 4.0]);
    }

    #[test]
    fn samples_of_identity_flow_are_standard_normal() {
        let net = identity(vec![2, 2]);
        let s = sample(&net, 10_000, 4).unwrap();
        let normal = Normal::new(0.0, 1.0).unwrap();
        for j in 0..4 {
            let mut col: Vec<f64> = (0..s.rows()).map(|r| s.get(r, j)).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = col.len() as f64;
            let d = col
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let c = normal.cdf(*x);
                    f64::max(c - i as f64 / n, (i + 1) as f64 / n - c)
                })
                .fold(0.0, f64::max);
            // Asymptotic Kolmogorov-Smirnov critical value for p = 0.01.
            assert!(d < 1.628 / n.sqrt(), "dim {} D = {}", j, d);
        }
        assert_eq!(sample(&net, 5, 9).unwrap(), sample(&net, 5, 9).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn swap_properties(seed in 0u64..100, k in 0usize..3) {
            let net = random_net(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let mut draw = || Tensor::matrix(4, 6, (0..24).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
            let (src, donor) = (draw(), draw());
            let own = swap_factor(&net, &src, &src, k).unwrap();
            prop_assert!(own.max_abs_diff(&src).unwrap() < 1e-9);
            let once = swap_factor(&net, &src, &donor, k).unwrap();
            let twice = swap_factor(&net, &once, &donor, k).unwrap();
            prop_assert!(twice.max_abs_diff(&once).unwrap() < 2e-9);
        }

        #[test]
        fn interpolation_endpoints_and_midpoint(seed in 0u64..100) {
            let net = random_net(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
            let mut draw = || Tensor::vector((0..6).map(|_| StandardNormal.sample(&mut rng)).collect());
            let (z1, z2) = (draw(), draw());
            let path = interpolate(&net, &z1, &z2, 5).unwrap();
            prop_assert!(path[0].max_abs_diff(&z1).unwrap() < 1e-9);
            prop_assert!(path[4].max_abs_diff(&z2).unwrap() < 1e-9);
            let (c1, c2) = (net.forward(&z1.as_batch().unwrap()).unwrap().0, net.forward(&z2.as_batch().unwrap()).unwrap().0);
            let codes = interpolate_codes(&c1, &c2, 3).unwrap();
            let mean: Vec<f64> = c1.data().iter().zip(c2.data()).map(|(a, b)| (a + b) / 2.0).collect();
            prop_assert_eq!(codes[1].data(), &mean[..]);
        }

        #[test]
        fn attribute_vector_is_antisymmetric(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 9),
        ) {
            let x = Tensor::matrix(2, 3, a).unwrap();
            let y = Tensor::matrix(3, 3, b).unwrap();
            let fwd = attribute_vector(&x, &y).unwrap();
            let back = attribute_vector(&y, &x).unwrap();
            for (p, q) in fwd.direction().data().iter().zip(back.direction().data()) {
                prop_assert_eq!(*p, -*q);
            }
        }
    }
}
