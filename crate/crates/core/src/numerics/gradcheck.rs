use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central differences.
///
/// `f` records the function on the given tape with `theta` as its only
/// trainable input. Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn gradient_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step h must be positive, got {}", h)));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(theta.clone());
    let loss = f(&mut tape, x)?;
    tape.backward(loss)?;
    let analytic = match tape.grad(x) {
        Some(g) => g.clone(),
        None => Tensor::zeros(theta.shape()),
    };

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(p.clone());
        let l = f(&mut t, v)?;
        let val = t.value(l).item()?;
        if !val.is_finite() {
            return Err(Error::NonFinite("gradient check evaluation".into()));
        }
        Ok(val)
    };

    let mut worst = 0.0f64;
    let mut probe = theta.clone();
    for i in 0..theta.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        if !a.is_finite() {
            return Err(Error::NonFinite("analytic gradient".into()));
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Unary;

    #[test]
    fn squared_norm_passes() {
        let theta = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = gradient_check(
            |t, x| {
                let s = t.square(x)?;
                Ok(t.sum_all(s))
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{}", err);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let theta = Tensor::vector(vec![0.3, -0.7]);
        let err = gradient_check(
            |t, x| {
                let z = t.scale(x, 0.0);
                Ok(t.sum_all(z))
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-12);
    }

    #[test]
    fn tanh_sum_passes() {
        let theta = Tensor::vector(vec![0.1, -1.2, 2.5, 0.0]);
        let err = gradient_check(
            |t, x| {
                let y = t.unary(x, Unary::Tanh)?;
                Ok(t.sum_all(y))
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{}", err);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let theta = Tensor::vector(vec![1.0]);
        assert!(gradient_check(|t, x| Ok(t.sum_all(x)), &theta, 0.0).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let theta = Tensor::vector(vec![800.0]);
        let r = gradient_check(
            |t, x| {
                let e = t.exp(x)?;
                Ok(t.sum_all(e))
            },
            &theta,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
