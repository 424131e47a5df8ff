use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numerics::{kernels, Tape, Tensor, Unary, Var};

/// Fully connected network: `depth` hidden layers of width `hidden` with
/// leaky ReLU, followed by a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// `(weight [in, out], bias [out])` per layer.
    layers: Vec<(Tensor, Tensor)>,
    slope: f64,
}

impl Mlp {
    /// He-normal hidden layers. The output layer is zero unless `output_std > 0`.
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        hidden: usize,
        depth: usize,
        slope: f64,
        output_std: f64,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut fan_in = input;
        for _ in 0..depth {
            let std = (2.0 / fan_in as f64).sqrt();
            layers.push((gaussian(fan_in, hidden, std, rng), Tensor::zeros(&[hidden])));
            fan_in = hidden;
        }
        let w = if output_std > 0.0 {
            gaussian(fan_in, output, output_std, rng)
        } else {
            Tensor::zeros(&[fan_in, output])
        };
        let b = if output_std > 0.0 {
            let g = gaussian(1, output, output_std, rng);
            Tensor::vector(g.into_data())
        } else {
            Tensor::zeros(&[output])
        };
        layers.push((w, b));
        Mlp { layers, slope }
    }

    pub(crate) fn from_layers(layers: Vec<(Tensor, Tensor)>, slope: f64) -> Self {
        Mlp { layers, slope }
    }

    pub fn layers(&self) -> &[(Tensor, Tensor)] {
        &self.layers
    }

    /// Mutable access to the output layer, for constructing fixed test networks.
    pub fn output_layer_mut(&mut self) -> &mut (Tensor, Tensor) {
        self.layers.last_mut().expect("an mlp has an output layer")
    }

    pub fn num_tensors(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w, b])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b])
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = kernels::affine(&h, w, b)?;
            if i < last {
                h = kernels::unary(&h, Unary::LeakyRelu(self.slope))?;
            }
        }
        Ok(h)
    }

    /// Records the forward pass; `params` holds this network's tensors in
    /// [`Mlp::parameters`] order.
    pub fn record(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for i in 0..self.layers.len() {
            h = tape.affine(h, params[2 * i], params[2 * i + 1])?;
            if i < last {
                h = tape.unary(h, Unary::LeakyRelu(self.slope))?;
            }
        }
        Ok(h)
    }
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}
