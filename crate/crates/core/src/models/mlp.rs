use rand::Rng;

use super::{expect_shape, Activation, Parameterized};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fully connected layer `act(W x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
    pub activation: Activation,
}

impl Dense {
    pub fn new(w: Tensor, b: Tensor, activation: Activation) -> Result<Self> {
        if w.shape().len() != 2 {
            return Err(Error::Shape {
                op: "dense weight",
                left: w.shape().to_vec(),
                right: vec![2],
            });
        }
        expect_shape("dense bias", &b, &[w.shape()[0]])?;
        Ok(Dense {
            w: w.requiring_grad(),
            b: b.requiring_grad(),
            activation,
        })
    }

    /// Weights and bias uniform on `±1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Dense {
            w: Tensor::uniform(&[fan_out, fan_in], bound, rng).requiring_grad(),
            b: Tensor::uniform(&[fan_out], bound, rng).requiring_grad(),
            activation,
        }
    }

    pub fn in_width(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_width(&self) -> usize {
        self.w.shape()[0]
    }
}

/// Feed-forward stack of [`Dense`] layers. With no layers it is the identity.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn identity() -> Self {
        Mlp { layers: Vec::new() }
    }

    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_width() != pair[1].in_width() {
                return Err(Error::Shape {
                    op: "mlp layer widths",
                    left: pair[0].w.shape().to_vec(),
                    right: pair[1].w.shape().to_vec(),
                });
            }
        }
        Ok(Mlp { layers })
    }

    /// `widths = [in, h1, ..., out]`; hidden layers use `hidden`, the last
    /// layer uses `output`.
    pub fn init<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        let n = widths.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::init(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    /// Single affine layer `w · s + b` producing a scalar.
    pub fn linear(w: Vec<f64>, b: f64) -> Self {
        let n = w.len();
        Mlp {
            layers: vec![Dense {
                w: Tensor::matrix(1, n, w).expect("1 x n").requiring_grad(),
                b: Tensor::vector(vec![b]).requiring_grad(),
                activation: Activation::Identity,
            }],
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn in_width(&self) -> Option<usize> {
        self.layers.first().map(Dense::in_width)
    }

    pub fn out_width(&self) -> Option<usize> {
        self.layers.last().map(Dense::out_width)
    }

    pub fn tensor_count(&self) -> usize {
        2 * self.layers.len()
    }

    /// `p` must hold this net's bound tensors, `[w0, b0, w1, b1, ...]`.
    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        debug_assert_eq!(p.len(), self.tensor_count());
        self.layers
            .iter()
            .zip(p.chunks_exact(2))
            .try_fold(x, |h, (layer, wb)| {
                let z = wb[0].matvec(h)?.add(wb[1])?;
                Ok(layer.activation.apply(z))
            })
    }

    /// Plain evaluation without a tape.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            if h.len() != layer.in_width() {
                return Err(Error::Shape {
                    op: "mlp eval",
                    left: layer.w.shape().to_vec(),
                    right: vec![h.len()],
                });
            }
            let cols = layer.in_width();
            h = layer
                .w
                .data()
                .chunks_exact(cols)
                .zip(layer.b.data())
                .map(|(row, b)| {
                    let z = row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>() + b;
                    match layer.activation {
                        Activation::Identity => z,
                        Activation::Relu => z.max(0.0),
                        Activation::Tanh => z.tanh(),
                        Activation::Sigmoid => crate::autodiff::sigmoid(z),
                    }
                })
                .collect();
        }
        Ok(h)
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }
}
