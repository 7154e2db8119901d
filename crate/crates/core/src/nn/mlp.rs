use nalgebra::DMatrix;
use rand::Rng as _;

use super::ParamSet;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Affine layer `y = x W + b`, with `W` stored input-major (`in x out`) and
/// `b` as a `1 x out` row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DMatrix<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: DMatrix::zeros(inputs, outputs),
            bias: DMatrix::zeros(1, outputs),
        }
    }

    /// He-uniform weights, zero bias.
    pub fn he_uniform(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / inputs as f64).sqrt();
        Dense {
            weight: DMatrix::from_fn(inputs, outputs, |_, _| rng.random_range(-limit..limit)),
            bias: DMatrix::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.weight;
        add_row(&mut y, &self.bias);
        y
    }
}

pub(crate) fn add_row(m: &mut DMatrix<f64>, row: &DMatrix<f64>) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        let b = row[(0, j)];
        for v in col.iter_mut() {
            *v += b;
        }
    }
}

pub(crate) fn column_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

pub(crate) fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Zeroes entries of `grad` whose pre-activation is not strictly positive.
pub(crate) fn relu_backward(grad: &mut DMatrix<f64>, pre: &DMatrix<f64>) {
    grad.zip_apply(pre, |g, p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Two-layer perceptron: affine, ReLU, affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Dense,
    pub output: Dense,
}

/// Activations retained by [`Mlp::forward_cached`] for one batch.
#[derive(Debug, Clone)]
pub struct MlpCache {
    input: DMatrix<f64>,
    pre: DMatrix<f64>,
    act: DMatrix<f64>,
}

impl Mlp {
    pub fn new(inputs: usize, width: usize, outputs: usize, rng: &mut Rng) -> Self {
        Mlp {
            hidden: Dense::he_uniform(inputs, width, rng),
            output: Dense::he_uniform(width, outputs, rng),
        }
    }

    pub fn zeros(inputs: usize, width: usize, outputs: usize) -> Self {
        Mlp {
            hidden: Dense::zeros(inputs, width),
            output: Dense::zeros(width, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.hidden.inputs()
    }

    pub fn width(&self) -> usize {
        self.hidden.outputs()
    }

    pub fn outputs(&self) -> usize {
        self.output.outputs()
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.inputs() {
            return Err(Error::ShapeMismatch {
                context: "mlp input",
                expected: (x.nrows(), self.inputs()),
                found: x.shape(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        Ok(self.output.apply(&relu(&self.hidden.apply(x))))
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, MlpCache)> {
        self.check_input(x)?;
        let pre = self.hidden.apply(x);
        let act = relu(&pre);
        let out = self.output.apply(&act);
        Ok((
            out,
            MlpCache {
                input: x.clone(),
                pre,
                act,
            },
        ))
    }

    /// Parameter gradients (shaped like `self`) and the input gradient, given
    /// the gradient of the loss with respect to this network's output.
    pub fn backward(&self, cache: &MlpCache, upstream: &DMatrix<f64>) -> Result<(Mlp, DMatrix<f64>)> {
        let expected = (cache.input.nrows(), self.outputs());
        if upstream.shape() != expected || cache.act.ncols() != self.width() {
            return Err(Error::ShapeMismatch {
                context: "mlp backward upstream",
                expected,
                found: upstream.shape(),
            });
        }
        let output = Dense {
            weight: cache.act.transpose() * upstream,
            bias: column_sums(upstream),
        };
        let mut d_pre = upstream * self.output.weight.transpose();
        relu_backward(&mut d_pre, &cache.pre);
        let hidden = Dense {
            weight: cache.input.transpose() * &d_pre,
            bias: column_sums(&d_pre),
        };
        let d_input = d_pre * self.hidden.weight.transpose();
        Ok((Mlp { hidden, output }, d_input))
    }
}

impl ParamSet for Mlp {
    fn tensors(&self) -> Vec<&DMatrix<f64>> {
        vec![
            &self.hidden.weight,
            &self.hidden.bias,
            &self.output.weight,
            &self.output.bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]
    }

    fn tensor_names(&self) -> Vec<String> {
        ["hidden.weight", "hidden.bias", "output.weight", "output.bias"]
            .map(String::from)
            .to_vec()
    }
}
