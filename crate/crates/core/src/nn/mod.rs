//! Dense-network machinery with analytic gradients, SGD with momentum, the
//! cosine learning-rate schedule and an EMA parameter shadow.

mod gradcheck;
mod mlp;
mod optim;

pub use gradcheck::{finite_difference_gradient, relative_error, worst_relative_error, REL_ERROR_FLOOR};
pub use mlp::{Dense, Mlp, MlpCache};
pub(crate) use mlp::{add_row, column_sums, relu, relu_backward};
pub use optim::{cosine_lr, EmaShadow, OptimizerState, SgdConfig, DEFAULT_EMA_MOMENTUM};

use nalgebra::DMatrix;

/// A fixed, ordered collection of parameter tensors.
///
/// Gradients are represented by a value of the same type, so every
/// tensor-wise operation only needs to zip two `tensors()` lists.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&DMatrix<f64>>;
    fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>>;
    fn tensor_names(&self) -> Vec<String>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn same_shapes(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    /// `self += scale * other`; shapes must match.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (t, o) in self.tensors_mut().into_iter().zip(other.tensors()) {
            t.zip_apply(o, |a, b| *a += scale * b);
        }
    }
}
