//! Forward and backward passes of the individual layers.

pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;

pub use batchnorm::{BatchNorm3d, BatchNormCache};
pub use conv::Conv3d;
pub use linear::Linear;
pub use loss::{softmax, softmax_cross_entropy};
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool3d, MaxPoolCache};

use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients of one layer: one tensor per parameter, in the order the
/// layer's [`Parameterized::params`] lists them, plus the input gradient
/// when it was requested.
#[derive(Debug, Clone)]
pub struct LayerGradients<T> {
    pub params: Vec<Tensor<T>>,
    pub input: Option<Tensor<T>>,
}

pub trait Parameterized<T: Element> {
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
    fn param_names(&self) -> Vec<&'static str>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Gradient through a ReLU given the ReLU's output.
pub fn relu_backward<T: Element>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gv, &o) in g.data_mut().iter_mut().zip(output.data()) {
        if o <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}
