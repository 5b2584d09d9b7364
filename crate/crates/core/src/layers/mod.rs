//! Differentiable building blocks. Each layer caches what its backward pass
//! needs during `forward`; `backward` consumes an output gradient, writes
//! parameter gradients into its [`Param`]s and returns the input gradient.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod dropout;
mod pool;
mod se;

pub use activation::{sigmoid, swish, swish_grad, Swish};
pub use batchnorm::{BatchNorm3d, DEFAULT_BN_DECAY, DEFAULT_BN_EPS};
pub use conv::Conv3d;
pub use dense::Dense;
pub use dropout::Dropout;
pub use pool::GlobalAvgPool3d;
pub use se::SqueezeExcite;

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor together with the gradient from the last backward.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = value.zeros_like();
        Self { value, grad }
    }
}

/// Mutable view of one named piece of layer state.
pub enum Slot<'a, T> {
    Param(&'a mut Param<T>),
    /// Non-trainable state such as batch-norm running statistics.
    Buffer(&'a mut Tensor<T>),
}

pub trait Layer<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>>;

    /// Visits parameters and buffers under dotted names rooted at `prefix`.
    fn visit(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, Slot<'_, T>)) {}

    /// Read-only counterpart of [`Layer::visit`]; the flag is true for
    /// trainable parameters.
    fn visit_ref(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Tensor<T>, bool)) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Number of trainable scalars in a layer (running statistics excluded).
pub fn count_params<T: Scalar>(layer: &impl Layer<T>) -> usize {
    let mut total = 0;
    layer.visit_ref("", &mut |_, t, trainable| {
        if trainable {
            total += t.len();
        }
    });
    total
}
