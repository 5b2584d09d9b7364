use super::{Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `x · sigmoid(x)`
pub fn swish<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// Derivative of [`swish`]: `σ(x) · (1 + x · (1 − σ(x)))`.
pub fn swish_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[derive(Clone, Debug, Default)]
pub struct Swish<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Swish<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }
}

impl<T: Scalar> Layer<T> for Swish<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        self.cache = Some(x.clone());
        Ok(x.map(swish))
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("swish"))?;
        x.zip_map(dy, |x, d| d * swish_grad(x))
    }
}
