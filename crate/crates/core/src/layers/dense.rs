use rand::Rng;

use super::{join, Layer, Mode, Param, Slot};
use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_a_bt_acc, gemm_at_b, Scalar, Tensor};

/// Fully connected layer, `y = x·Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Dense<T> {
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Self {
            weight: Param::new(Tensor::zeros(vec![outputs, inputs])?),
            bias: Param::new(Tensor::zeros(vec![outputs])?),
            cache: None,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.dims()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.dims()[0]
    }

    /// Uniform in ±1/√in; bias zeroed.
    pub fn init_uniform(&mut self, rng: &mut impl Rng) {
        let bound = 1.0 / (self.inputs() as f64).sqrt();
        for w in self.weight.value.data_mut() {
            *w = T::of(rng.random_range(-bound..bound));
        }
        self.bias.value.data_mut().fill(T::zero());
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (inp, out) = (self.inputs(), self.outputs());
        let n = match *x.dims() {
            [n, i] if i == inp => n,
            _ => {
                return Err(Error::Shape(format!(
                    "dense expects [N, {inp}], got {:?}",
                    x.dims()
                )))
            }
        };
        let mut y: Vec<T> = (0..n).flat_map(|_| self.bias.value.data().iter().copied()).collect();
        gemm_a_bt_acc(n, inp, out, x.data(), self.weight.value.data(), &mut y);
        Tensor::new(vec![n, out], y)
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("dense"))?;
        let (n, inp, out) = (x.dims()[0], self.inputs(), self.outputs());
        dy.expect_dims(&[n, out], "dense backward")?;
        let mut dx = vec![T::zero(); n * inp];
        gemm(n, out, inp, dy.data(), self.weight.value.data(), &mut dx, false);
        gemm_at_b(out, n, inp, dy.data(), x.data(), self.weight.grad.data_mut());
        let db = self.bias.grad.data_mut();
        db.fill(T::zero());
        for row in dy.data().chunks(out) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
        Tensor::new(vec![n, inp], dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        f(&join(prefix, "bias"), Slot::Param(&mut self.bias));
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, bool)) {
        f(&join(prefix, "weight"), &self.weight.value, true);
        f(&join(prefix, "bias"), &self.bias.value, true);
    }
}
