use super::{Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean over (T, H, W): `N×C×T×H×W → N×C`.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool3d {
    input_dims: Option<Vec<usize>>,
}

impl GlobalAvgPool3d {
    pub fn new() -> Self {
        Self { input_dims: None }
    }

    pub fn infer<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, ext) = x.dims5()?;
        let vol: usize = ext.iter().product();
        let inv = T::of(1.0 / vol as f64);
        let data = x
            .data()
            .chunks(vol)
            .map(|chunk| chunk.iter().copied().sum::<T>() * inv)
            .collect();
        Tensor::new(vec![n, c], data)
    }
}

impl<T: Scalar> Layer<T> for GlobalAvgPool3d {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = Self::infer(x)?;
        self.input_dims = Some(x.dims().to_vec());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = self
            .input_dims
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("global_avg_pool3d"))?;
        dy.expect_dims(&dims[..2], "global_avg_pool3d backward")?;
        let vol: usize = dims[2..].iter().product();
        let inv = T::of(1.0 / vol as f64);
        let mut data = Vec::with_capacity(dy.len() * vol);
        for &g in dy.data() {
            data.extend(std::iter::repeat_n(g * inv, vol));
        }
        Tensor::new(dims.clone(), data)
    }
}
