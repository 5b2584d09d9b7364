use rayon::prelude::*;

use super::{join, Layer, Mode, Param, Slot};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Running-statistics momentum: `r ← decay·r + (1 − decay)·batch`.
pub const DEFAULT_BN_DECAY: f64 = 0.997;
pub const DEFAULT_BN_EPS: f64 = 1e-3;

/// Per-channel batch normalization over (N, T, H, W).
///
/// Variance is the biased (1/M) estimator, both for normalizing and for the
/// running update.
#[derive(Clone, Debug)]
pub struct BatchNorm3d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub decay: f64,
    pub eps: f64,
    cache: Option<Cache<T>>,
}

#[derive(Clone, Debug)]
struct Cache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Scalar> BatchNorm3d<T> {
    pub fn new(channels: usize, decay: f64, eps: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("bn decay must be in (0,1), got {decay}")));
        }
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::Config(format!("bn eps must be non-negative, got {eps}")));
        }
        Ok(Self {
            gamma: Param::new(Tensor::full(vec![channels], T::one())?),
            beta: Param::new(Tensor::zeros(vec![channels])?),
            running_mean: Tensor::zeros(vec![channels])?,
            running_var: Tensor::full(vec![channels], T::one())?,
            decay,
            eps,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Eval-mode forward without caching or state changes.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, _) = self.check(x)?;
        let inv_std: Vec<T> = self
            .running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + T::of(self.eps)).sqrt())
            .collect();
        let x_hat = normalize(x, c, self.running_mean.data(), &inv_std);
        Ok(self.affine(&x_hat, c))
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (n, c, ext) = x.dims5()?;
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "batchnorm expects {} channels, got {c}",
                self.channels()
            )));
        }
        Ok((n, c, ext.iter().product()))
    }

    fn affine(&self, x_hat: &Tensor<T>, c: usize) -> Tensor<T> {
        let vol = x_hat.len() / x_hat.dims()[0] / c;
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut y = x_hat.clone();
        y.data_mut()
            .par_chunks_mut(vol)
            .enumerate()
            .for_each(|(i, chunk)| {
                let ch = i % c;
                chunk.iter_mut().for_each(|v| *v = *v * gamma[ch] + beta[ch]);
            });
        y
    }
}

fn normalize<T: Scalar>(x: &Tensor<T>, c: usize, mean: &[T], inv_std: &[T]) -> Tensor<T> {
    let vol = x.len() / x.dims()[0] / c;
    let mut out = x.clone();
    out.data_mut()
        .par_chunks_mut(vol)
        .enumerate()
        .for_each(|(i, chunk)| {
            let ch = i % c;
            chunk
                .iter_mut()
                .for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
        });
    out
}

/// Sums `f(x)` over every (n, ·, t, h, w) position of each channel.
fn channel_sums<T: Scalar>(
    data: &[T],
    other: Option<&[T]>,
    n: usize,
    c: usize,
    vol: usize,
    f: impl Fn(T, T) -> T + Sync,
) -> Vec<T> {
    (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut acc = T::zero();
            for s in 0..n {
                let off = (s * c + ch) * vol;
                let a = &data[off..off + vol];
                match other {
                    Some(b) => {
                        for (&x, &y) in a.iter().zip(&b[off..off + vol]) {
                            acc += f(x, y);
                        }
                    }
                    None => {
                        for &x in a {
                            acc += f(x, T::zero());
                        }
                    }
                }
            }
            acc
        })
        .collect()
}

impl<T: Scalar> Layer<T> for BatchNorm3d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, vol) = self.check(x)?;
        let eps = T::of(self.eps);
        let (x_hat, inv_std) = match mode {
            Mode::Eval => {
                let inv_std: Vec<T> = self
                    .running_var
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                (normalize(x, c, self.running_mean.data(), &inv_std), inv_std)
            }
            Mode::Train => {
                let m = n * vol;
                if m < 2 {
                    return Err(Error::Shape(
                        "batchnorm in train mode needs at least 2 values per channel".into(),
                    ));
                }
                let count = T::of(m as f64);
                let mean: Vec<T> = channel_sums(x.data(), None, n, c, vol, |a, _| a)
                    .into_iter()
                    .map(|s| s / count)
                    .collect();
                let var: Vec<T> = (0..c)
                    .into_par_iter()
                    .map(|ch| {
                        let mut acc = T::zero();
                        for s in 0..n {
                            let off = (s * c + ch) * vol;
                            for &v in &x.data()[off..off + vol] {
                                let d = v - mean[ch];
                                acc += d * d;
                            }
                        }
                        acc / count
                    })
                    .collect();
                let keep = T::of(self.decay);
                let take = T::one() - keep;
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = keep * *rm + take * mean[ch];
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = keep * *rv + take * var[ch];
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (normalize(x, c, &mean, &inv_std), inv_std)
            }
        };
        let y = self.affine(&x_hat, c);
        self.cache = Some(Cache {
            x_hat,
            inv_std,
            mode,
        });
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("batchnorm3d"))?;
        dy.expect_dims(cache.x_hat.dims(), "batchnorm backward")?;
        let (n, c, ext) = dy.dims5()?;
        let vol: usize = ext.iter().product();
        let sum_dy = channel_sums(dy.data(), None, n, c, vol, |a, _| a);
        let sum_dy_xhat = channel_sums(dy.data(), Some(cache.x_hat.data()), n, c, vol, |a, b| a * b);

        let gamma = self.gamma.value.data();
        let m = T::of((n * vol) as f64);
        let mut dx = dy.clone();
        let x_hat = cache.x_hat.data();
        let inv_std = &cache.inv_std;
        let train = cache.mode == Mode::Train;
        dx.data_mut()
            .par_chunks_mut(vol)
            .enumerate()
            .for_each(|(i, chunk)| {
                let ch = i % c;
                let scale = gamma[ch] * inv_std[ch];
                let xh = &x_hat[i * vol..(i + 1) * vol];
                if train {
                    // dx = γ·σ⁻¹/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
                    for (d, &h) in chunk.iter_mut().zip(xh) {
                        *d = scale / m * (m * *d - sum_dy[ch] - h * sum_dy_xhat[ch]);
                    }
                } else {
                    chunk.iter_mut().for_each(|d| *d *= scale);
                }
            });
        self.gamma.grad.data_mut().copy_from_slice(&sum_dy_xhat);
        self.beta.grad.data_mut().copy_from_slice(&sum_dy);
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "gamma"), Slot::Param(&mut self.gamma));
        f(&join(prefix, "beta"), Slot::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, bool)) {
        f(&join(prefix, "gamma"), &self.gamma.value, true);
        f(&join(prefix, "beta"), &self.beta.value, true);
        f(&join(prefix, "running_mean"), &self.running_mean, false);
        f(&join(prefix, "running_var"), &self.running_var, false);
    }
}
