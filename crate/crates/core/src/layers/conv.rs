use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{join, Layer, Mode, Param, Slot};
use crate::error::{Error, Result};
use crate::tensor::{col2im3d, gemm, gemm_a_bt_acc, gemm_at_b, im2col3d, ConvGeometry, Scalar, Tensor};

/// Grouped 3D convolution. `groups == in_channels` gives a depthwise conv.
#[derive(Clone, Debug)]
pub struct Conv3d<T> {
    /// `[Cout, Cin / groups, kT, kH, kW]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub geometry: ConvGeometry,
    pub groups: usize,
    in_channels: usize,
    out_channels: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::Shape(format!(
                "channels {in_channels}->{out_channels} not divisible by {groups} groups"
            )));
        }
        let [kt, kh, kw] = geometry.kernel;
        let weight = Tensor::zeros(vec![out_channels, in_channels / groups, kt, kh, kw])?;
        Ok(Self {
            weight: Param::new(weight),
            bias: if bias {
                Some(Param::new(Tensor::zeros(vec![out_channels])?))
            } else {
                None
            },
            geometry,
            groups,
            in_channels,
            out_channels,
            cache: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Normal init with std `sqrt(2 / fan_out)`, truncated at two standard
    /// deviations. Biases are zeroed.
    pub fn init_fan_out(&mut self, rng: &mut impl Rng) {
        let fan_out = self.out_channels / self.groups * self.geometry.kernel_volume();
        let std = (2.0 / fan_out as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in self.weight.value.data_mut() {
            *w = T::of(loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            });
        }
        if let Some(b) = &mut self.bias {
            b.value.data_mut().fill(T::zero());
        }
    }

    /// Output shape for an `N×Cin×T×H×W` input.
    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [n, c, t, h, w] = *input else {
            return Err(Error::Shape(format!("conv3d expects rank 5, got {input:?}")));
        };
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv3d expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let [ot, oh, ow] = self.geometry.output_extents([t, h, w])?;
        Ok(vec![n, self.out_channels, ot, oh, ow])
    }

    fn group_sizes(&self) -> (usize, usize, usize) {
        let cig = self.in_channels / self.groups;
        let cog = self.out_channels / self.groups;
        (cig, cog, cig * self.geometry.kernel_volume())
    }

    /// Forward pass through the im2col + matmul path without caching.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_dims = self.output_dims(x.dims())?;
        let (_, _, extents) = x.dims5()?;
        let out_ext = [out_dims[2], out_dims[3], out_dims[4]];
        let vol_in: usize = extents.iter().product();
        let l: usize = out_ext.iter().product();
        let (cig, cog, k) = self.group_sizes();
        let pointwise = self.geometry.is_pointwise();
        let weight = self.weight.value.data();
        let xd = x.data();
        let groups = self.groups;
        let geometry = self.geometry;

        let mut out = vec![T::zero(); out_dims.iter().product()];
        out.par_chunks_mut(cog * l).enumerate().for_each(|(idx, y)| {
            let (n, g) = (idx / groups, idx % groups);
            let xg = &xd[(n * self.in_channels + g * cig) * vol_in..][..cig * vol_in];
            let wg = &weight[g * cog * k..(g + 1) * cog * k];
            if pointwise {
                gemm(cog, k, l, wg, xg, y, false);
            } else {
                let mut cols = vec![T::zero(); k * l];
                im2col3d(xg, cig, extents, &geometry, out_ext, &mut cols);
                gemm(cog, k, l, wg, &cols, y, false);
            }
            if let Some(b) = &self.bias {
                for (o, row) in y.chunks_mut(l).enumerate() {
                    let bv = b.value.data()[g * cog + o];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
        Tensor::new(out_dims, out)
    }

    /// Reference convolution evaluated straight from the definition, one
    /// output element at a time. Used to benchmark the im2col path.
    pub fn forward_direct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_dims = self.output_dims(x.dims())?;
        let (n_batch, cin, [it, ih, iw]) = x.dims5()?;
        let [_, cout, ot, oh, ow] = out_dims[..] else {
            unreachable!()
        };
        let [kt, kh, kw] = self.geometry.kernel;
        let [st, sh, sw] = self.geometry.stride;
        let [pt, ph, pw] = self.geometry.padding;
        let (cig, cog, _) = self.group_sizes();
        let w = &self.weight.value;
        let mut out = Tensor::zeros(out_dims.clone())?;
        for n in 0..n_batch {
            for co in 0..cout {
                let g = co / cog;
                for t in 0..ot {
                    for h in 0..oh {
                        for x_ in 0..ow {
                            let mut acc = self.bias.as_ref().map_or(T::zero(), |b| b.value.data()[co]);
                            for ci in 0..cig {
                                for dt in 0..kt {
                                    for dh in 0..kh {
                                        for dw in 0..kw {
                                            let ti = (t * st + dt) as isize - pt as isize;
                                            let hi = (h * sh + dh) as isize - ph as isize;
                                            let wi = (x_ * sw + dw) as isize - pw as isize;
                                            if ti < 0
                                                || hi < 0
                                                || wi < 0
                                                || ti >= it as isize
                                                || hi >= ih as isize
                                                || wi >= iw as isize
                                            {
                                                continue;
                                            }
                                            let xv = x.data()[(((n * cin + g * cig + ci) * it
                                                + ti as usize)
                                                * ih
                                                + hi as usize)
                                                * iw
                                                + wi as usize];
                                            let wv = w.data()
                                                [(((co * cig + ci) * kt + dt) * kh + dh) * kw + dw];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((n * cout + co) * ot + t) * oh + h) * ow + x_] = acc;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Layer<T> for Conv3d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("conv3d"))?;
        let out_dims = self.output_dims(x.dims())?;
        dy.expect_dims(&out_dims, "conv3d backward")?;
        let (n_batch, _, extents) = x.dims5()?;
        let out_ext = [out_dims[2], out_dims[3], out_dims[4]];
        let vol_in: usize = extents.iter().product();
        let l: usize = out_ext.iter().product();
        let (cig, cog, k) = self.group_sizes();
        let pointwise = self.geometry.is_pointwise();
        let weight = self.weight.value.data();
        let geometry = self.geometry;
        let groups = self.groups;
        let has_bias = self.bias.is_some();
        let dyd = dy.data();

        let mut dx = vec![T::zero(); x.len()];
        // One (dW_g, db_g) partial per (sample, group); reduced below in a
        // fixed order so the result does not depend on scheduling.
        let partials: Vec<(Vec<T>, Vec<T>)> = dx
            .par_chunks_mut(cig * vol_in)
            .enumerate()
            .map(|(idx, dxg)| {
                let g = idx % groups;
                let xg = &x.data()[idx * cig * vol_in..][..cig * vol_in];
                let dyg = &dyd[idx * cog * l..][..cog * l];
                let wg = &weight[g * cog * k..(g + 1) * cog * k];
                let mut dw = vec![T::zero(); cog * k];
                if pointwise {
                    gemm_a_bt_acc(cog, l, k, dyg, xg, &mut dw);
                    gemm_at_b(k, cog, l, wg, dyg, dxg);
                } else {
                    let mut cols = vec![T::zero(); k * l];
                    im2col3d(xg, cig, extents, &geometry, out_ext, &mut cols);
                    gemm_a_bt_acc(cog, l, k, dyg, &cols, &mut dw);
                    gemm_at_b(k, cog, l, wg, dyg, &mut cols);
                    col2im3d(&cols, cig, extents, &geometry, out_ext, dxg);
                }
                let db = if has_bias {
                    dyg.chunks(l).map(|row| row.iter().copied().sum()).collect()
                } else {
                    Vec::new()
                };
                (dw, db)
            })
            .collect();

        let dw = self.weight.grad.data_mut();
        dw.fill(T::zero());
        if let Some(b) = &mut self.bias {
            b.grad.data_mut().fill(T::zero());
        }
        for n in 0..n_batch {
            for g in 0..groups {
                let (pw, pb) = &partials[n * groups + g];
                for (acc, &v) in dw[g * cog * k..(g + 1) * cog * k].iter_mut().zip(pw) {
                    *acc += v;
                }
                if let Some(b) = &mut self.bias {
                    for (acc, &v) in b.grad.data_mut()[g * cog..(g + 1) * cog].iter_mut().zip(pb) {
                        *acc += v;
                    }
                }
            }
        }
        Tensor::new(x.dims().to_vec(), dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, bool)) {
        f(&join(prefix, "weight"), &self.weight.value, true);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), &b.value, true);
        }
    }
}
