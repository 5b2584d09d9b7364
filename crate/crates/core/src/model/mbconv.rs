use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{join, BatchNorm3d, Conv3d, Layer, Mode, Slot, SqueezeExcite, Swish};
use crate::tensor::{ConvGeometry, Scalar, Tensor};

/// Bias-free convolution, batch norm, and an optional swish.
#[derive(Clone, Debug)]
pub struct ConvBn<T> {
    pub conv: Conv3d<T>,
    pub bn: BatchNorm3d<T>,
    act: Option<Swish<T>>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new(
        conv: Conv3d<T>,
        bn_decay: f64,
        bn_eps: f64,
        activate: bool,
    ) -> Result<Self> {
        let bn = BatchNorm3d::new(conv.out_channels(), bn_decay, bn_eps)?;
        Ok(Self {
            conv,
            bn,
            act: activate.then(Swish::new),
        })
    }

    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.conv.output_dims(input)
    }
}

impl<T: Scalar> Layer<T> for ConvBn<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv.forward(x, mode)?;
        let y = self.bn.forward(&y, mode)?;
        match &mut self.act {
            Some(act) => act.forward(&y, mode),
            None => Ok(y),
        }
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dy = match &mut self.act {
            Some(act) => act.backward(dy)?,
            None => dy.clone(),
        };
        let dy = self.bn.backward(&dy)?;
        self.conv.backward(&dy)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, bool)) {
        self.conv.visit_ref(&join(prefix, "conv"), f);
        self.bn.visit_ref(&join(prefix, "bn"), f);
    }
}

/// Resolved shape of one MBConv block after width/depth scaling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MbConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub expand_ratio: usize,
    pub se_ratio: f64,
}

impl MbConvSpec {
    pub fn expanded(&self) -> usize {
        self.in_ch * self.expand_ratio
    }

    /// SE bottleneck width, computed from the block input channels.
    pub fn se_channels(&self) -> usize {
        ((self.in_ch as f64 * self.se_ratio).round() as usize).max(1)
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_ch == self.out_ch
    }
}

/// Mobile inverted bottleneck: pointwise expand, depthwise conv,
/// squeeze-excite, pointwise project, plus an identity shortcut when the
/// block preserves shape.
#[derive(Clone, Debug)]
pub struct MbConv<T> {
    pub spec: MbConvSpec,
    pub expand: Option<ConvBn<T>>,
    pub depthwise: ConvBn<T>,
    pub se: SqueezeExcite<T>,
    pub project: ConvBn<T>,
    drop_connect: f64,
    rng: ChaCha8Rng,
    keep_mask: Option<Vec<T>>,
}

impl<T: Scalar> MbConv<T> {
    pub fn new(spec: MbConvSpec, bn_decay: f64, bn_eps: f64, drop_connect: f64, seed: u64) -> Result<Self> {
        let pointwise = ConvGeometry::new([1; 3], [1; 3], [0; 3])?;
        let mid = spec.expanded();
        let expand = if spec.expand_ratio != 1 {
            Some(ConvBn::new(
                Conv3d::new(spec.in_ch, mid, pointwise, 1, false)?,
                bn_decay,
                bn_eps,
                true,
            )?)
        } else {
            None
        };
        let depthwise = ConvBn::new(
            Conv3d::new(mid, mid, ConvGeometry::cubic(spec.kernel, spec.stride)?, mid, false)?,
            bn_decay,
            bn_eps,
            true,
        )?;
        let se = SqueezeExcite::new(mid, spec.se_channels())?;
        let project = ConvBn::new(
            Conv3d::new(mid, spec.out_ch, pointwise, 1, false)?,
            bn_decay,
            bn_eps,
            false,
        )?;
        Ok(Self {
            spec,
            expand,
            depthwise,
            se,
            project,
            drop_connect,
            rng: ChaCha8Rng::seed_from_u64(seed),
            keep_mask: None,
        })
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        if let Some(e) = &mut self.expand {
            e.conv.init_fan_out(rng);
        }
        self.depthwise.conv.init_fan_out(rng);
        self.se.reduce.init_fan_out(rng);
        self.se.expand.init_fan_out(rng);
        self.project.conv.init_fan_out(rng);
    }

    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut dims = input.to_vec();
        if let Some(e) = &self.expand {
            dims = e.output_dims(&dims)?;
        }
        dims = self.depthwise.output_dims(&dims)?;
        self.project.output_dims(&dims)
    }
}

impl<T: Scalar> Layer<T> for MbConv<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = match &mut self.expand {
            Some(e) => e.forward(x, mode)?,
            None => x.clone(),
        };
        y = self.depthwise.forward(&y, mode)?;
        y = self.se.forward(&y, mode)?;
        y = self.project.forward(&y, mode)?;
        self.keep_mask = None;
        if self.spec.has_residual() {
            if mode == Mode::Train && self.drop_connect > 0.0 {
                let n = y.dims()[0];
                let per = y.len() / n;
                let keep = 1.0 - self.drop_connect;
                let mask: Vec<T> = (0..n)
                    .map(|_| {
                        if self.rng.random::<f64>() < keep {
                            T::of(1.0 / keep)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                for (chunk, &m) in y.data_mut().chunks_mut(per).zip(&mask) {
                    chunk.iter_mut().for_each(|v| *v *= m);
                }
                self.keep_mask = Some(mask);
            }
            y.add_assign(x)?;
        }
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut d = dy.clone();
        if let Some(mask) = &self.keep_mask {
            let per = d.len() / mask.len();
            for (chunk, &m) in d.data_mut().chunks_mut(per).zip(mask) {
                chunk.iter_mut().for_each(|v| *v *= m);
            }
        }
        d = self.project.backward(&d)?;
        d = self.se.backward(&d)?;
        d = self.depthwise.backward(&d)?;
        if let Some(e) = &mut self.expand {
            d = e.backward(&d)?;
        }
        if self.spec.has_residual() {
            if d.dims() != dy.dims() {
                return Err(Error::Shape("residual branch changed shape".into()));
            }
            d.add_assign(dy)?;
        }
        Ok(d)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        if let Some(e) = &mut self.expand {
            e.visit(&join(prefix, "expand"), f);
        }
        self.depthwise.visit(&join(prefix, "depthwise"), f);
        self.se.visit(&join(prefix, "se"), f);
        self.project.visit(&join(prefix, "project"), f);
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, bool)) {
        if let Some(e) = &self.expand {
            e.visit_ref(&join(prefix, "expand"), f);
        }
        self.depthwise.visit_ref(&join(prefix, "depthwise"), f);
        self.se.visit_ref(&join(prefix, "se"), f);
        self.project.visit_ref(&join(prefix, "project"), f);
    }
}
