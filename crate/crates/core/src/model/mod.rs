//! EfficientNet3D assembled from a declarative stage table.

mod config;
mod inflate;
mod mbconv;

pub use config::{
    b0_stage_table, round_filters, round_repeats, scale_config, scale_config_with, BlockArgs,
    ModelConfig, ScalingCoefficients, FILTER_DIVISOR,
};
pub use inflate::{inflate_2d, inflate_kernel, InflationReport};
pub use mbconv::{ConvBn, MbConv, MbConvSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{self, join, Conv3d, Dense, Dropout, GlobalAvgPool3d, Layer, Mode, Slot};
use crate::tensor::{ConvGeometry, Scalar, Tensor};

/// One row of the layer table printed by `inspect`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSummary {
    pub name: String,
    pub output_dims: Vec<usize>,
    pub params: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    config: ModelConfig,
    pub stem: ConvBn<T>,
    pub blocks: Vec<MbConv<T>>,
    pub head: ConvBn<T>,
    pool: GlobalAvgPool3d,
    dropout: Dropout<T>,
    pub classifier: Dense<T>,
}

/// Resolves the stage table into per-block specs under the config's
/// width and depth multipliers.
pub fn block_specs(config: &ModelConfig) -> Vec<MbConvSpec> {
    let mut specs = Vec::new();
    for stage in &config.stage_table {
        let in_ch = round_filters(stage.in_ch, config.width_mult);
        let out_ch = round_filters(stage.out_ch, config.width_mult);
        for i in 0..round_repeats(stage.repeats, config.depth_mult) {
            specs.push(MbConvSpec {
                in_ch: if i == 0 { in_ch } else { out_ch },
                out_ch,
                kernel: stage.kernel,
                stride: if i == 0 { stage.stride } else { 1 },
                expand_ratio: stage.expand_ratio,
                se_ratio: stage.se_ratio,
            });
        }
    }
    specs
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a network. The same config and seed always
    /// produce bitwise-identical weights.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stem_ch = round_filters(config.stem_ch, config.width_mult);
        let head_ch = round_filters(config.head_ch, config.width_mult);
        let specs = block_specs(config);
        let first_in = specs.first().map_or(stem_ch, |s| s.in_ch);
        if first_in != stem_ch {
            return Err(Error::Config(format!(
                "first stage expects {first_in} channels but the stem produces {stem_ch}"
            )));
        }
        for pair in specs.windows(2) {
            if pair[0].out_ch != pair[1].in_ch {
                return Err(Error::Config(format!(
                    "stage table does not chain: {} -> {}",
                    pair[0].out_ch, pair[1].in_ch
                )));
            }
        }
        let last_ch = specs.last().map_or(stem_ch, |s| s.out_ch);

        let (decay, eps) = (config.bn_decay, config.bn_eps);
        let stem = ConvBn::new(
            Conv3d::new(config.in_channels, stem_ch, ConvGeometry::cubic(3, 2)?, 1, false)?,
            decay,
            eps,
            true,
        )?;
        let blocks = specs
            .iter()
            .enumerate()
            .map(|(i, &spec)| {
                MbConv::new(spec, decay, eps, config.drop_connect, seed.wrapping_add(1000 + i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        let pointwise = ConvGeometry::new([1; 3], [1; 3], [0; 3])?;
        let head = ConvBn::new(Conv3d::new(last_ch, head_ch, pointwise, 1, false)?, decay, eps, true)?;

        let mut model = Self {
            config: config.clone(),
            stem,
            blocks,
            head,
            pool: GlobalAvgPool3d::new(),
            dropout: Dropout::new(config.dropout, seed.wrapping_add(1))?,
            classifier: Dense::new(head_ch, config.num_classes)?,
        };
        // Rejects configs whose strides shrink an extent below 1.
        model.summary()?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.stem.conv.init_fan_out(&mut rng);
        for b in &mut model.blocks {
            b.init(&mut rng);
        }
        model.head.conv.init_fan_out(&mut rng);
        model.classifier.init_uniform(&mut rng);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Expected input shape for a batch of `n` clips.
    pub fn input_dims(&self, n: usize) -> Vec<usize> {
        let [t, h, w] = self.config.resolution;
        vec![n, self.config.in_channels, t, h, w]
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.inputs()
    }

    /// Per-layer output shapes and parameter counts for one clip at the
    /// configured resolution.
    pub fn summary(&self) -> Result<Vec<LayerSummary>> {
        let mut rows = Vec::new();
        let mut dims = self.input_dims(1);
        let row = |name: String, dims: &[usize], params: usize| LayerSummary {
            name,
            output_dims: dims.to_vec(),
            params,
        };
        dims = self.stem.output_dims(&dims)?;
        rows.push(row("stem".into(), &dims, layers::count_params(&self.stem)));
        for (i, b) in self.blocks.iter().enumerate() {
            let name = format!("blocks.{i}");
            if let Some(e) = &b.expand {
                dims = e.output_dims(&dims)?;
                rows.push(row(join(&name, "expand"), &dims, layers::count_params(e)));
            }
            dims = b.depthwise.output_dims(&dims)?;
            rows.push(row(join(&name, "depthwise"), &dims, layers::count_params(&b.depthwise)));
            rows.push(row(join(&name, "se"), &dims, layers::count_params(&b.se)));
            dims = b.project.output_dims(&dims)?;
            rows.push(row(join(&name, "project"), &dims, layers::count_params(&b.project)));
        }
        dims = self.head.output_dims(&dims)?;
        rows.push(row("head".into(), &dims, layers::count_params(&self.head)));
        dims.truncate(2);
        rows.push(row("pool".into(), &dims, 0));
        dims[1] = self.config.num_classes;
        rows.push(row("classifier".into(), &dims, layers::count_params(&self.classifier)));
        Ok(rows)
    }

    pub fn count_params(&self) -> usize {
        layers::count_params(self)
    }

    /// Pooled features before dropout and the classifier, `[N, head_ch]`.
    pub fn forward_features(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let expected = self.input_dims(x.dims().first().copied().unwrap_or(0));
        if x.dims()[1..] != expected[1..] {
            return Err(Error::Shape(format!(
                "model expects input {:?}, got {:?}",
                &expected[1..],
                x.dims()
            )));
        }
        let mut y = self.stem.forward(x, mode)?;
        for b in &mut self.blocks {
            y = b.forward(&y, mode)?;
        }
        y = self.head.forward(&y, mode)?;
        self.pool.forward(&y, mode)
    }

    /// Named copies of every parameter and buffer, in visiting order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_ref("", &mut |name, t, _| out.push((name.to_string(), t.clone())));
        out
    }

    /// Named parameter shapes and whether each is trainable.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut out = Vec::new();
        self.visit_ref("", &mut |name, t, trainable| {
            out.push((name.to_string(), t.dims().to_vec(), trainable))
        });
        out
    }

    /// Overwrites parameters and buffers from `tensors`. Every tensor the
    /// model owns must be present with the right shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor<T>> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        self.visit("", &mut |name, slot| {
            if err.is_some() {
                return;
            }
            let dst = match slot {
                Slot::Param(p) => &mut p.value,
                Slot::Buffer(b) => b,
            };
            match lookup.get(name) {
                None => err = Some(Error::Malformed(format!("missing tensor `{name}`"))),
                Some(src) if src.dims() != dst.dims() => {
                    err = Some(Error::TensorShapeMismatch {
                        name: name.to_string(),
                        found: src.dims().to_vec(),
                        expected: dst.dims().to_vec(),
                    })
                }
                Some(src) => dst.data_mut().copy_from_slice(src.data()),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

impl<T: Scalar> Layer<T> for Model<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let features = self.forward_features(x, mode)?;
        let features = self.dropout.forward(&features, mode)?;
        self.classifier.forward(&features, mode)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut d = self.classifier.backward(dy)?;
        d = self.dropout.backward(&d)?;
        d = self.pool.backward(&d)?;
        d = self.head.backward(&d)?;
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d)?;
        }
        self.stem.backward(&d)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, bool)) {
        self.stem.visit_ref(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_ref(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit_ref(&join(prefix, "head"), f);
        self.classifier.visit_ref(&join(prefix, "classifier"), f);
    }
}
