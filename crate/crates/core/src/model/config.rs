use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{DEFAULT_BN_DECAY, DEFAULT_BN_EPS};

/// Channel counts are rounded to multiples of this.
pub const FILTER_DIVISOR: usize = 8;

/// One MBConv stage. Only the first block of a stage uses `stride`; the
/// remaining `repeats − 1` blocks use stride 1 and `in_ch = out_ch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockArgs {
    pub repeats: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    /// Cubic kernel edge (k×k×k).
    pub kernel: usize,
    /// Applied to all three axes.
    pub stride: usize,
    pub expand_ratio: usize,
    pub se_ratio: f64,
}

impl BlockArgs {
    pub const fn new(
        repeats: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        expand_ratio: usize,
    ) -> Self {
        Self {
            repeats,
            in_ch,
            out_ch,
            kernel,
            stride,
            expand_ratio,
            se_ratio: 0.25,
        }
    }

    fn validate(&self, stage: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("stage {stage}: {msg}")));
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.in_ch == 0 || self.out_ch == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if !matches!(self.stride, 1 | 2) {
            return bad(format!("stride must be 1 or 2, got {}", self.stride));
        }
        if !matches!(self.expand_ratio, 1 | 6) {
            return bad(format!("expand ratio must be 1 or 6, got {}", self.expand_ratio));
        }
        if !(self.se_ratio > 0.0 && self.se_ratio <= 1.0) {
            return bad(format!("se ratio must be in (0,1], got {}", self.se_ratio));
        }
        Ok(())
    }
}

/// The EfficientNet-B0 stage table with kernels and strides applied cubically.
pub fn b0_stage_table() -> Vec<BlockArgs> {
    vec![
        BlockArgs::new(1, 32, 16, 3, 1, 1),
        BlockArgs::new(2, 16, 24, 3, 2, 6),
        BlockArgs::new(2, 24, 40, 5, 2, 6),
        BlockArgs::new(3, 40, 80, 3, 2, 6),
        BlockArgs::new(3, 80, 112, 5, 1, 6),
        BlockArgs::new(4, 112, 192, 5, 2, 6),
        BlockArgs::new(1, 192, 320, 3, 1, 6),
    ]
}

/// Compound-scaling bases: depth `α^φ`, width `β^φ`, resolution `γ^φ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ScalingCoefficients {
    fn default() -> Self {
        Self {
            alpha: 1.2,
            beta: 1.1,
            gamma: 1.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width_mult: f64,
    pub depth_mult: f64,
    /// Clip extents (T, H, W).
    pub resolution: [usize; 3],
    pub in_channels: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub drop_connect: f64,
    pub stem_ch: usize,
    pub head_ch: usize,
    pub bn_decay: f64,
    pub bn_eps: f64,
    pub stage_table: Vec<BlockArgs>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::b0(2)
    }
}

impl ModelConfig {
    pub fn b0(num_classes: usize) -> Self {
        Self {
            width_mult: 1.0,
            depth_mult: 1.0,
            resolution: [32, 112, 112],
            in_channels: 3,
            num_classes,
            dropout: 0.2,
            drop_connect: 0.0,
            stem_ch: 32,
            head_ch: 1280,
            bn_decay: DEFAULT_BN_DECAY,
            bn_eps: DEFAULT_BN_EPS,
            stage_table: b0_stage_table(),
        }
    }

    /// Keeps only the first `stages` entries of the stage table.
    pub fn truncate_stages(mut self, stages: usize) -> Result<Self> {
        if stages == 0 || stages > self.stage_table.len() {
            return Err(Error::Config(format!(
                "stages must be in 1..={}, got {stages}",
                self.stage_table.len()
            )));
        }
        self.stage_table.truncate(stages);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.width_mult) || !positive(self.depth_mult) {
            return Err(Error::Config(format!(
                "width/depth multipliers must be positive, got {}/{}",
                self.width_mult, self.depth_mult
            )));
        }
        if self.resolution.contains(&0) {
            return Err(Error::Config(format!(
                "resolution must be positive, got {:?}",
                self.resolution
            )));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.stem_ch == 0 || self.head_ch == 0 {
            return Err(Error::Config("channel and class counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.drop_connect) {
            return Err(Error::Config("dropout rates must be in [0,1)".into()));
        }
        if !(self.bn_decay > 0.0 && self.bn_decay < 1.0) {
            return Err(Error::Config(format!(
                "bn decay must be in (0,1), got {}",
                self.bn_decay
            )));
        }
        if self.stage_table.is_empty() {
            return Err(Error::Config("stage table is empty".into()));
        }
        for (i, s) in self.stage_table.iter().enumerate() {
            s.validate(i)?;
        }
        Ok(())
    }
}

/// Scales a channel count by `width_mult`, rounding to a multiple of 8
/// without dropping more than 10% below the exact product.
pub fn round_filters(filters: usize, width_mult: f64) -> usize {
    let d = FILTER_DIVISOR as f64;
    let scaled = filters as f64 * width_mult;
    let mut n = (((scaled + d / 2.0).floor() / d).floor() * d).max(d);
    if n < 0.9 * scaled {
        n += d;
    }
    n as usize
}

pub fn round_repeats(repeats: usize, depth_mult: f64) -> usize {
    (repeats as f64 * depth_mult).ceil() as usize
}

fn round_to_multiple_of_8(v: f64) -> usize {
    ((v / 8.0).round() * 8.0) as usize
}

/// Compound-scaled B`φ` config (φ ∈ 0..=7) for `num_classes` outputs.
/// The clip length stays at 32 frames.
pub fn scale_config(phi: u32, num_classes: usize) -> Result<ModelConfig> {
    scale_config_with(phi, num_classes, ScalingCoefficients::default())
}

pub fn scale_config_with(
    phi: u32,
    num_classes: usize,
    coeffs: ScalingCoefficients,
) -> Result<ModelConfig> {
    if phi > 7 {
        return Err(Error::Config(format!("scaling exponent must be in 0..=7, got {phi}")));
    }
    let mut cfg = ModelConfig::b0(num_classes);
    let p = phi as i32;
    cfg.width_mult = coeffs.beta.powi(p);
    cfg.depth_mult = coeffs.alpha.powi(p);
    let side = round_to_multiple_of_8(112.0 * coeffs.gamma.powi(p));
    cfg.resolution = [32, side, side];
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_filters_examples() {
        assert_eq!(round_filters(32, 1.0), 32);
        assert_eq!(round_filters(32, 1.1), 32);
        assert_eq!(round_filters(40, 1.1), 48);
        assert_eq!(round_filters(16, 0.25), 8);
        assert_eq!(round_filters(1280, 0.25), 320);
    }

    #[test]
    fn round_repeats_examples() {
        assert_eq!(round_repeats(1, 1.0), 1);
        assert_eq!(round_repeats(1, 1.1), 2);
        assert_eq!(round_repeats(4, 1.2), 5);
    }

    #[test]
    fn scale_config_examples() {
        let b0 = scale_config(0, 2).unwrap();
        assert_eq!((b0.width_mult, b0.depth_mult, b0.resolution), (1.0, 1.0, [32, 112, 112]));
        let b1 = scale_config(1, 2).unwrap();
        assert!((b1.width_mult - 1.1).abs() < 1e-12);
        assert!((b1.depth_mult - 1.2).abs() < 1e-12);
        assert_eq!(b1.resolution, [32, 128, 128]);
        let b2 = scale_config(2, 2).unwrap();
        assert!((b2.width_mult - 1.21).abs() < 1e-12);
        assert!((b2.depth_mult - 1.44).abs() < 1e-12);
        assert_eq!(b2.resolution, [32, 152, 152]);
        assert!(scale_config(8, 2).is_err());
    }

    #[test]
    fn validate_rejects_bad_tables() {
        let mut cfg = ModelConfig::b0(2);
        cfg.stage_table[1].stride = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::b0(2);
        cfg.stage_table[0].expand_ratio = 4;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::b0(2).truncate_stages(0).is_err());
        assert!(ModelConfig::b0(2).validate().is_ok());
    }

    proptest::proptest! {
        #[test]
        fn round_filters_is_positive_multiple_of_8(f in 1usize..2048, w in 0.05f64..4.0) {
            let n = round_filters(f, w);
            proptest::prop_assert!(n >= 8 && n % 8 == 0);
            proptest::prop_assert!(n as f64 >= 0.9 * f as f64 * w);
        }
    }
}
