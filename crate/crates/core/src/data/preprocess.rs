use serde::{Deserialize, Serialize};

use super::ppm::RgbFrame;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel standardization constants applied after scaling to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    /// Default for randomly initialized models.
    pub const HALF: Self = Self {
        mean: [0.5; 3],
        std: [0.5; 3],
    };
    /// Statistics the image-pretrained 2D weights were trained with.
    pub const IMAGENET: Self = Self {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "half" => Some(Self::HALF),
            "imagenet" => Some(Self::IMAGENET),
            _ => None,
        }
    }

    pub fn name(&self) -> Option<&'static str> {
        if *self == Self::HALF {
            Some("half")
        } else if *self == Self::IMAGENET {
            Some("imagenet")
        } else {
            None
        }
    }
}

/// Bilinear resampling of a single plane with half-pixel centers
/// (edge samples are clamped).
pub fn resize_bilinear(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    assert_eq!(src.len(), sh * sw, "plane size");
    if sh == dh && sw == dw {
        return src.to_vec();
    }
    let taps = |d: usize, s: usize| -> Vec<(usize, usize, f32)> {
        (0..d)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * s as f64 / d as f64 - 0.5).clamp(0.0, (s - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(s - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let ys = taps(dh, sh);
    let xs = taps(dw, sw);
    let mut out = Vec::with_capacity(dh * dw);
    for &(y0, y1, fy) in &ys {
        let (r0, r1) = (&src[y0 * sw..(y0 + 1) * sw], &src[y1 * sw..(y1 + 1) * sw]);
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

/// Decodes frames into a `[3, T, h, w]` tensor scaled to [0, 1].
/// Every frame is resized directly to `h × w`; aspect ratio is not kept.
pub fn frames_to_clip(frames: &[RgbFrame], h: usize, w: usize) -> Result<Tensor> {
    if frames.is_empty() || h == 0 || w == 0 {
        return Err(Error::Data("clip needs at least one frame and a positive size".into()));
    }
    let t = frames.len();
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * t * plane];
    let mut channel = Vec::new();
    for (ti, f) in frames.iter().enumerate() {
        for c in 0..3 {
            channel.clear();
            channel.extend(f.pixels.iter().skip(c).step_by(3).map(|&p| p as f32 / 255.0));
            let resized = resize_bilinear(&channel, f.height, f.width, h, w);
            let off = (c * t + ti) * plane;
            data[off..off + plane].copy_from_slice(&resized);
        }
    }
    Tensor::new(vec![3, t, h, w], data)
}

fn channel_planes(clip: &mut Tensor) -> Result<(usize, &mut [f32])> {
    match *clip.dims() {
        [3, t, h, w] => Ok((t * h * w, clip.data_mut())),
        ref d => Err(Error::Shape(format!("expected a [3, T, H, W] clip, got {d:?}"))),
    }
}

pub fn standardize(clip: &mut Tensor, norm: &Normalization) -> Result<()> {
    let (n, data) = channel_planes(clip)?;
    for (c, plane) in data.chunks_mut(n).enumerate() {
        let (m, s) = (norm.mean[c], norm.std[c]);
        plane.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(())
}

pub fn unstandardize(clip: &mut Tensor, norm: &Normalization) -> Result<()> {
    let (n, data) = channel_planes(clip)?;
    for (c, plane) in data.chunks_mut(n).enumerate() {
        let (m, s) = (norm.mean[c], norm.std[c]);
        plane.iter_mut().for_each(|v| *v = *v * s + m);
    }
    Ok(())
}

/// Resize, scale and standardize in one step (no augmentation).
pub fn preprocess(frames: &[RgbFrame], h: usize, w: usize, norm: &Normalization) -> Result<Tensor> {
    let mut clip = frames_to_clip(frames, h, w)?;
    standardize(&mut clip, norm)?;
    Ok(clip)
}
