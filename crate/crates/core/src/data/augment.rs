//! Train-time augmentations on `[3, T, H, W]` clips scaled to [0, 1].
//! Each transform is applied identically to every frame of a clip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::preprocess::resize_bilinear;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Brightness factor range; `(1, 1)` disables it.
    pub brightness: (f64, f64),
    /// Contrast factor range about the clip mean.
    pub contrast: (f64, f64),
    /// Crop area fraction range; `(1, 1)` disables cropping.
    pub crop_area: (f64, f64),
    pub salt_pepper: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            brightness: (0.8, 1.2),
            contrast: (0.8, 1.2),
            crop_area: (0.8, 1.0),
            salt_pepper: 0.01,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            flip_prob: 0.0,
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            crop_area: (1.0, 1.0),
            salt_pepper: 0.0,
        }
    }
}

fn dims4(clip: &Tensor) -> [usize; 4] {
    match *clip.dims() {
        [c, t, h, w] => [c, t, h, w],
        ref d => panic!("augmentations expect [C, T, H, W], got {d:?}"),
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn flip_horizontal(clip: &mut Tensor) {
    let w = dims4(clip)[3];
    for row in clip.data_mut().chunks_mut(w) {
        row.reverse();
    }
}

/// `y = m + contrast·(brightness·x − m)` with `m` the mean of the
/// brightened clip, clamped to [0, 1].
pub fn adjust_lighting(clip: &mut Tensor, brightness: f32, contrast: f32) {
    let data = clip.data_mut();
    data.iter_mut().for_each(|v| *v *= brightness);
    let mean = (data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64) as f32;
    data.iter_mut()
        .for_each(|v| *v = (mean + contrast * (*v - mean)).clamp(0.0, 1.0));
}

/// Crops the window `[y0, y0+ch) × [x0, x0+cw)` from every frame and
/// resizes it back to the full frame size.
pub fn crop_resize(clip: &mut Tensor, y0: usize, x0: usize, ch: usize, cw: usize) {
    let [_, _, h, w] = dims4(clip);
    assert!(ch >= 1 && cw >= 1 && y0 + ch <= h && x0 + cw <= w, "crop window out of bounds");
    if ch == h && cw == w {
        return;
    }
    let mut window = Vec::with_capacity(ch * cw);
    for plane in clip.data_mut().chunks_mut(h * w) {
        window.clear();
        for y in y0..y0 + ch {
            window.extend_from_slice(&plane[y * w + x0..y * w + x0 + cw]);
        }
        plane.copy_from_slice(&resize_bilinear(&window, ch, cw, h, w));
    }
}

/// Sets each pixel site (all channels together) to 0 or 1 with probability
/// `frac`, choosing salt or pepper with equal odds. Returns the number of
/// corrupted sites.
pub fn salt_and_pepper(clip: &mut Tensor, frac: f64, rng: &mut impl Rng) -> usize {
    let [c, t, h, w] = dims4(clip);
    let sites = t * h * w;
    let data = clip.data_mut();
    let mut hit = 0;
    for s in 0..sites {
        if rng.random::<f64>() < frac {
            let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
            for ch in 0..c {
                data[ch * sites + s] = v;
            }
            hit += 1;
        }
    }
    hit
}

/// Applies flip, lighting, crop and salt-and-pepper in that order.
pub fn augment(clip: &mut Tensor, rng: &mut impl Rng, cfg: &AugmentConfig) {
    let [_, _, h, w] = dims4(clip);
    if cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob {
        flip_horizontal(clip);
    }
    let b = uniform(rng, cfg.brightness) as f32;
    let k = uniform(rng, cfg.contrast) as f32;
    if b != 1.0 || k != 1.0 {
        adjust_lighting(clip, b, k);
    }
    let area = uniform(rng, cfg.crop_area);
    if area < 1.0 {
        let side = area.sqrt();
        let ch = ((h as f64 * side).round() as usize).clamp(1, h);
        let cw = ((w as f64 * side).round() as usize).clamp(1, w);
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        crop_resize(clip, y0, x0, ch, cw);
    }
    if cfg.salt_pepper > 0.0 {
        salt_and_pepper(clip, cfg.salt_pepper, rng);
    }
}
