//! Synthetic top-down driving clips.
//!
//! "normal" videos show a car-sized rectangle translating at constant
//! velocity with its heading aligned to the motion. "drift" videos move the
//! same sprite along a circular arc while its heading is offset from the
//! velocity (a lateral slide) and oscillates. Both classes share the same
//! background and sprite distributions, so only the motion separates them.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{build_manifest, Label, Manifest, MANIFEST_FILE};
use super::ppm::{frame_file_name, RgbFrame};
use super::preprocess::resize_bilinear;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Total videos, split evenly between the two classes.
    pub videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub train_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos: 64,
            frames: 49,
            height: 90,
            width: 160,
            seed: 7,
            train_frac: 0.8,
        }
    }
}

const CAR_COLORS: [[u8; 3]; 6] = [
    [220, 40, 40],
    [40, 90, 220],
    [235, 235, 235],
    [240, 200, 40],
    [40, 180, 80],
    [200, 90, 220],
];

/// Sprite length as a fraction of frame height.
const CAR_LEN: f64 = 0.3;

#[derive(Clone, Copy, Debug)]
struct Pose {
    x: f64,
    y: f64,
    heading: f64,
}

fn background(h: usize, w: usize, rng: &mut impl Rng) -> Vec<[f32; 3]> {
    let (gh, gw) = (6, 10);
    let coarse: Vec<f32> = (0..gh * gw).map(|_| rng.random_range(70.0..130.0)).collect();
    let smooth = resize_bilinear(&coarse, gh, gw, h, w);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.9..1.1));
    smooth
        .iter()
        .map(|&g| {
            let grain = rng.random_range(-10.0..10.0);
            std::array::from_fn(|c| (g + grain) * tint[c])
        })
        .collect()
}

fn trajectory(label: Label, frames: usize, h: usize, w: usize, rng: &mut impl Rng) -> Vec<Pose> {
    let (hf, wf) = (h as f64, w as f64);
    let len = CAR_LEN * hf;
    let speed = rng.random_range(0.35..0.6) * wf / frames as f64;
    match label {
        Label::Normal => {
            let mut dir = rng.random_range(-PI / 6.0..PI / 6.0);
            if rng.random::<bool>() {
                dir += PI;
            }
            let (dx, dy) = (dir.cos(), dir.sin());
            let margin = 0.6 * len;
            let half_span = (frames as f64 - 1.0) / 2.0;
            let fit_x = (wf / 2.0 - margin) / (dx.abs() * half_span).max(1e-9);
            let fit_y = (hf / 2.0 - margin) / (dy.abs() * half_span).max(1e-9);
            let v = speed.min(fit_x).min(fit_y);
            let slack_x = (wf / 2.0 - margin - dx.abs() * half_span * v).max(0.0);
            let slack_y = (hf / 2.0 - margin - dy.abs() * half_span * v).max(0.0);
            let mx = wf / 2.0 + rng.random_range(-1.0..=1.0) * slack_x;
            let my = hf / 2.0 + rng.random_range(-1.0..=1.0) * slack_y;
            (0..frames)
                .map(|t| {
                    let s = (t as f64 - half_span) * v;
                    Pose {
                        x: mx + s * dx,
                        y: my + s * dy,
                        heading: dir,
                    }
                })
                .collect()
        }
        Label::Drift => {
            let radius = rng.random_range(0.22..0.32) * hf;
            let cx = wf / 2.0 + rng.random_range(-0.15..0.15) * wf;
            let cy = hf / 2.0 + rng.random_range(-0.05..0.05) * hf;
            let spin = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let omega = spin * speed / radius;
            let phase0 = rng.random_range(0.0..TAU);
            let slip = spin * rng.random_range(25f64..45.0).to_radians();
            let wobble = rng.random_range(15f64..30.0).to_radians();
            let period = rng.random_range(6.0..12.0);
            let wobble_phase = rng.random_range(0.0..TAU);
            (0..frames)
                .map(|t| {
                    let a = phase0 + omega * t as f64;
                    let velocity_dir = a + spin * PI / 2.0;
                    Pose {
                        x: cx + radius * a.cos(),
                        y: cy + radius * a.sin(),
                        heading: velocity_dir
                            + slip
                            + wobble * (TAU * t as f64 / period + wobble_phase).sin(),
                    }
                })
                .collect()
        }
    }
}

fn render(
    bg: &[[f32; 3]],
    h: usize,
    w: usize,
    pose: Pose,
    color: [u8; 3],
    rng: &mut impl Rng,
) -> RgbFrame {
    let len = CAR_LEN * h as f64;
    let half_l = len / 2.0;
    let half_w = len / 4.0;
    let (cos, sin) = (pose.heading.cos(), pose.heading.sin());
    let reach = half_l.hypot(half_w) + 1.0;
    let y_lo = (pose.y - reach).floor().max(0.0) as usize;
    let y_hi = ((pose.y + reach).ceil().max(0.0) as usize).min(h);
    let x_lo = (pose.x - reach).floor().max(0.0) as usize;
    let x_hi = ((pose.x + reach).ceil().max(0.0) as usize).min(w);

    let mut pixels = Vec::with_capacity(h * w * 3);
    for px in bg {
        let noise = rng.random_range(-3.0f32..3.0);
        pixels.extend(px.iter().map(|&v| (v + noise).round().clamp(0.0, 255.0) as u8));
    }
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let (dx, dy) = (x as f64 + 0.5 - pose.x, y as f64 + 0.5 - pose.y);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if u.abs() > half_l || v.abs() > half_w {
                continue;
            }
            let windshield = (0.15 * half_l..0.55 * half_l).contains(&u);
            let rgb = if windshield { [30, 30, 40] } else { color };
            let o = (y * w + x) * 3;
            pixels[o..o + 3].copy_from_slice(&rgb);
        }
    }
    RgbFrame {
        height: h,
        width: w,
        pixels,
    }
}

fn write_video(dir: &Path, label: Label, cfg: &SynthConfig, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let bg = background(h, w, &mut rng);
    let color = CAR_COLORS[rng.random_range(0..CAR_COLORS.len())];
    for (t, pose) in trajectory(label, cfg.frames, h, w, &mut rng).into_iter().enumerate() {
        render(&bg, h, w, pose, color, &mut rng).write(&dir.join(frame_file_name(t)))?;
    }
    Ok(())
}

/// Writes `out/<label>/<label>_NNNN/frame_*.ppm` plus `out/manifest.json`.
pub fn synth_generate(out: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    if cfg.videos == 0 || cfg.videos % 2 != 0 {
        return Err(Error::Config(format!(
            "video count must be positive and even, got {}",
            cfg.videos
        )));
    }
    if cfg.frames == 0 || cfg.height < 16 || cfg.width < 16 {
        return Err(Error::Config(format!(
            "synthetic videos need ≥1 frame and frames of at least 16×16, got {} frames of {}×{}",
            cfg.frames, cfg.height, cfg.width
        )));
    }
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..cfg.videos / 2 {
        for label in Label::ALL {
            let name = format!("{}_{i:04}", label.as_str());
            let dir = out.join(label.as_str()).join(name);
            write_video(&dir, label, cfg, master.next_u64())?;
        }
    }
    let manifest = build_manifest(out, cfg.seed, cfg.train_frac)?;
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
