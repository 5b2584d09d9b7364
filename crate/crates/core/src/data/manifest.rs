use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ppm::RgbFrame;
use crate::error::{Error, Result};

/// Class vocabulary. The discriminant is the class index used by the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal = 0,
    Drift = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Normal, Label::Drift];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Drift => "drift",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    /// Directory of `frame_%05d.ppm` files, relative to the dataset root.
    pub frame_dir: String,
    pub frame_count: usize,
    pub label: Label,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub videos: Vec<VideoRecord>,
    /// (H, W) of the stored frames.
    pub frame_size: [usize; 2],
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn sorted_dirs(path: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

fn frame_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("frame_") && name.ends_with(".ppm") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Scans `root/<label>/<video>/frame_*.ppm` and splits each label's videos
/// into train/val with a seeded shuffle. The split is per video, so frames
/// of one video never straddle the two splits.
pub fn build_manifest(root: &Path, seed: u64, train_frac: f64) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::Config(format!("train fraction must be in [0,1], got {train_frac}")));
    }
    let mut videos = Vec::new();
    let mut frame_size: Option<[usize; 2]> = None;
    for label in Label::ALL {
        let dir = root.join(label.as_str());
        let ids = sorted_dirs(&dir)?;
        let mut records = Vec::new();
        for id in ids {
            let vdir = dir.join(&id);
            let frames = frame_files(&vdir)?;
            let Some(first) = frames.first() else {
                continue;
            };
            let f = RgbFrame::read(&vdir.join(first))?;
            let size = [f.height, f.width];
            match frame_size {
                None => frame_size = Some(size),
                Some(s) if s != size => {
                    return Err(Error::Data(format!(
                        "{}: frame size {size:?} differs from {s:?}",
                        vdir.display()
                    )))
                }
                _ => {}
            }
            records.push(VideoRecord {
                frame_dir: format!("{}/{id}", label.as_str()),
                id,
                frame_count: frames.len(),
                label,
                split: Split::Val,
            });
        }
        if records.is_empty() {
            return Err(Error::Data(format!("no videos for class `{}`", label.as_str())));
        }
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (label.index() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let n_train = (train_frac * records.len() as f64).round() as usize;
        for &i in &order[..n_train] {
            records[i].split = Split::Train;
        }
        videos.extend(records);
    }
    Ok(Manifest {
        videos,
        frame_size: frame_size.expect("at least one video was found"),
        seed,
    })
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: invalid manifest: {e}", path.display())))
    }

    pub fn split(&self, split: Split) -> Vec<&VideoRecord> {
        self.videos.iter().filter(|v| v.split == split).collect()
    }

    pub fn total_frames(&self) -> usize {
        self.videos.iter().map(|v| v.frame_count).sum()
    }
}
