//! Binary PPM (P6, 8-bit) frames.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbFrame {
    pub height: usize,
    pub width: usize,
    /// `height × width × 3`, row-major, RGB interleaved.
    pub pixels: Vec<u8>,
}

impl RgbFrame {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(Error::Data(format!(
                "{height}×{width} RGB frame needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        Self {
            height,
            width,
            pixels: rgb.iter().copied().cycle().take(height * width * 3).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = [0usize; 3];
        let magic = next_token(bytes, &mut pos).ok_or_else(|| corrupt("missing magic"))?;
        if magic != b"P6" {
            return Err(corrupt("not a binary PPM (P6)"));
        }
        for f in &mut fields {
            let tok = next_token(bytes, &mut pos).ok_or_else(|| corrupt("truncated header"))?;
            *f = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| corrupt("bad header number"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(corrupt("only 8-bit PPM is supported"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(corrupt("raster shorter than header declares"));
        }
        Self::new(height, width, bytes[pos..pos + need].to_vec())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }
}

fn corrupt(msg: &str) -> Error {
    Error::Data(format!("corrupt frame: {msg}"))
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

/// File name of frame `index` inside a video directory.
pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.ppm")
}
