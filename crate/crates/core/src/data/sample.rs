use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Mode;

/// Frame indices for one clip of length `clip_len`.
///
/// Train mode picks a uniformly random contiguous window (temporal
/// slicing); eval mode takes the centered window. Videos shorter than the
/// clip are looped cyclically in either mode.
pub fn sample_clip(
    frame_count: usize,
    clip_len: usize,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if frame_count == 0 || clip_len == 0 {
        return Err(Error::Data(format!(
            "cannot sample {clip_len} frames from a {frame_count}-frame video"
        )));
    }
    if frame_count < clip_len {
        return Ok((0..clip_len).map(|i| i % frame_count).collect());
    }
    let slack = frame_count - clip_len;
    let start = match mode {
        Mode::Train => rng.random_range(0..=slack),
        Mode::Eval => slack / 2,
    };
    Ok((start..start + clip_len).collect())
}
