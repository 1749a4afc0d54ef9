//! Choosing which frames of a clip a model sees.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentPolicy {
    /// One window of the dataset's minimum length at a random start.
    TruncateRandom,
    /// Every frame.
    Full,
    /// Tile the clip's frames up to the dataset's maximum length.
    RepeatToMax,
}

impl std::str::FromStr for SegmentPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truncate_random" => Ok(SegmentPolicy::TruncateRandom),
            "full" => Ok(SegmentPolicy::Full),
            "repeat_to_max" => Ok(SegmentPolicy::RepeatToMax),
            _ => Err(Error::InvalidArgument(format!(
                "unknown segment policy '{s}' (expected truncate_random|full|repeat_to_max)"
            ))),
        }
    }
}

impl std::fmt::Display for SegmentPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SegmentPolicy::TruncateRandom => "truncate_random",
            SegmentPolicy::Full => "full",
            SegmentPolicy::RepeatToMax => "repeat_to_max",
        })
    }
}

fn check_len(frames: usize, window: usize) -> Result<()> {
    if frames < window || window == 0 {
        return Err(Error::InvalidArgument(format!(
            "clip has {frames} frames, shorter than the {window}-frame window"
        )));
    }
    Ok(())
}

/// Start uniform over `0..=frames - window`.
pub fn random_start<R: Rng + ?Sized>(frames: usize, window: usize, rng: &mut R) -> Result<usize> {
    check_len(frames, window)?;
    Ok(rng.random_range(0..=frames - window))
}

/// `count` evenly spaced starts, `floor(i (frames - window) / (count - 1))`.
pub fn eval_starts(frames: usize, window: usize, count: usize) -> Result<Vec<usize>> {
    check_len(frames, window)?;
    if count == 0 {
        return Err(Error::InvalidArgument("segment count must be positive".into()));
    }
    if count == 1 {
        return Ok(vec![0]);
    }
    let span = frames - window;
    Ok((0..count).map(|i| i * span / (count - 1)).collect())
}

/// Frame indices tiling `0..frames` up to `target` frames.
pub fn repeat_indices(frames: usize, target: usize) -> Vec<usize> {
    (0..target).map(|i| i % frames).collect()
}

pub fn window(feat: &FeatureMatrix, start: usize, len: usize) -> Result<FeatureMatrix> {
    check_len(feat.frames.saturating_sub(start), len)?;
    FeatureMatrix::new(
        feat.kind,
        len,
        feat.dim,
        feat.data[start * feat.dim..(start + len) * feat.dim].to_vec(),
    )
}

pub fn tile(feat: &FeatureMatrix, target: usize) -> Result<FeatureMatrix> {
    let mut data = Vec::with_capacity(target * feat.dim);
    for t in repeat_indices(feat.frames, target) {
        data.extend_from_slice(feat.row(t));
    }
    FeatureMatrix::new(feat.kind, target, feat.dim, data)
}
