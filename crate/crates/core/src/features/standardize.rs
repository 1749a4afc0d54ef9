use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standardization {
    #[default]
    None,
    Overall,
    PerBin,
}

impl std::str::FromStr for Standardization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Standardization::None),
            "overall" => Ok(Standardization::Overall),
            "per_bin" => Ok(Standardization::PerBin),
            _ => Err(Error::InvalidArgument(format!(
                "unknown standardization '{s}' (expected none|overall|per_bin)"
            ))),
        }
    }
}

impl std::fmt::Display for Standardization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Standardization::None => "none",
            Standardization::Overall => "overall",
            Standardization::PerBin => "per_bin",
        })
    }
}

/// Mean and (population) standard deviation, one entry for `overall`,
/// one per feature dimension for `per_bin`, empty for `none`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mode: Standardization,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationStats {
    pub fn identity() -> Self {
        StandardizationStats {
            mode: Standardization::None,
            mean: Vec::new(),
            std: Vec::new(),
        }
    }

    /// Fit on the given matrices, which should be the training split only.
    pub fn fit<'a>(
        mode: Standardization,
        feats: impl IntoIterator<Item = &'a FeatureMatrix> + Clone,
    ) -> Result<Self> {
        if mode == Standardization::None {
            return Ok(Self::identity());
        }
        let dim = feats
            .clone()
            .into_iter()
            .next()
            .ok_or_else(|| Error::InvalidArgument("no features to fit standardization".into()))?
            .dim;
        let groups = if mode == Standardization::Overall { 1 } else { dim };
        let group = |j: usize| if groups == 1 { 0 } else { j };
        let mut sum = vec![0.0f64; groups];
        let mut count = vec![0usize; groups];
        for f in feats.clone() {
            if f.dim != dim {
                return Err(Error::Shape(format!(
                    "feature dim {} differs from {dim}",
                    f.dim
                )));
            }
            for row in f.data.chunks_exact(dim) {
                for (j, &v) in row.iter().enumerate() {
                    sum[group(j)] += v as f64;
                    count[group(j)] += 1;
                }
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
        let mut sq = vec![0.0f64; groups];
        for f in feats {
            for row in f.data.chunks_exact(dim) {
                for (j, &v) in row.iter().enumerate() {
                    let d = v as f64 - mean[group(j)];
                    sq[group(j)] += d * d;
                }
            }
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(s, &c)| (s / c as f64).sqrt())
            .collect();
        Ok(StandardizationStats { mode, mean, std })
    }

    pub fn apply(&self, feat: &mut FeatureMatrix) -> Result<()> {
        match self.mode {
            Standardization::None => Ok(()),
            Standardization::Overall | Standardization::PerBin => {
                let groups = self.mean.len();
                let expected = if self.mode == Standardization::Overall { 1 } else { feat.dim };
                if groups != expected || self.std.len() != groups {
                    return Err(Error::Shape(format!(
                        "{} stats have {groups} entries, features need {expected}",
                        self.mode
                    )));
                }
                for row in feat.data.chunks_exact_mut(feat.dim) {
                    for (j, v) in row.iter_mut().enumerate() {
                        let g = if groups == 1 { 0 } else { j };
                        *v = ((*v as f64 - self.mean[g]) / self.std[g].max(STD_FLOOR)) as f32;
                    }
                }
                Ok(())
            }
        }
    }
}
