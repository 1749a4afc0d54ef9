use omoq_autograd::{Graph, ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::recurrent::{self, Cell, RecurrentSpec};
use super::{add_linear, linear};
use crate::error::{Error, Result};

/// Reduction of per-frame scores to one clip score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collapse {
    #[default]
    Mean,
    Median,
    Min,
    Max,
}

impl Collapse {
    pub fn apply(self, frames: &[f64]) -> Result<f64> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("collapse over zero frames".into()));
        }
        Ok(match self {
            Collapse::Mean => frames.iter().sum::<f64>() / frames.len() as f64,
            Collapse::Min => frames.iter().copied().fold(f64::INFINITY, f64::min),
            Collapse::Max => frames.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Collapse::Median => {
                let mut s = frames.to_vec();
                s.sort_by(f64::total_cmp);
                let m = s.len() / 2;
                if s.len() % 2 == 1 {
                    s[m]
                } else {
                    0.5 * (s[m - 1] + s[m])
                }
            }
        })
    }
}

impl std::str::FromStr for Collapse {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Collapse::Mean),
            "median" => Ok(Collapse::Median),
            "min" => Ok(Collapse::Min),
            "max" => Ok(Collapse::Max),
            _ => Err(Error::InvalidArgument(format!(
                "unknown collapse '{s}' (expected mean|median|min|max)"
            ))),
        }
    }
}

/// Recurrent stack with a sigmoid unit applied to every frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnFtSpec {
    pub rnn: RecurrentSpec,
    /// Applied between recurrent layers.
    pub dropout: f64,
    pub collapse: Collapse,
}

impl RnnFtSpec {
    pub fn new(input_dim: usize, directions: usize) -> Self {
        RnnFtSpec {
            rnn: RecurrentSpec {
                cell: Cell::Gru,
                directions,
                layers: 2,
                input_dim,
                hidden: 256,
            },
            dropout: 0.1,
            collapse: Collapse::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rnn.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {}", self.dropout)));
        }
        Ok(())
    }
}

pub(crate) fn register<T: Scalar, R: Rng + ?Sized>(
    spec: &RnnFtSpec,
    store: &mut ParamStore<T>,
    rng: &mut R,
) {
    recurrent::register(&spec.rnn, "rnn", store, rng);
    add_linear(store, rng, "frame", spec.rnn.output_dim(), 1);
}

/// Per-frame scores `[B, L]`; entries past a row's length are padding.
pub(crate) fn forward<T: Scalar, R: Rng + ?Sized>(
    spec: &RnnFtSpec,
    store: &ParamStore<T>,
    g: &mut Graph<T>,
    x: Var,
    lens: &[usize],
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let stack =
        recurrent::forward(&spec.rnn, "rnn", store, g, x, lens, spec.dropout, train, rng)?;
    let shape = g.shape(stack.frames).to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(stack.frames, vec![b * l, d])?;
    let y = linear(g, store, "frame", flat)?;
    let y = g.sigmoid(y);
    Ok(g.reshape(y, vec![b, l])?)
}

/// 0/1 weights selecting each row's valid frames of a `[B, L]` output.
pub fn frame_mask<T: Scalar>(lens: &[usize], steps: usize) -> Vec<T> {
    lens.iter()
        .flat_map(|&n| (0..steps).map(move |t| if t < n { T::one() } else { T::zero() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_modes() {
        let f = [0.2, 0.4, 0.9];
        let got: Vec<f64> = [Collapse::Mean, Collapse::Median, Collapse::Min, Collapse::Max]
            .iter()
            .map(|c| c.apply(&f).unwrap())
            .collect();
        let want = [0.5, 0.4, 0.2, 0.9];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
        for c in [Collapse::Mean, Collapse::Median, Collapse::Min, Collapse::Max] {
            assert!((c.apply(&[0.3; 5]).unwrap() - 0.3).abs() < 1e-15);
        }
        assert!(Collapse::Mean.apply(&[]).is_err());
    }
}
