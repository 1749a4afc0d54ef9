//! The three estimator families: a convolutional network over fixed-width
//! feature panes, a recurrent network scored from its final frame, and a
//! recurrent network scored per frame and collapsed to one value.

pub mod checkpoint;
pub mod cnn;
pub mod ff;
pub mod ft;
pub mod recurrent;

use omoq_autograd::{BatchNormState, Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMatrix};

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use cnn::{CnnSpec, PaneLayout};
pub use ff::RnnFfSpec;
pub use ft::{Collapse, RnnFtSpec};
pub use recurrent::{Cell, RecurrentSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    Cnn(CnnSpec),
    RnnFf(RnnFfSpec),
    RnnFt(RnnFtSpec),
}

/// Named presets accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Cnn,
    LstmFf,
    BlstmFf,
    GruFf,
    BgruFf,
    GruFt,
    BgruFt,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Cnn,
        Family::LstmFf,
        Family::BlstmFf,
        Family::GruFf,
        Family::BgruFf,
        Family::GruFt,
        Family::BgruFt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Cnn => "cnn",
            Family::LstmFf => "lstm-ff",
            Family::BlstmFf => "blstm-ff",
            Family::GruFf => "gru-ff",
            Family::BgruFf => "bgru-ff",
            Family::GruFt => "gru-ft",
            Family::BgruFt => "bgru-ft",
        }
    }

    pub fn is_cnn(self) -> bool {
        self == Family::Cnn
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Family::ALL.iter().map(|f| f.name()).collect();
                Error::InvalidArgument(format!("unknown model '{s}' (expected {})", names.join("|")))
            })
    }
}

impl ModelSpec {
    /// Full-size architecture for a feature kind. `pane_width` is the CNN
    /// time width (the dataset's minimum frame count).
    pub fn preset(
        family: Family,
        kind: FeatureKind,
        feature_dim: usize,
        pane_width: usize,
        two_channel: bool,
    ) -> Result<Self> {
        let rnn = |cell: Cell, directions: usize| {
            let hidden = if kind.is_spectral() { 512 } else { directions * feature_dim };
            RecurrentSpec {
                cell,
                directions,
                layers: 2,
                input_dim: feature_dim,
                hidden,
            }
        };
        let spec = match family {
            Family::Cnn => ModelSpec::Cnn(CnnSpec::standard(if two_channel {
                PaneLayout::per_block(kind, feature_dim, pane_width)
            } else {
                PaneLayout::stacked(feature_dim, pane_width)
            })),
            Family::LstmFf => ModelSpec::RnnFf(RnnFfSpec::new(rnn(Cell::Lstm, 1))),
            Family::BlstmFf => ModelSpec::RnnFf(RnnFfSpec::new(rnn(Cell::Lstm, 2))),
            Family::GruFf => ModelSpec::RnnFf(RnnFfSpec::new(rnn(Cell::Gru, 1))),
            Family::BgruFf => ModelSpec::RnnFf(RnnFfSpec::new(rnn(Cell::Gru, 2))),
            Family::GruFt => ModelSpec::RnnFt(RnnFtSpec::new(feature_dim, 1)),
            Family::BgruFt => ModelSpec::RnnFt(RnnFtSpec::new(feature_dim, 2)),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same topology as [`ModelSpec::preset`] at a few units per layer, for
    /// finite-difference checks. CNN toys take 16x16 panes.
    pub fn toy(family: Family, input_dim: usize) -> Self {
        let rnn = |cell: Cell, directions: usize| RecurrentSpec {
            cell,
            directions,
            layers: 2,
            input_dim,
            hidden: 3,
        };
        let ff = |cell, directions| {
            ModelSpec::RnnFf(RnnFfSpec {
                rnn: rnn(cell, directions),
                dropout: 0.1,
                head: vec![5, 4],
            })
        };
        let ft = |directions| {
            ModelSpec::RnnFt(RnnFtSpec {
                rnn: rnn(Cell::Gru, directions),
                dropout: 0.1,
                collapse: Collapse::Mean,
            })
        };
        match family {
            Family::Cnn => ModelSpec::Cnn(CnnSpec {
                layout: PaneLayout::stacked(16, 16),
                conv_channels: vec![3, 4, 3, 2],
                kernels: vec![3, 2, 2, 2],
                pool_after: vec![true, true, false, false],
                fc: vec![6, 6, 6],
                residual: vec![false, true, true],
                dropout: 0.1,
            }),
            Family::LstmFf => ff(Cell::Lstm, 1),
            Family::BlstmFf => ff(Cell::Lstm, 2),
            Family::GruFf => ff(Cell::Gru, 1),
            Family::BgruFf => ff(Cell::Gru, 2),
            Family::GruFt => ft(1),
            Family::BgruFt => ft(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Cnn(s) => s.validate(),
            ModelSpec::RnnFf(s) => s.validate(),
            ModelSpec::RnnFt(s) => s.validate(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelSpec::Cnn(s) => s.layout.feature_dim(),
            ModelSpec::RnnFf(s) => s.rnn.input_dim,
            ModelSpec::RnnFt(s) => s.rnn.input_dim,
        }
    }

    pub fn is_frame_target(&self) -> bool {
        matches!(self, ModelSpec::RnnFt(_))
    }
}

/// Model inputs. CNN batches are `[B, C, H, W]` panes; recurrent batches are
/// zero-padded `[B, L, D]` sequences with the true length of each row.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub lens: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn size(&self) -> usize {
        self.lens.len()
    }

    /// Pad variable-length sequences to the longest one.
    pub fn sequences(feats: &[&FeatureMatrix]) -> Result<Self> {
        let dim = feats
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?
            .dim;
        let max_len = feats.iter().map(|f| f.frames).max().unwrap_or(0);
        let mut data = vec![T::zero(); feats.len() * max_len * dim];
        for (b, f) in feats.iter().enumerate() {
            if f.dim != dim {
                return Err(Error::Shape(format!("batch mixes feature dims {dim} and {}", f.dim)));
            }
            let dst = &mut data[b * max_len * dim..][..f.frames * dim];
            for (d, &s) in dst.iter_mut().zip(&f.data) {
                *d = T::from_f64_lossy(s as f64);
            }
        }
        Ok(Batch {
            x: Tensor::new(vec![feats.len(), max_len, dim], data)?,
            lens: feats.iter().map(|f| f.frames).collect(),
        })
    }

    /// Panes built from `(features, start frame)` windows of `layout.width`
    /// frames each.
    pub fn panes(windows: &[(&FeatureMatrix, usize)], layout: &PaneLayout) -> Result<Self> {
        let (c, h, w) = (layout.channels, layout.height, layout.width);
        let mut data = vec![T::zero(); windows.len() * c * h * w];
        for (b, &(f, start)) in windows.iter().enumerate() {
            if f.dim != layout.feature_dim() {
                return Err(Error::Shape(format!(
                    "pane expects feature dim {}, got {}",
                    layout.feature_dim(),
                    f.dim
                )));
            }
            if start + w > f.frames {
                return Err(Error::Shape(format!(
                    "window {start}..{} exceeds {} frames",
                    start + w,
                    f.frames
                )));
            }
            let pane = &mut data[b * c * h * w..][..c * h * w];
            for t in 0..w {
                let row = f.row(start + t);
                for (j, &v) in row.iter().enumerate() {
                    let (ch, y) = (j / h, j % h);
                    pane[(ch * h + y) * w + t] = T::from_f64_lossy(v as f64);
                }
            }
        }
        Ok(Batch {
            x: Tensor::new(vec![windows.len(), c, h, w], data)?,
            lens: vec![w; windows.len()],
        })
    }
}

/// Forward result: one score per clip (`[B, 1]`) or one per frame
/// (`[B, L]`, valid up to each clip's length).
#[derive(Debug, Clone, Copy)]
pub enum Output {
    Clip(Var),
    Frames(Var),
}

impl Output {
    pub fn var(self) -> Var {
        match self {
            Output::Clip(v) | Output::Frames(v) => v,
        }
    }
}

pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
    /// Batch-norm running statistics, one per convolution (CNN only).
    pub bn: Vec<BatchNormState<T>>,
}

pub(crate) fn uniform_init<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: Vec<usize>,
    bound: f64,
) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

/// `[in, out]` weight and `[out]` bias, both uniform in `±1/sqrt(in)`.
pub(crate) fn add_linear<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{name}.weight"), uniform_init(rng, vec![fan_in, fan_out], bound));
    store.insert(format!("{name}.bias"), uniform_init(rng, vec![fan_out], bound));
}

pub(crate) fn param<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
    let id = store
        .id_of(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
    Ok(g.param(store, id))
}

pub(crate) fn linear<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
) -> Result<Var> {
    let w = param(g, store, &format!("{name}.weight"))?;
    let b = param(g, store, &format!("{name}.bias"))?;
    Ok(g.linear(x, w, b)?)
}

impl<T: Scalar> Model<T> {
    pub fn init<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let bn = match &spec {
            ModelSpec::Cnn(s) => cnn::register(s, &mut params, rng),
            ModelSpec::RnnFf(s) => {
                ff::register(s, &mut params, rng);
                Vec::new()
            }
            ModelSpec::RnnFt(s) => {
                ft::register(s, &mut params, rng);
                Vec::new()
            }
        };
        Ok(Model { spec, params, bn })
    }

    /// Record a forward pass. `train` enables dropout and batch statistics;
    /// `rng` drives dropout masks only.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        batch: &Batch<T>,
        train: bool,
        rng: &mut R,
    ) -> Result<Output> {
        if batch.x.shape().last() != Some(&self.expected_last_dim()) {
            return Err(Error::Shape(format!(
                "input {:?} does not match model (last dim {})",
                batch.x.shape(),
                self.expected_last_dim()
            )));
        }
        let x = g.constant(batch.x.clone());
        match &self.spec {
            ModelSpec::Cnn(s) => {
                cnn::forward(s, &self.params, &mut self.bn, g, x, train, rng).map(Output::Clip)
            }
            ModelSpec::RnnFf(s) => {
                ff::forward(s, &self.params, g, x, &batch.lens, train, rng).map(Output::Clip)
            }
            ModelSpec::RnnFt(s) => {
                ft::forward(s, &self.params, g, x, &batch.lens, train, rng).map(Output::Frames)
            }
        }
    }

    fn expected_last_dim(&self) -> usize {
        match &self.spec {
            ModelSpec::Cnn(s) => s.layout.width,
            _ => self.spec.input_dim(),
        }
    }

    /// Eval-mode clip scores in `(0, 1)`: the clip output, or the collapsed
    /// frame outputs over each clip's valid frames.
    pub fn predict(&mut self, batch: &Batch<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        // dropout is inactive in eval mode, so this stream is never drawn from
        let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let out = self.forward(&mut g, batch, false, &mut unused)?;
        let v = g.value(out.var());
        match (&self.spec, out) {
            (ModelSpec::RnnFt(s), Output::Frames(_)) => {
                let l = v.shape()[1];
                batch
                    .lens
                    .iter()
                    .enumerate()
                    .map(|(b, &len)| {
                        let frames: Vec<f64> =
                            v.data()[b * l..b * l + len].iter().map(|x| x.as_f64()).collect();
                        s.collapse.apply(&frames)
                    })
                    .collect()
            }
            _ => Ok(v.data().iter().map(|x| x.as_f64()).collect()),
        }
    }
}

/// Backprop loss against clip targets in `[0, 1]`: RMSE over clip scores,
/// or MSE over every valid frame (each frame targets its clip's value).
pub fn loss<T: Scalar>(g: &mut Graph<T>, out: Output, targets: &[f64], lens: &[usize]) -> Result<Var> {
    let shape = g.shape(out.var()).to_vec();
    if shape[0] != targets.len() || lens.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} targets and {} lengths for batch of {}",
            targets.len(),
            lens.len(),
            shape[0]
        )));
    }
    match out {
        Output::Clip(v) => {
            let t = g.constant(Tensor::from_fn(shape, |i| T::from_f64_lossy(targets[i])));
            Ok(g.rmse_loss(v, t)?)
        }
        Output::Frames(v) => {
            let steps = shape[1];
            let t = g.constant(Tensor::from_fn(shape, |i| T::from_f64_lossy(targets[i / steps])));
            let w = ft::frame_mask::<T>(lens, steps);
            Ok(g.weighted_mse_loss(v, t, &w)?)
        }
    }
}
