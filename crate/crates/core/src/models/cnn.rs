use omoq_autograd::{BatchNormState, Conv2dOptions, Graph, ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{add_linear, linear, param, uniform_init};
use crate::error::{Error, Result};
use crate::features::FeatureKind;

/// How a `frames x D_F` window becomes a `[C, H, W]` pane: the feature axis
/// is split into `channels` blocks of `height` rows, time runs along `width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaneLayout {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl PaneLayout {
    pub fn stacked(feature_dim: usize, width: usize) -> Self {
        PaneLayout {
            channels: 1,
            height: feature_dim,
            width,
        }
    }

    /// One channel per stacked block (e.g. MFCC and deltas side by side).
    pub fn per_block(kind: FeatureKind, feature_dim: usize, width: usize) -> Self {
        let blocks = kind.blocks();
        PaneLayout {
            channels: blocks,
            height: feature_dim / blocks,
            width,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.channels * self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub layout: PaneLayout,
    pub conv_channels: Vec<usize>,
    pub kernels: Vec<usize>,
    /// 2x2 stride-2 max pooling after the convolution at the same index.
    pub pool_after: Vec<bool>,
    pub fc: Vec<usize>,
    /// Identity skip added before the activation of the FC layer at the
    /// same index.
    pub residual: Vec<bool>,
    pub dropout: f64,
}

impl CnnSpec {
    pub fn standard(layout: PaneLayout) -> Self {
        CnnSpec {
            layout,
            conv_channels: vec![16, 32, 64, 32],
            kernels: vec![5, 3, 3, 3],
            pool_after: vec![true, true, false, false],
            fc: vec![128, 128, 128],
            residual: vec![false, true, true],
            dropout: 0.1,
        }
    }

    /// Spatial size `(h, w)` after each convolution block.
    pub fn block_shapes(&self) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (self.layout.height, self.layout.width);
        let mut shapes = Vec::new();
        for (i, &k) in self.kernels.iter().enumerate() {
            if h < k || w < k {
                return Err(Error::InvalidArgument(format!(
                    "conv {} needs at least {k}x{k} input, has {h}x{w}; pane too small",
                    i + 1
                )));
            }
            h = h - k + 1;
            w = w - k + 1;
            if self.pool_after[i] {
                if h < 2 || w < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "pool after conv {} needs 2x2 input, has {h}x{w}",
                        i + 1
                    )));
                }
                h /= 2;
                w /= 2;
            }
            shapes.push((h, w));
        }
        Ok(shapes)
    }

    pub fn flat_dim(&self) -> Result<usize> {
        let (h, w) = *self.block_shapes()?.last().ok_or_else(|| {
            Error::InvalidArgument("CNN needs at least one convolution".into())
        })?;
        Ok(h * w * self.conv_channels.last().unwrap())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.conv_channels.len();
        if self.kernels.len() != n || self.pool_after.len() != n {
            return Err(Error::InvalidArgument("CNN conv lists differ in length".into()));
        }
        if self.fc.is_empty() || self.residual.len() != self.fc.len() {
            return Err(Error::InvalidArgument("CNN FC lists differ in length".into()));
        }
        for i in 0..self.fc.len() {
            let fan_in = if i == 0 { 0 } else { self.fc[i - 1] };
            if self.residual[i] && (i == 0 || fan_in != self.fc[i]) {
                return Err(Error::InvalidArgument(format!(
                    "residual FC {} needs equal input and output sizes",
                    i + 1
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {}", self.dropout)));
        }
        self.flat_dim().map(|_| ())
    }
}

pub(crate) fn register<T: Scalar, R: Rng + ?Sized>(
    spec: &CnnSpec,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Vec<BatchNormState<T>> {
    let mut in_ch = spec.layout.channels;
    let mut bn = Vec::new();
    for (i, (&out_ch, &k)) in spec.conv_channels.iter().zip(&spec.kernels).enumerate() {
        let fan_in = in_ch * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        store.insert(format!("conv{i}.weight"), uniform_init(rng, vec![out_ch, in_ch, k, k], bound));
        store.insert(format!("conv{i}.bias"), uniform_init(rng, vec![out_ch], bound));
        store.insert(format!("bn{i}.gamma"), omoq_autograd::Tensor::full(vec![out_ch], T::one()));
        store.insert(format!("bn{i}.beta"), omoq_autograd::Tensor::zeros(vec![out_ch]));
        bn.push(BatchNormState::new(out_ch));
        in_ch = out_ch;
    }
    let mut fan_in = spec.flat_dim().expect("validated");
    for (i, &out) in spec.fc.iter().enumerate() {
        add_linear(store, rng, &format!("fc{i}"), fan_in, out);
        fan_in = out;
    }
    add_linear(store, rng, "head", fan_in, 1);
    bn
}

/// conv -> batch norm -> ReLU -> (pool) per block, flatten, dropout, FC
/// stack with residual skips, sigmoid head. Returns `[B, 1]`.
pub(crate) fn forward<T: Scalar, R: Rng + ?Sized>(
    spec: &CnnSpec,
    store: &ParamStore<T>,
    bn: &mut [BatchNormState<T>],
    g: &mut Graph<T>,
    x: Var,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let l = spec.layout;
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[1..] != [l.channels, l.height, l.width] {
        return Err(Error::Shape(format!(
            "CNN expects [B, {}, {}, {}] panes, got {shape:?}",
            l.channels, l.height, l.width
        )));
    }
    let batch = shape[0];
    let mut h = x;
    for i in 0..spec.conv_channels.len() {
        let w = param(g, store, &format!("conv{i}.weight"))?;
        let b = param(g, store, &format!("conv{i}.bias"))?;
        h = g.conv2d(h, w, Some(b), Conv2dOptions::default())?;
        let gamma = param(g, store, &format!("bn{i}.gamma"))?;
        let beta = param(g, store, &format!("bn{i}.beta"))?;
        h = g.batch_norm(h, gamma, beta, &mut bn[i], train)?;
        h = g.relu(h);
        if spec.pool_after[i] {
            h = g.maxpool2d(h, 2, 2)?;
        }
    }
    let flat = g.shape(h)[1..].iter().product();
    h = g.reshape(h, vec![batch, flat])?;
    h = g.dropout(h, spec.dropout, train, rng)?;
    for i in 0..spec.fc.len() {
        let mut y = linear(g, store, &format!("fc{i}"), h)?;
        if spec.residual[i] {
            y = g.add(y, h)?;
        }
        h = g.relu(y);
    }
    let out = linear(g, store, "head", h)?;
    Ok(g.sigmoid(out))
}
