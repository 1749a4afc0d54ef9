//! Stacked, optionally bidirectional GRU/LSTM over zero-padded batches.
//!
//! Padded steps (t >= length of a row) leave that row's state untouched, so
//! the forward direction ends on the last valid frame and the backward
//! direction starts from a zero state at the last valid frame, exactly as an
//! unpadded run would.

use omoq_autograd::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{param, uniform_init};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Gru,
    Lstm,
}

impl Cell {
    fn gates(self) -> usize {
        match self {
            Cell::Gru => 3,
            Cell::Lstm => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentSpec {
    pub cell: Cell,
    pub directions: usize,
    pub layers: usize,
    pub input_dim: usize,
    /// Hidden size per direction.
    pub hidden: usize,
}

impl RecurrentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.directions) {
            return Err(Error::InvalidArgument(format!(
                "directions must be 1 or 2, got {}",
                self.directions
            )));
        }
        if self.layers == 0 || self.hidden == 0 || self.input_dim == 0 {
            return Err(Error::InvalidArgument(
                "recurrent layers, hidden size and input dim must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.directions * self.hidden
    }
}

fn dir_name(d: usize) -> &'static str {
    if d == 0 {
        "fwd"
    } else {
        "bwd"
    }
}

pub(crate) fn register<T: Scalar, R: Rng + ?Sized>(
    spec: &RecurrentSpec,
    prefix: &str,
    store: &mut ParamStore<T>,
    rng: &mut R,
) {
    let gh = spec.cell.gates() * spec.hidden;
    let bound = 1.0 / (spec.hidden as f64).sqrt();
    for l in 0..spec.layers {
        let d_in = if l == 0 { spec.input_dim } else { spec.output_dim() };
        for d in 0..spec.directions {
            let p = format!("{prefix}.l{l}.{}", dir_name(d));
            store.insert(format!("{p}.w_ih"), uniform_init(rng, vec![d_in, gh], bound));
            store.insert(format!("{p}.w_hh"), uniform_init(rng, vec![spec.hidden, gh], bound));
            store.insert(format!("{p}.b_ih"), uniform_init(rng, vec![gh], bound));
            store.insert(format!("{p}.b_hh"), uniform_init(rng, vec![gh], bound));
        }
    }
}

pub(crate) struct StackOutput {
    /// Per-frame top-layer outputs, `[B, L, directions * hidden]`.
    pub frames: Var,
    /// Top-layer final states (forward after the last valid frame, backward
    /// after frame 0), `[B, directions * hidden]`.
    pub finals: Var,
}

struct DirParams {
    w_hh: Var,
    b_hh: Var,
}

/// One GRU step in the `[r, z, n]` gate layout:
/// `r = s(xr + hr)`, `z = s(xz + hz)`, `n = tanh(xn + r * hn)`,
/// `h' = n + z * (h - n)`.
fn gru_step<T: Scalar>(
    g: &mut Graph<T>,
    p: &DirParams,
    gx: Var,
    h: Var,
    hidden: usize,
) -> Result<Var> {
    let gh = g.matmul(h, p.w_hh)?;
    let gh = g.add_bias(gh, p.b_hh)?;
    let part = |g: &mut Graph<T>, v: Var, i: usize| g.slice(v, 1, i * hidden, hidden);
    let (xr, xz, xn) = (part(g, gx, 0)?, part(g, gx, 1)?, part(g, gx, 2)?);
    let (hr, hz, hn) = (part(g, gh, 0)?, part(g, gh, 1)?, part(g, gh, 2)?);
    let r = g.add(xr, hr)?;
    let r = g.sigmoid(r);
    let z = g.add(xz, hz)?;
    let z = g.sigmoid(z);
    let rn = g.mul(r, hn)?;
    let n = g.add(xn, rn)?;
    let n = g.tanh(n);
    let diff = g.sub(h, n)?;
    let zd = g.mul(z, diff)?;
    Ok(g.add(n, zd)?)
}

/// One LSTM step in the `[i, f, g, o]` gate layout:
/// `c' = f * c + i * g`, `h' = o * tanh(c')`.
fn lstm_step<T: Scalar>(
    g: &mut Graph<T>,
    p: &DirParams,
    gx: Var,
    h: Var,
    c: Var,
    hidden: usize,
) -> Result<(Var, Var)> {
    let gh = g.matmul(h, p.w_hh)?;
    let gh = g.add_bias(gh, p.b_hh)?;
    let pre = g.add(gx, gh)?;
    let part = |g: &mut Graph<T>, i: usize| g.slice(pre, 1, i * hidden, hidden);
    let (i, f, cand, o) = (part(g, 0)?, part(g, 1)?, part(g, 2)?, part(g, 3)?);
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let fc = g.mul(f, c)?;
    let ic = g.mul(i, cand)?;
    let c_new = g.add(fc, ic)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Run the stack. `between_layers_dropout` is applied to every layer's
/// output except the last (train mode only).
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward<T: Scalar, R: Rng + ?Sized>(
    spec: &RecurrentSpec,
    prefix: &str,
    store: &ParamStore<T>,
    g: &mut Graph<T>,
    x: Var,
    lens: &[usize],
    between_layers_dropout: f64,
    train: bool,
    rng: &mut R,
) -> Result<StackOutput> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != spec.input_dim {
        return Err(Error::Shape(format!(
            "recurrent input must be [B, L, {}], got {shape:?}",
            spec.input_dim
        )));
    }
    let (batch, steps) = (shape[0], shape[1]);
    if lens.len() != batch || lens.iter().any(|&n| n == 0 || n > steps) {
        return Err(Error::Shape(format!(
            "lengths {lens:?} invalid for batch of {batch} x {steps} frames"
        )));
    }
    let h_dim = spec.hidden;
    let gh = spec.cell.gates() * h_dim;
    let masks: Vec<Option<Vec<bool>>> = (0..steps)
        .map(|t| {
            let m: Vec<bool> = lens.iter().map(|&n| t < n).collect();
            if m.iter().all(|&v| v) {
                None
            } else {
                Some(m)
            }
        })
        .collect();

    let mut input = x;
    let mut finals = Vec::new();
    for l in 0..spec.layers {
        let d_in = g.shape(input)[2];
        let flat = g.reshape(input, vec![batch * steps, d_in])?;
        let mut dir_frames = Vec::new();
        finals.clear();
        for d in 0..spec.directions {
            let p = format!("{prefix}.l{l}.{}", dir_name(d));
            let w_ih = param(g, store, &format!("{p}.w_ih"))?;
            let b_ih = param(g, store, &format!("{p}.b_ih"))?;
            let dp = DirParams {
                w_hh: param(g, store, &format!("{p}.w_hh"))?,
                b_hh: param(g, store, &format!("{p}.b_hh"))?,
            };
            let gx_all = g.linear(flat, w_ih, b_ih)?;
            let gx_all = g.reshape(gx_all, vec![batch, steps, gh])?;
            let zeros = g.constant(Tensor::zeros(vec![batch, h_dim]));
            let (mut h, mut c) = (zeros, zeros);
            let mut outs = vec![None; steps];
            let order: Vec<usize> = if d == 0 {
                (0..steps).collect()
            } else {
                (0..steps).rev().collect()
            };
            for t in order {
                let gx = g.slice(gx_all, 1, t, 1)?;
                let gx = g.reshape(gx, vec![batch, gh])?;
                let (h_new, c_new) = match spec.cell {
                    Cell::Gru => (gru_step(g, &dp, gx, h, h_dim)?, c),
                    Cell::Lstm => lstm_step(g, &dp, gx, h, c, h_dim)?,
                };
                match &masks[t] {
                    None => {
                        h = h_new;
                        c = c_new;
                    }
                    Some(m) => {
                        h = g.select_rows(m, h_new, h)?;
                        if spec.cell == Cell::Lstm {
                            c = g.select_rows(m, c_new, c)?;
                        }
                    }
                }
                outs[t] = Some(g.reshape(h, vec![batch, 1, h_dim])?);
            }
            let outs: Vec<Var> = outs.into_iter().map(|o| o.expect("every step ran")).collect();
            dir_frames.push(g.concat(&outs, 1)?);
            finals.push(h);
        }
        let mut layer_out = if dir_frames.len() == 1 {
            dir_frames[0]
        } else {
            g.concat(&dir_frames, 2)?
        };
        if l + 1 < spec.layers {
            layer_out = g.dropout(layer_out, between_layers_dropout, train, rng)?;
        }
        input = layer_out;
    }
    let finals = if finals.len() == 1 {
        finals[0]
    } else {
        g.concat(&finals, 1)?
    };
    Ok(StackOutput {
        frames: input,
        finals,
    })
}
