use omoq_autograd::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::recurrent::{self, RecurrentSpec};
use super::{add_linear, linear, param};
use crate::error::{Error, Result};

/// Recurrent stack scored from its final states through a small
/// feed-forward head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnFfSpec {
    pub rnn: RecurrentSpec,
    /// Applied to the final states before the head.
    pub dropout: f64,
    /// Hidden head sizes, each followed by layer norm and ReLU; a sigmoid
    /// unit follows the last.
    pub head: Vec<usize>,
}

impl RnnFfSpec {
    pub fn new(rnn: RecurrentSpec) -> Self {
        RnnFfSpec {
            rnn,
            dropout: 0.1,
            head: vec![256, 128],
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
    spec: &RnnFfSpec,
    store: &mut ParamStore<T>,
    rng: &mut R,
) {
    recurrent::register(&spec.rnn, "rnn", store, rng);
    let mut fan_in = spec.rnn.output_dim();
    for (i, &out) in spec.head.iter().enumerate() {
        add_linear(store, rng, &format!("ff{i}"), fan_in, out);
        store.insert(format!("ln{i}.gamma"), Tensor::full(vec![out], T::one()));
        store.insert(format!("ln{i}.beta"), Tensor::zeros(vec![out]));
        fan_in = out;
    }
    add_linear(store, rng, "out", fan_in, 1);
}

pub(crate) fn forward<T: Scalar, R: Rng + ?Sized>(
    spec: &RnnFfSpec,
    store: &ParamStore<T>,
    g: &mut Graph<T>,
    x: Var,
    lens: &[usize],
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let stack = recurrent::forward(&spec.rnn, "rnn", store, g, x, lens, 0.0, train, rng)?;
    let mut h = g.dropout(stack.finals, spec.dropout, train, rng)?;
    for i in 0..spec.head.len() {
        h = linear(g, store, &format!("ff{i}"), h)?;
        let gamma = param(g, store, &format!("ln{i}.gamma"))?;
        let beta = param(g, store, &format!("ln{i}.beta"))?;
        h = g.layer_norm(h, gamma, beta)?;
        h = g.relu(h);
    }
    let out = linear(g, store, "out", h)?;
    Ok(g.sigmoid(out))
}
