//! Central finite-difference verification of parameter gradients in f64.

use rand::{Rng, SeedableRng};

use crate::error::Error;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor: gradients below this magnitude are compared on an
/// absolute scale, where finite-difference noise would otherwise dominate.
pub const DEFAULT_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub probes: Vec<Probe>,
}

impl Report {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare the analytic gradient of a scalar loss with central differences
/// at `probes` randomly chosen parameter elements (every parameter tensor is
/// visited before any is probed twice).
///
/// `build` records the loss on a fresh graph from the current state;
/// `params` exposes the state's parameter store.
pub fn check<S, P, F, E>(
    state: &mut S,
    params: P,
    probes: usize,
    seed: u64,
    mut build: F,
) -> std::result::Result<Report, E>
where
    P: Fn(&mut S) -> &mut ParamStore<f64>,
    F: FnMut(&mut S, &mut Graph<f64>) -> std::result::Result<Var, E>,
    E: From<Error>,
{
    let mut g = Graph::new();
    let l = build(state, &mut g)?;
    let grads = g.backward(l)?;

    let mut loss_at = |state: &mut S| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let l = build(state, &mut g)?;
        Ok(g.value(l)
            .item()
            .ok_or_else(|| Error::NonScalarLoss(g.shape(l).to_vec()))?)
    };

    let ids: Vec<ParamId> = params(state).ids().collect();
    if ids.is_empty() {
        return Err(Error::InvalidArgument("no parameters to check".into()).into());
    }
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(probes);
    for k in 0..probes {
        let id = if k < ids.len() {
            ids[k]
        } else {
            ids[rng.random_range(0..ids.len())]
        };
        let numel = params(state).get(id).numel();
        let index = rng.random_range(0..numel);
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[index]);
        let orig = params(state).get(id).data()[index];
        params(state).get_mut(id).data_mut()[index] = orig + DEFAULT_STEP;
        let plus = loss_at(state)?;
        params(state).get_mut(id).data_mut()[index] = orig - DEFAULT_STEP;
        let minus = loss_at(state)?;
        params(state).get_mut(id).data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
        out.push(Probe {
            param: params(state).name(id).to_string(),
            index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric, DEFAULT_FLOOR),
        });
    }
    Ok(Report { probes: out })
}
