//! Whole-model finite-difference checks at toy sizes, in training mode
//! (dropout and batch statistics active). Shared by the model tests and the
//! acceptance suite.
#![allow(dead_code)]

use omoq::features::{FeatureKind, FeatureMatrix};
use omoq::models::{self, Batch, Family, Model, ModelSpec};
use omoq_autograd::gradcheck::{self, Report};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_REL: f64 = 1e-4;
pub const PROBES: usize = 40;

fn feats(rng: &mut ChaCha8Rng, lens: &[usize], dim: usize) -> Vec<FeatureMatrix> {
    lens.iter()
        .map(|&l| {
            let data = (0..l * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            FeatureMatrix::new(FeatureKind::Mfcc, l, dim, data).unwrap()
        })
        .collect()
}

pub fn run(family: Family) -> omoq::Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (spec, batch) = if family.is_cnn() {
        let spec = ModelSpec::toy(family, 16);
        let f = feats(&mut rng, &[16, 18, 16], 16);
        let windows: Vec<_> = f.iter().zip([0, 2, 0]).collect();
        let ModelSpec::Cnn(c) = &spec else { unreachable!() };
        (spec.clone(), Batch::<f64>::panes(&windows, &c.layout)?)
    } else {
        let spec = ModelSpec::toy(family, 4);
        let f = feats(&mut rng, &[5, 3, 4], 4);
        let refs: Vec<_> = f.iter().collect();
        (spec, Batch::<f64>::sequences(&refs)?)
    };
    let targets = [0.2, 0.7, 0.45];
    let mut model = Model::<f64>::init(spec, &mut rng)?;
    gradcheck::check::<_, _, _, omoq::Error>(&mut model, |m| &mut m.params, PROBES, 3, |m, g| {
        // same dropout masks on every evaluation
        let mut drop_rng = ChaCha8Rng::seed_from_u64(5);
        let out = m.forward(g, &batch, true, &mut drop_rng)?;
        models::loss(g, out, &targets, &batch.lens)
    })
}

/// `Err` describes the first violated condition.
pub fn verdict(family: Family, report: &Report) -> Result<(), String> {
    if report.probes.len() < 10 {
        return Err(format!("{family}: only {} probes", report.probes.len()));
    }
    let live = report.probes.iter().filter(|p| p.numeric.abs() > 1e-6).count();
    if live * 2 < report.probes.len() {
        return Err(format!("{family}: only {live} nonzero gradients probed"));
    }
    if report.max_rel_err() >= MAX_REL {
        let w = report.worst().unwrap();
        return Err(format!(
            "{family}: {} [{}] analytic {} numeric {} rel {}",
            w.param, w.index, w.analytic, w.numeric, w.rel_err
        ));
    }
    Ok(())
}
