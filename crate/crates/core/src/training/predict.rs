//! Eval-mode scoring of whole clips, shared by per-epoch evaluation and
//! inference from a checkpoint.

use std::path::Path;

use omoq_autograd::Scalar;

use super::manifest::rescale_omos;
use super::segments::{self, SegmentPolicy};
use crate::audio::load_clip;
use crate::error::{Error, Result};
use crate::features::{Extractor, FeatureMatrix};
use crate::models::{Batch, Checkpoint, Model, ModelSpec};

/// How clips are windowed for evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ScoringPlan {
    pub policy: SegmentPolicy,
    pub min_frames: usize,
    pub max_frames: usize,
    pub eval_segments: usize,
    pub batch_size: usize,
}

/// The model inputs for one clip: one sequence, or several windows whose
/// scores are averaged.
fn clip_inputs(feat: &FeatureMatrix, plan: &ScoringPlan) -> Result<Vec<FeatureMatrix>> {
    match plan.policy {
        SegmentPolicy::Full => Ok(vec![feat.clone()]),
        SegmentPolicy::RepeatToMax => Ok(vec![segments::tile(feat, plan.max_frames.max(feat.frames))?]),
        SegmentPolicy::TruncateRandom => segments::eval_starts(feat.frames, plan.min_frames, plan.eval_segments)?
            .into_iter()
            .map(|s| segments::window(feat, s, plan.min_frames))
            .collect(),
    }
}

pub(crate) fn build_batch<T: Scalar>(spec: &ModelSpec, items: &[&FeatureMatrix]) -> Result<Batch<T>> {
    match spec {
        ModelSpec::Cnn(c) => {
            let windows: Vec<_> = items.iter().map(|&f| (f, 0)).collect();
            Batch::panes(&windows, &c.layout)
        }
        _ => Batch::sequences(items),
    }
}

/// Per-input scores in `(0, 1)` for every window of every clip, in order.
pub fn window_scores<T: Scalar>(
    model: &mut Model<T>,
    feat: &FeatureMatrix,
    plan: &ScoringPlan,
) -> Result<Vec<f64>> {
    let inputs = clip_inputs(feat, plan)?;
    let refs: Vec<&FeatureMatrix> = inputs.iter().collect();
    let mut out = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(plan.batch_size.max(1)) {
        let batch = build_batch(&model.spec, chunk)?;
        out.extend(model.predict(&batch)?);
    }
    Ok(out)
}

/// Clip scores in `(0, 1)` (window scores averaged per clip).
pub fn score_clips<T: Scalar>(
    model: &mut Model<T>,
    feats: &[&FeatureMatrix],
    plan: &ScoringPlan,
) -> Result<Vec<f64>> {
    let mut inputs = Vec::new();
    let mut owner = Vec::new();
    for (i, f) in feats.iter().enumerate() {
        for w in clip_inputs(f, plan)? {
            inputs.push(w);
            owner.push(i);
        }
    }
    let mut sums = vec![0.0; feats.len()];
    let mut counts = vec![0usize; feats.len()];
    let order: Vec<usize> = (0..inputs.len()).collect();
    for chunk in order.chunks(plan.batch_size.max(1)) {
        let items: Vec<&FeatureMatrix> = chunk.iter().map(|&k| &inputs[k]).collect();
        let batch = build_batch(&model.spec, &items)?;
        for (&k, s) in chunk.iter().zip(model.predict(&batch)?) {
            sums[owner[k]] += s;
            counts[owner[k]] += 1;
        }
    }
    Ok(sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect())
}

/// Inference from a saved checkpoint.
pub struct Predictor {
    pub checkpoint: Checkpoint,
    model: Model<f32>,
    extractor: Extractor,
}

impl Predictor {
    pub fn new(checkpoint: Checkpoint) -> Result<Self> {
        let model = checkpoint.to_model()?;
        let extractor = Extractor::new(checkpoint.meta.feature_config)?;
        Ok(Predictor {
            checkpoint,
            model,
            extractor,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(Checkpoint::load(path)?)
    }

    fn plan(&self) -> ScoringPlan {
        let m = &self.checkpoint.meta;
        ScoringPlan {
            policy: m.segment_policy,
            min_frames: m.min_frames,
            max_frames: m.max_frames,
            eval_segments: m.eval_segments,
            batch_size: 32,
        }
    }

    fn prepare(&self, feat: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.checkpoint.require_kind(feat.kind)?;
        let mut f = feat.clone();
        self.checkpoint.meta.standardization.apply(&mut f)?;
        Ok(f)
    }

    /// Raw per-window scores in `(0, 1)` for unstandardized features.
    pub fn window_scores(&mut self, feat: &FeatureMatrix) -> Result<Vec<f64>> {
        let f = self.prepare(feat)?;
        let plan = self.plan();
        window_scores(&mut self.model, &f, &plan)
    }

    /// OMOS on the 1 to 5 scale for unstandardized features.
    pub fn predict_features(&mut self, feat: &FeatureMatrix) -> Result<f64> {
        let f = self.prepare(feat)?;
        let plan = self.plan();
        let s = score_clips(&mut self.model, &[&f], &plan)?;
        Ok(rescale_omos(s[0]))
    }

    pub fn features_for(&mut self, path: &Path) -> Result<FeatureMatrix> {
        let meta = &self.checkpoint.meta;
        let clip = load_clip(path, meta.silence_rule)?;
        self.extractor
            .extract(&clip.samples, clip.sample_rate, meta.feature_kind)
    }

    pub fn predict_wav(&mut self, path: impl AsRef<Path>) -> Result<f64> {
        let path = path.as_ref();
        let f = self
            .features_for(path)
            .map_err(|e| e.in_file(path.display()))?;
        self.predict_features(&f).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}
