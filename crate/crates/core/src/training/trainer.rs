//! Dataset loading and the training loop.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use omoq_autograd::{AdamW, AdamWConfig, Graph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{CheckpointPolicy, TrainConfig};
use super::manifest::{rescale_omos, scale_target, Manifest, Split};
use super::predict::{build_batch, score_clips, ScoringPlan};
use super::segments::{self, SegmentPolicy};
use crate::audio::{load_clip, SilenceRule};
use crate::error::{Error, IoContext, Result};
use crate::features::{
    CacheOutcome, Extractor, FeatureCache, FeatureConfig, FeatureKind, FeatureMatrix,
    StandardizationStats,
};
use crate::metrics::{self, Candidate, ReportRow, SplitMetrics};
use crate::models::{self, Checkpoint, CheckpointMeta, Model, ModelSpec};

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const RUN_FILE: &str = "run.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Independent random streams of one run, keyed by purpose and epoch.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Stream {
    Init = 1,
    Shuffle = 2,
    Segments = 3,
    Dropout = 4,
}

fn stream(seed: u64, purpose: Stream, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 32) | epoch as u64);
    rng
}

/// Where extracted features come from.
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub feature_config: FeatureConfig,
    pub silence_rule: SilenceRule,
    pub cache_dir: Option<PathBuf>,
    pub workers: usize,
}

/// Tallies from a feature pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub cache_hits: usize,
    pub computed: usize,
}

/// Extract (or load cached) features for every path with a bounded pool of
/// worker threads. Output order matches `paths`.
pub fn extract_all(
    paths: &[PathBuf],
    kind: FeatureKind,
    opts: &LoadOptions,
) -> Result<(Vec<FeatureMatrix>, LoadStats)> {
    let probe = Extractor::new(opts.feature_config)?;
    let cache = match &opts.cache_dir {
        Some(dir) => Some(FeatureCache::new(dir, &probe, opts.silence_rule)?),
        None => None,
    };
    let next = AtomicUsize::new(0);
    type Slot = Option<Result<(FeatureMatrix, CacheOutcome)>>;
    let results: Mutex<Vec<Slot>> =
        Mutex::new((0..paths.len()).map(|_| None).collect());
    let workers = opts.workers.clamp(1, paths.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| {
                let mut ex = match Extractor::new(opts.feature_config) {
                    Ok(ex) => ex,
                    Err(_) => return,
                };
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= paths.len() {
                        break;
                    }
                    let path = &paths[i];
                    let r = match &cache {
                        Some(c) => c.load_or_compute(path, kind, &mut ex, opts.silence_rule),
                        None => load_clip(path, opts.silence_rule)
                            .and_then(|clip| ex.extract(&clip.samples, clip.sample_rate, kind))
                            .map(|f| (f, CacheOutcome::Computed)),
                    };
                    results.lock().expect("worker panicked")[i] =
                        Some(r.map_err(|e| e.in_file(path.display())));
                }
            });
        }
    });
    let mut stats = LoadStats::default();
    let mut feats = Vec::with_capacity(paths.len());
    for r in results.into_inner().expect("worker panicked") {
        let (f, outcome) = r.expect("every index visited")?;
        match outcome {
            CacheOutcome::Hit => stats.cache_hits += 1,
            CacheOutcome::Computed => stats.computed += 1,
        }
        feats.push(f);
    }
    Ok((feats, stats))
}

/// A manifest with one raw (unstandardized) feature matrix per row.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub kind: FeatureKind,
    pub feature_config: FeatureConfig,
    pub silence_rule: SilenceRule,
    pub feats: Vec<FeatureMatrix>,
}

impl Dataset {
    pub fn load(manifest: Manifest, kind: FeatureKind, opts: &LoadOptions) -> Result<Self> {
        let paths: Vec<PathBuf> = manifest.rows.iter().map(|r| r.resolved.clone()).collect();
        let (feats, stats) = extract_all(&paths, kind, opts)?;
        log::info!(
            "features: {} clips ({} cached, {} computed)",
            feats.len(),
            stats.cache_hits,
            stats.computed
        );
        Self::from_features(manifest, kind, opts.feature_config, opts.silence_rule, feats)
    }

    pub fn from_features(
        manifest: Manifest,
        kind: FeatureKind,
        feature_config: FeatureConfig,
        silence_rule: SilenceRule,
        feats: Vec<FeatureMatrix>,
    ) -> Result<Self> {
        if feats.len() != manifest.rows.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature matrices for {} manifest rows",
                feats.len(),
                manifest.rows.len()
            )));
        }
        if let Some((f, r)) = feats.iter().zip(&manifest.rows).find(|(f, _)| f.kind != kind) {
            return Err(Error::InvalidArgument(format!(
                "{}: features are {}, expected {kind}",
                r.path, f.kind
            )));
        }
        Ok(Dataset {
            manifest,
            kind,
            feature_config,
            silence_rule,
            feats,
        })
    }

    /// Shortest and longest clip in frames, over every split.
    pub fn frame_range(&self) -> (usize, usize) {
        let min = self.feats.iter().map(|f| f.frames).min().unwrap_or(0);
        let max = self.feats.iter().map(|f| f.frames).max().unwrap_or(0);
        (min, max)
    }
}

/// The architecture a config trains on this dataset.
pub fn model_spec(cfg: &TrainConfig, kind: FeatureKind, dim: usize, min_frames: usize) -> Result<ModelSpec> {
    let mut spec = ModelSpec::preset(cfg.model, kind, dim, min_frames, cfg.two_channel)?;
    match &mut spec {
        ModelSpec::RnnFf(s) => {
            if let Some(h) = cfg.hidden {
                s.rnn.hidden = h;
            }
        }
        ModelSpec::RnnFt(s) => {
            if let Some(h) = cfg.hidden {
                s.rnn.hidden = h;
            }
            s.collapse = cfg.collapse;
        }
        ModelSpec::Cnn(_) => {
            if cfg.hidden.is_some() {
                return Err(Error::InvalidArgument("hidden applies to recurrent models only".into()));
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: &'static str,
    pub rmse_15: f64,
    pub pearson: f64,
}

/// Summary of one training run.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub seed: u64,
    /// Learning rate of the run that produced these metrics.
    pub lr: f64,
    pub fell_back: bool,
    pub epochs: Vec<Candidate>,
    pub best: Candidate,
    pub min_frames: usize,
    pub max_frames: usize,
    pub parameters: usize,
}

impl RunResult {
    pub fn report_rows(&self) -> Vec<ReportRow> {
        self.epochs.iter().map(ReportRow::from).collect()
    }
}

#[derive(Serialize)]
struct RunFile<'a> {
    config: &'a TrainConfig,
    spec: &'a ModelSpec,
    result: &'a RunResult,
    best_distance: f64,
    note: &'static str,
}

struct Prepared<'a> {
    ds: &'a Dataset,
    cfg: &'a TrainConfig,
    feats: Vec<FeatureMatrix>,
    targets: Vec<f64>,
    splits: [Vec<usize>; 3],
    stats: StandardizationStats,
    spec: ModelSpec,
    min_frames: usize,
    max_frames: usize,
}

impl Prepared<'_> {
    fn plan(&self) -> ScoringPlan {
        ScoringPlan {
            policy: self.cfg.segment_policy,
            min_frames: self.min_frames,
            max_frames: self.max_frames,
            eval_segments: self.cfg.eval_segments,
            batch_size: self.cfg.batch_size,
        }
    }

    fn meta(&self, epoch: usize) -> CheckpointMeta {
        CheckpointMeta {
            spec: self.spec.clone(),
            feature_kind: self.ds.kind,
            feature_config: self.ds.feature_config,
            silence_rule: self.ds.silence_rule,
            standardization: self.stats.clone(),
            segment_policy: self.cfg.segment_policy,
            min_frames: self.min_frames,
            max_frames: self.max_frames,
            eval_segments: self.cfg.eval_segments,
            seed: self.cfg.seed,
            epoch,
        }
    }

    /// RMSE on the 1 to 5 scale and Pearson correlation per split. Empty
    /// splits and undefined correlations are NaN.
    fn evaluate(&self, model: &mut Model<f32>) -> Result<([f64; 3], [f64; 3])> {
        let plan = self.plan();
        let mut rmse = [f64::NAN; 3];
        let mut rho = [f64::NAN; 3];
        for (k, idx) in self.splits.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let feats: Vec<&FeatureMatrix> = idx.iter().map(|&i| &self.feats[i]).collect();
            let est: Vec<f64> = score_clips(model, &feats, &plan)?
                .into_iter()
                .map(rescale_omos)
                .collect();
            let tgt: Vec<f64> = idx.iter().map(|&i| self.ds.manifest.rows[i].smos).collect();
            rmse[k] = metrics::rmse(&est, &tgt)?;
            rho[k] = metrics::pearson(&est, &tgt).unwrap_or(f64::NAN);
        }
        Ok((rmse, rho))
    }

    fn train_inputs(&self, chunk: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<FeatureMatrix>> {
        chunk
            .iter()
            .map(|&i| {
                let f = &self.feats[i];
                match self.cfg.segment_policy {
                    SegmentPolicy::TruncateRandom => {
                        let start = segments::random_start(f.frames, self.min_frames, rng)?;
                        segments::window(f, start, self.min_frames)
                    }
                    SegmentPolicy::Full => Ok(f.clone()),
                    SegmentPolicy::RepeatToMax => segments::tile(f, self.max_frames),
                }
            })
            .collect()
    }
}

fn prepare<'a>(ds: &'a Dataset, cfg: &'a TrainConfig) -> Result<Prepared<'a>> {
    cfg.validate()?;
    if cfg.features != ds.kind {
        return Err(Error::InvalidArgument(format!(
            "config asks for {} features but the dataset holds {}",
            cfg.features, ds.kind
        )));
    }
    let splits = Split::ALL.map(|s| ds.manifest.indices(s));
    if splits[0].is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    for s in [Split::Val, Split::Test] {
        if splits[s.index()].is_empty() {
            log::warn!("{} split is empty; its metrics are NaN", s.name());
        }
    }
    let targets = ds
        .manifest
        .rows
        .iter()
        .map(|r| scale_target(r.smos))
        .collect::<Result<Vec<_>>>()?;
    let stats = StandardizationStats::fit(cfg.standardize, splits[0].iter().map(|&i| &ds.feats[i]))?;
    let mut feats = ds.feats.clone();
    for f in &mut feats {
        stats.apply(f)?;
    }
    let (min_frames, max_frames) = ds.frame_range();
    if min_frames == 0 {
        return Err(Error::InvalidArgument("dataset contains a clip with no frames".into()));
    }
    let dim = feats[0].dim;
    let spec = model_spec(cfg, ds.kind, dim, min_frames)?;
    Ok(Prepared {
        ds,
        cfg,
        feats,
        targets,
        splits,
        stats,
        spec,
        min_frames,
        max_frames,
    })
}

struct Attempt {
    epochs: Vec<Candidate>,
    metrics_rows: Vec<MetricsRow>,
    model: Model<f32>,
    abandoned: bool,
}

/// One pass over the epoch budget at a fixed learning rate. With
/// `watch_fallback`, stops after the fallback window if validation loss has
/// not improved on epoch 1.
fn run_attempt(p: &Prepared, lr: f64, watch_fallback: bool, out: Option<&Path>) -> Result<Attempt> {
    let cfg = p.cfg;
    let mut model = Model::<f32>::init(p.spec.clone(), &mut stream(cfg.seed, Stream::Init, 0))?;
    // lr = 0 evaluates a frozen model
    let mut opt = if lr > 0.0 {
        Some(AdamW::new(
            AdamWConfig {
                lr,
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
            &model.params,
        )?)
    } else {
        None
    };
    let mut epochs = Vec::new();
    let mut rows = Vec::new();
    let mut best = f64::INFINITY;
    for epoch in 1..=cfg.epochs {
        let mut order = p.splits[0].clone();
        order.shuffle(&mut stream(cfg.seed, Stream::Shuffle, epoch));
        let mut seg_rng = stream(cfg.seed, Stream::Segments, epoch);
        let mut drop_rng = stream(cfg.seed, Stream::Dropout, epoch);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs = p.train_inputs(chunk, &mut seg_rng)?;
            let refs: Vec<&FeatureMatrix> = inputs.iter().collect();
            let batch = build_batch::<f32>(&p.spec, &refs)?;
            let targets: Vec<f64> = chunk.iter().map(|&i| p.targets[i]).collect();
            let mut g = Graph::new();
            let outv = model.forward(&mut g, &batch, true, &mut drop_rng)?;
            let loss = models::loss(&mut g, outv, &targets, &batch.lens)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: value,
                });
            }
            if let Some(opt) = opt.as_mut() {
                let grads = g.backward(loss)?;
                opt.step(&mut model.params, &grads)?;
            }
        }

        let (rmse, rho) = p.evaluate(&mut model)?;
        for s in Split::ALL {
            rows.push(MetricsRow {
                epoch,
                split: s.name(),
                rmse_15: rmse[s.index()],
                pearson: rho[s.index()],
            });
        }
        let cand = Candidate {
            seed: cfg.seed,
            epoch,
            metrics: SplitMetrics { rho, loss: rmse },
        };
        log::info!(
            "seed {} epoch {epoch}: rmse {:.4}/{:.4}/{:.4} rho {:.4}/{:.4}/{:.4} D {:.4}",
            cfg.seed,
            rmse[0],
            rmse[1],
            rmse[2],
            rho[0],
            rho[1],
            rho[2],
            cand.distance()
        );
        epochs.push(cand);

        if watch_fallback && epoch == cfg.fallback_window && fallback_triggered(&epochs) {
            return Ok(Attempt {
                epochs,
                metrics_rows: rows,
                model,
                abandoned: true,
            });
        }

        if let Some(dir) = out {
            let d = cand.distance();
            let save = |name: &str, model: &Model<f32>| {
                Checkpoint::from_model(model, p.meta(epoch)).save(dir.join(name))
            };
            match cfg.checkpoint {
                CheckpointPolicy::None => {}
                CheckpointPolicy::Best | CheckpointPolicy::Every => {
                    if d < best {
                        save(BEST_CHECKPOINT, &model)?;
                    }
                    save(LAST_CHECKPOINT, &model)?;
                    if cfg.checkpoint == CheckpointPolicy::Every {
                        save(&format!("epoch-{epoch:03}.ckpt"), &model)?;
                    }
                }
            }
            if d < best {
                best = d;
            }
        }
    }
    Ok(Attempt {
        epochs,
        metrics_rows: rows,
        model,
        abandoned: false,
    })
}

/// Validation loss never dropped below its epoch-1 value within the window.
fn fallback_triggered(epochs: &[Candidate]) -> bool {
    let val: Vec<f64> = epochs.iter().map(|c| c.metrics.loss[1]).collect();
    if val.len() < 2 || val.iter().any(|v| v.is_nan()) {
        return false;
    }
    let best_later = val[1..].iter().copied().fold(f64::INFINITY, f64::min);
    best_later >= val[0]
}

/// Train one seed. With `out`, writes `metrics.csv`, `report.csv`,
/// `run.json` and checkpoints there.
pub fn train(ds: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<RunResult> {
    train_model(ds, cfg, out).map(|(r, _)| r)
}

/// As [`train`], also returning the model after the final epoch.
pub fn train_model(ds: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<(RunResult, Model<f32>)> {
    let p = prepare(ds, cfg)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).at(dir)?;
    }
    let can_fall_back = cfg.lr > 0.0
        && cfg.fallback_lr.is_some()
        && cfg.epochs >= cfg.fallback_window
        && !p.splits[1].is_empty();
    let mut lr = cfg.lr;
    let mut attempt = run_attempt(&p, lr, can_fall_back, out)?;
    let fell_back = attempt.abandoned;
    if fell_back {
        lr = cfg.fallback_lr.expect("checked above");
        log::warn!(
            "seed {}: validation loss did not improve within {} epochs; restarting with lr {lr}",
            cfg.seed,
            cfg.fallback_window
        );
        attempt = run_attempt(&p, lr, false, out)?;
    }
    let best = metrics::select_best(&attempt.epochs)?;
    let result = RunResult {
        seed: cfg.seed,
        lr,
        fell_back,
        epochs: attempt.epochs,
        best,
        min_frames: p.min_frames,
        max_frames: p.max_frames,
        parameters: attempt.model.params.numel(),
    };
    if let Some(dir) = out {
        write_metrics(&dir.join(METRICS_FILE), &attempt.metrics_rows)?;
        metrics::write_report(&dir.join(REPORT_FILE), &result.report_rows())?;
        let run = RunFile {
            config: cfg,
            spec: &p.spec,
            result: &result,
            best_distance: best.distance(),
            note: metrics::TEST_SELECTION_NOTE,
        };
        let path = dir.join(RUN_FILE);
        fs::write(&path, serde_json::to_string_pretty(&run)?).at(&path)?;
    }
    Ok((result, attempt.model))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(path)?;
    Ok(())
}
