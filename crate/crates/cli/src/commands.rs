use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};

use omoq::evaluation::{self, Bins, Exclusions, ScoredPrediction, TestKind};
use omoq::features::cache::{read_index, write_index, IndexRow, INDEX_FILE};
use omoq::features::{Standardization, StandardizationStats};
use omoq::metrics::{self, Candidate, ReportRow};
use omoq::synth::{self, SynthOptions};
use omoq::training::{
    self, extract_all, trainer, ConfigFile, Dataset, LoadOptions, Manifest, Predictor, Split,
    TrainConfig,
};

use crate::{
    EvaluateArgs, FeaturesArgs, ModelArgs, PredictArgs, SelectArgs, Settings, SweepArgs, SynthArgs,
    TrainArgs,
};

const DEFAULT_CACHE_DIR: &str = ".omoq-cache";

fn resolve_config(s: &Settings, model: Option<&ModelArgs>, seed: Option<u64>) -> Result<TrainConfig> {
    let file = s
        .config
        .as_ref()
        .map(ConfigFile::load)
        .transpose()
        .context("config file")?;
    let mut overrides = Vec::new();
    for kv in &s.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got '{kv}'"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    };
    if let Some(m) = model {
        flag("model", m.model.clone());
        flag("features", m.features.clone());
        flag("epochs", m.epochs.map(|v| v.to_string()));
        flag("batch_size", m.batch_size.map(|v| v.to_string()));
        flag("lr", m.lr.map(|v| v.to_string()));
    }
    flag("seed", seed.map(|v| v.to_string()));
    Ok(training::resolve(file.as_ref(), &overrides, &[])?)
}

fn workers(s: &Settings) -> usize {
    s.workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn load_options(s: &Settings, cfg: &TrainConfig) -> LoadOptions {
    LoadOptions {
        feature_config: cfg.feature_config,
        silence_rule: cfg.silence_rule,
        cache_dir: if s.no_cache {
            None
        } else {
            Some(s.cache_dir.clone().unwrap_or_else(|| DEFAULT_CACHE_DIR.into()))
        },
        workers: workers(s),
    }
}

fn read_manifest(path: &Path, split_seed: u64) -> Result<Manifest> {
    let mut m = Manifest::read(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let moved = m.assign_validation(split_seed);
    if moved > 0 {
        log::info!("moved {moved} training rows to validation");
    }
    Ok(m)
}

pub fn features(a: FeaturesArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.settings, None, None)?;
    if let Some(k) = &a.kind {
        cfg.features = k.parse()?;
    }
    let opts = load_options(&a.settings, &cfg);
    let dir = opts
        .cache_dir
        .clone()
        .ok_or_else(|| anyhow!("features writes to a cache; drop --no-cache"))?;
    let (paths, train_mask): (Vec<PathBuf>, Vec<bool>) = match &a.manifest {
        Some(m) => {
            let m = read_manifest(m, cfg.split_seed)?;
            m.rows
                .iter()
                .map(|r| (r.resolved.clone(), r.split == Split::Train))
                .unzip()
        }
        None if a.inputs.is_empty() => bail!("give --manifest or at least one WAV file"),
        None => (a.inputs.clone(), vec![true; a.inputs.len()]),
    };
    let (feats, stats) = extract_all(&paths, cfg.features, &opts)?;

    let mut index: Vec<IndexRow> = if dir.join(INDEX_FILE).exists() {
        read_index(&dir)?
    } else {
        Vec::new()
    };
    let mut pos: HashMap<(String, String), usize> = index
        .iter()
        .enumerate()
        .map(|(i, r)| ((r.path.clone(), r.kind.clone()), i))
        .collect();
    for (p, f) in paths.iter().zip(&feats) {
        let row = IndexRow {
            path: p.display().to_string(),
            kind: f.kind.to_string(),
            frames: f.frames,
            dim: f.dim,
        };
        match pos.get(&(row.path.clone(), row.kind.clone())) {
            Some(&i) => index[i] = row,
            None => {
                pos.insert((row.path.clone(), row.kind.clone()), index.len());
                index.push(row);
            }
        }
    }
    write_index(&dir, &index)?;

    if let Some(mode) = &a.standardize {
        let mode: Standardization = mode.parse()?;
        let fitted = StandardizationStats::fit(
            mode,
            feats.iter().zip(&train_mask).filter(|(_, &t)| t).map(|(f, _)| f),
        )?;
        let path = dir.join(format!("standardize-{}.json", cfg.features));
        fs::write(&path, serde_json::to_string_pretty(&fitted)?)
            .with_context(|| path.display().to_string())?;
    }
    println!(
        "{} clips of {} (D_F = {}): {} cached, {} computed, cache {}",
        feats.len(),
        cfg.features,
        feats.first().map_or(0, |f| f.dim),
        stats.cache_hits,
        stats.computed,
        dir.display()
    );
    Ok(())
}

fn summary_line(c: &Candidate) -> String {
    let m = &c.metrics;
    format!(
        "seed {} best epoch {}: D {:.6} rho [{:.4}, {:.4}, {:.4}] L [{:.4}, {:.4}, {:.4}]",
        c.seed,
        c.epoch,
        c.distance(),
        m.rho[0],
        m.rho[1],
        m.rho[2],
        m.loss[0],
        m.loss[1],
        m.loss[2]
    )
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.settings, Some(&a.model), a.seed)?;
    cfg.validate()?;
    let manifest = read_manifest(&a.manifest, cfg.split_seed)?;
    let ds = Dataset::load(manifest, cfg.features, &load_options(&a.settings, &cfg))?;
    let out = a.out.unwrap_or_else(|| {
        PathBuf::from("runs").join(format!("{}-{}-seed{}", cfg.model, cfg.features, cfg.seed))
    });
    let result = training::train(&ds, &cfg, Some(&out))?;
    if result.fell_back {
        println!("validation loss stalled; retrained with lr {}", result.lr);
    }
    println!("{}", summary_line(&result.best));
    println!("run directory {}", out.display());
    eprintln!("note: {}", metrics::TEST_SELECTION_NOTE);
    Ok(())
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: u64 = lo.trim().parse().with_context(|| format!("seed range '{s}'"))?;
        let hi: u64 = hi.trim().parse().with_context(|| format!("seed range '{s}'"))?;
        if hi < lo {
            bail!("empty seed range '{s}'");
        }
        (lo..=hi).collect()
    } else {
        s.split(',')
            .map(|v| v.trim().parse().with_context(|| format!("seed list '{s}'")))
            .collect::<Result<_>>()?
    };
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        bail!("seed list '{s}' repeats a seed");
    }
    Ok(seeds)
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let seeds = parse_seeds(&a.seeds)?;
    let base = resolve_config(&a.settings, Some(&a.model), None)?;
    base.validate()?;
    let manifest = read_manifest(&a.manifest, base.split_seed)?;
    let ds = Dataset::load(manifest, base.features, &load_options(&a.settings, &base))?;
    fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<omoq::Result<ReportRow>>>> = Mutex::new(seeds.iter().map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..a.jobs.clamp(1, seeds.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let mut cfg = base.clone();
                cfg.seed = seeds[i];
                let dir = a.out.join(format!("seed-{}", seeds[i]));
                let r = training::train(&ds, &cfg, Some(&dir)).map(|r| ReportRow::from(&r.best));
                results.lock().expect("sweep worker panicked")[i] = Some(r);
            });
        }
    });
    let mut rows = Vec::with_capacity(seeds.len());
    for (seed, r) in seeds.iter().zip(results.into_inner().expect("sweep worker panicked")) {
        rows.push(r.expect("every seed run").with_context(|| format!("seed {seed}"))?);
    }
    rows.sort_by_key(|r| r.seed);
    metrics::write_report(&a.out.join("summary.csv"), &rows)?;
    let cands: Vec<Candidate> = rows.iter().map(Candidate::from).collect();
    let best = metrics::select_best(&cands)?;
    for c in &cands {
        println!("{}", summary_line(c));
    }
    println!("overall {}", summary_line(&best));
    eprintln!("note: {}", metrics::TEST_SELECTION_NOTE);
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let mut p = Predictor::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(path) => Box::new(fs::File::create(path).with_context(|| path.display().to_string())?),
        None => Box::new(std::io::stdout().lock()),
    };
    match &a.manifest {
        Some(m) => {
            let manifest = Manifest::read(m).with_context(|| format!("reading manifest {}", m.display()))?;
            let mut preds = Vec::with_capacity(manifest.rows.len());
            for r in &manifest.rows {
                preds.push(ScoredPrediction {
                    file: r.path.clone(),
                    method: r.method.clone(),
                    beta_tag: r.beta_tag.clone(),
                    class: r.class.clone(),
                    omos: p.predict_wav(&r.resolved)?,
                    smos: Some(r.smos),
                });
            }
            let mut w = csv::Writer::from_writer(out);
            for pr in &preds {
                w.serialize(pr)?;
            }
            w.flush()?;
        }
        None => {
            if a.inputs.is_empty() {
                bail!("give --manifest or at least one WAV file");
            }
            writeln!(out, "file,omos")?;
            for path in &a.inputs {
                let omos = p.predict_wav(path)?;
                writeln!(out, "{},{omos}", path.display())?;
            }
        }
    }
    Ok(())
}

pub fn select(a: SelectArgs) -> Result<()> {
    let mut cands = Vec::new();
    for p in &a.reports {
        let path = if p.is_dir() { p.join(trainer::REPORT_FILE) } else { p.clone() };
        let rows = metrics::read_report(&path).with_context(|| path.display().to_string())?;
        cands.extend(rows.iter().map(Candidate::from));
    }
    let best = metrics::select_best(&cands)?;
    let row = ReportRow::from(&best);
    if let Some(out) = &a.out {
        metrics::write_report(out, &[row])?;
    }
    println!("{}", summary_line(&best));
    eprintln!("note: {}", metrics::TEST_SELECTION_NOTE);
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let preds = evaluation::read_predictions(&a.preds)
        .with_context(|| format!("reading predictions {}", a.preds.display()))?;
    let excl = if a.no_exclusions {
        Exclusions::none()
    } else {
        Exclusions::default()
    };
    let kind = if a.pooled { TestKind::Pooled } else { TestKind::Welch };
    fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;

    let table = evaluation::aggregate(&preds, &excl)?;
    evaluation::write_means(&a.out.join("means.csv"), &table)?;
    evaluation::write_per_beta(&a.out.join("per_beta.csv"), &table)?;

    let samples = evaluation::method_samples(&preds, &excl, None)?;
    let matrix = evaluation::ttest_matrix(&samples, a.alpha, kind)?;
    evaluation::write_masked_p(&a.out.join("pvalues_masked.csv"), &matrix)?;
    evaluation::write_comparisons(&a.out.join("ttests.csv"), &matrix)?;
    if matrix.any_degenerate() {
        eprintln!("warning: some method pairs have no variance; see the degenerate column of ttests.csv");
    }
    let rejected = matrix.cells.iter().flatten().filter(|c| c.reject).count() / 2;
    let pairs = matrix.methods.len() * matrix.methods.len().saturating_sub(1) / 2;
    println!(
        "{} methods, {rejected} of {pairs} pairs differ at alpha {}",
        matrix.methods.len(),
        a.alpha
    );
    for m in &matrix.methods {
        if let Some(mean) = table.method_mean(m) {
            println!("{m}: mean OMOS {mean:.4}");
        }
    }

    if a.stratify {
        let classes: std::collections::BTreeSet<&str> = preds.iter().map(|p| p.class.as_str()).collect();
        for class in classes {
            let s = evaluation::method_samples(&preds, &excl, Some(class))?;
            let m = evaluation::ttest_matrix(&s, a.alpha, kind)
                .with_context(|| format!("class {class}"))?;
            evaluation::write_masked_p(&a.out.join(format!("pvalues_masked_{class}.csv")), &m)?;
            evaluation::write_comparisons(&a.out.join(format!("ttests_{class}.csv")), &m)?;
        }
    }

    let bins = Bins::with_width(a.bin_width)?;
    let paired: Vec<(f64, f64)> = preds.iter().filter_map(|p| p.smos.map(|s| (s, p.omos))).collect();
    if paired.len() == preds.len() && !paired.is_empty() {
        let (x, y): (Vec<f64>, Vec<f64>) = paired.into_iter().unzip();
        let c = evaluation::omos_confusion(&x, &y, &bins)?;
        evaluation::write_confusion(&a.out.join("confusion.csv"), &c)?;
        println!("SMOS/OMOS correlation {:.4}", c.pearson);
    }

    if let Some(m) = &a.manifest {
        let dir = a
            .cache_dir
            .clone()
            .unwrap_or_else(|| DEFAULT_CACHE_DIR.into());
        let manifest = Manifest::read(m).with_context(|| format!("reading manifest {}", m.display()))?;
        let mut frames: BTreeMap<String, usize> = BTreeMap::new();
        for r in read_index(&dir).with_context(|| format!("cache index in {}", dir.display()))? {
            frames.entry(r.path).or_insert(r.frames);
        }
        let rows = manifest
            .rows
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| {
                let key = r.resolved.display().to_string();
                frames
                    .get(&key)
                    .map(|&f| (r.smos, f))
                    .ok_or_else(|| anyhow!("{key}: no cached features; run `omoq features` first"))
            })
            .collect::<Result<Vec<_>>>()?;
        let mass = evaluation::frames_per_mos(rows, &bins)?;
        evaluation::write_histogram(&a.out.join("frames_per_mos.csv"), &bins, &mass)?;
    }
    println!("report written to {}", a.out.display());
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let d = SynthOptions::default();
    let opts = SynthOptions {
        clips: a.clips,
        seed: a.seed,
        min_seconds: a.min_seconds.unwrap_or(d.min_seconds),
        max_seconds: a.max_seconds.unwrap_or(d.max_seconds),
        all_train: a.all_train,
    };
    if opts.clips == 0 {
        bail!("--clips must be positive");
    }
    if !(opts.min_seconds > 0.0 && opts.max_seconds >= opts.min_seconds) {
        bail!("clip length range {}..{} s is invalid", opts.min_seconds, opts.max_seconds);
    }
    let m = synth::generate(&a.out, &opts)?;
    println!(
        "{} clips, manifest {}",
        m.rows.len(),
        synth::manifest_path(&a.out).display()
    );
    Ok(())
}
