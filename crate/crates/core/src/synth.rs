//! Labelled toy datasets: harmonic tones degraded by additive noise and
//! amplitude warble, with SMOS falling linearly in the degradation level.
//! This is a fixture for exercising training and metrics end to end; it does
//! not imitate time-scale modification.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{write_wav_pcm16, EXPECTED_SAMPLE_RATE};
use crate::error::{IoContext, Result};
use crate::training::{Manifest, ManifestRow, Split};

pub const MANIFEST_FILE: &str = "manifest.csv";

const METHODS: [&str; 3] = ["synth_a", "synth_b", "synth_c"];
const BETAS: [&str; 4] = ["0.5", "0.75", "1.25", "1.5"];
const CLASSES: [&str; 3] = ["Musical", "Solo", "Voice"];

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    pub clips: usize,
    pub seed: u64,
    /// Clip lengths are uniform in this range (seconds).
    pub min_seconds: f64,
    pub max_seconds: f64,
    /// Every clip goes to the training split.
    pub all_train: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            clips: 20,
            seed: 0,
            min_seconds: 1.0,
            max_seconds: 1.5,
            all_train: false,
        }
    }
}

/// `5 - 4 d`: clean clips score 5, fully degraded ones 1.
pub fn smos_for(degradation: f64) -> f64 {
    5.0 - 4.0 * degradation
}

/// One clip at degradation `d` in `[0, 1]`.
pub fn render<R: Rng + ?Sized>(rng: &mut R, d: f64, len: usize) -> Vec<f64> {
    let sr = EXPECTED_SAMPLE_RATE as f64;
    let f0 = rng.random_range(110.0..440.0);
    let harmonics = rng.random_range(3..=6);
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..TAU)).collect();
    let warble_hz = rng.random_range(4.0..8.0);
    (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            let tone: f64 = phases
                .iter()
                .enumerate()
                .map(|(k, ph)| (TAU * f0 * (k + 1) as f64 * t + ph).sin() / (k + 1) as f64)
                .sum::<f64>()
                * 0.4;
            let warble = 1.0 - 0.8 * d * (0.5 + 0.5 * (TAU * warble_hz * t).sin());
            let noise: f64 = StandardNormal.sample(rng);
            (1.0 - d) * tone * warble + d * 0.3 * noise
        })
        .collect()
}

/// Degradation levels evenly covering `[0, 1]` with jitter, one per clip.
fn levels(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5];
    }
    (0..n)
        .map(|i| {
            let jitter: f64 = rng.random_range(-0.3..0.3);
            ((i as f64 + 0.5 + jitter) / n as f64).clamp(0.0, 1.0)
        })
        .enumerate()
        .map(|(i, d)| match i {
            0 => 0.0,
            _ if i == n - 1 => 1.0,
            _ => d,
        })
        .collect()
}

/// Splits in blocks of ten consecutive degradation levels: 8 train, 1 val,
/// 1 test per block, so every split spans the label range.
fn assign_splits(rng: &mut ChaCha8Rng, n: usize, all_train: bool) -> Vec<Split> {
    let mut splits = vec![Split::Train; n];
    if all_train {
        return splits;
    }
    for block in (0..n).collect::<Vec<_>>().chunks(10) {
        let mut b = block.to_vec();
        b.shuffle(rng);
        if b.len() >= 3 {
            splits[b[0]] = Split::Val;
            splits[b[1]] = Split::Test;
        }
    }
    splits
}

/// Write `clips` WAVs and `manifest.csv` into `dir`.
pub fn generate(dir: &Path, opts: &SynthOptions) -> Result<Manifest> {
    fs::create_dir_all(dir).at(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = opts.clips;
    let levels = levels(&mut rng, n);
    let splits = assign_splits(&mut rng, n, opts.all_train);
    let sr = EXPECTED_SAMPLE_RATE as f64;
    let mut rows = Vec::with_capacity(n);
    for (i, (&d, &split)) in levels.iter().zip(&splits).enumerate() {
        let secs = if opts.max_seconds > opts.min_seconds {
            rng.random_range(opts.min_seconds..opts.max_seconds)
        } else {
            opts.min_seconds
        };
        let samples = render(&mut rng, d, (secs * sr).round() as usize);
        let name = format!("clip_{i:04}.wav");
        let path = dir.join(&name);
        write_wav_pcm16(&path, &samples, 1, EXPECTED_SAMPLE_RATE)?;
        let beta_tag = BETAS[i % BETAS.len()].to_string();
        rows.push(ManifestRow {
            path: name,
            resolved: path,
            smos: smos_for(d),
            method: METHODS[i % METHODS.len()].to_string(),
            beta: beta_tag.parse().expect("static tag"),
            beta_tag,
            class: CLASSES[(i / METHODS.len()) % CLASSES.len()].to_string(),
            split,
        });
    }
    let manifest = Manifest { rows };
    manifest.write(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
