//! Straight-line reference for the MFCC + delta pipeline, written from the
//! definitions: direct DFT periodogram, Slaney mel triangles, natural log,
//! orthonormal DCT-II by summation, regression deltas with replicated edges.
//! Decoding goes through `hound`, independent of the crate's WAV reader.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::Path;

use omoq::audio::{load_clip, SilenceRule};
use omoq::features::{Extractor, FeatureConfig, FeatureKind};

pub const N: usize = 2048;
pub const HOP: usize = 1024;
pub const N_MELS: usize = 128;
pub const N_MFCC: usize = 128;
pub const EPS: f64 = 1e-10;
pub const SR: u32 = 44_100;

pub fn write_wav(path: &Path, samples: &[f64]) {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SR,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &x in samples {
        w.write_sample((x * 32768.0).round().clamp(-32768.0, 32767.0) as i16).unwrap();
    }
    w.finalize().unwrap();
}

pub fn read_normalized(path: &Path) -> Vec<f64> {
    let mut r = hound::WavReader::open(path).unwrap();
    let x: Vec<f64> = r.samples::<i16>().map(|s| s.unwrap() as f64 / 32768.0).collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    x.iter().map(|v| v / peak).collect()
}

/// Every 4-sample window scanned; keep from the first loud window's start to
/// the last loud window's end.
pub fn trim(x: &[f64]) -> Vec<f64> {
    let loud: Vec<usize> = (0..=x.len() - 4)
        .filter(|&i| (x[i] + x[i + 1] + x[i + 2] + x[i + 3]).abs() > 0.0061)
        .collect();
    let (a, b) = (loud[0], *loud.last().unwrap() + 4);
    x[a..b].to_vec()
}

fn hz_to_mel(f: f64) -> f64 {
    if f < 1000.0 {
        f / (200.0 / 3.0)
    } else {
        15.0 + (f / 1000.0).ln() / (6.4f64.ln() / 27.0)
    }
}

fn mel_to_hz(m: f64) -> f64 {
    if m < 15.0 {
        m * (200.0 / 3.0)
    } else {
        1000.0 * ((m - 15.0) * (6.4f64.ln() / 27.0)).exp()
    }
}

pub fn periodogram(frame: &[f64]) -> Vec<f64> {
    let cos: Vec<f64> = (0..N).map(|m| (2.0 * PI * m as f64 / N as f64).cos()).collect();
    let sin: Vec<f64> = (0..N).map(|m| (2.0 * PI * m as f64 / N as f64).sin()).collect();
    let win: Vec<f64> = (0..N)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / N as f64).cos())
        .collect();
    (0..=N / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..N {
                let v = frame[n] * win[n];
                let m = (k * n) % N;
                re += v * cos[m];
                im -= v * sin[m];
            }
            re * re + im * im
        })
        .collect()
}

pub fn mel_weights(sr: f64) -> Vec<Vec<f64>> {
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(sr / 2.0));
    let pts: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    (0..N_MELS)
        .map(|m| {
            let norm = 2.0 / (pts[m + 2] - pts[m]);
            (0..=N / 2)
                .map(|k| {
                    let f = k as f64 * sr / N as f64;
                    let up = (f - pts[m]) / (pts[m + 1] - pts[m]);
                    let down = (pts[m + 2] - f) / (pts[m + 2] - pts[m + 1]);
                    up.min(down).max(0.0) * norm
                })
                .collect()
        })
        .collect()
}

pub fn dct(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    (0..N_MFCC)
        .map(|k| {
            let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos())
                .sum::<f64>()
        })
        .collect()
}

pub fn delta(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let l = rows.len() as isize;
    let at = |t: isize| &rows[t.clamp(0, l - 1) as usize];
    (0..l)
        .map(|t| {
            (0..rows[0].len())
                .map(|j| {
                    (1..=4)
                        .map(|k| k as f64 * (at(t + k)[j] - at(t - k)[j]))
                        .sum::<f64>()
                        / 60.0
                })
                .collect()
        })
        .collect()
}

/// Rows of `[c; Δc; ΔΔc]` for normalized, trimmed samples.
pub fn mfcc_d_dd(x: &[f64]) -> Vec<Vec<f64>> {
    let frames = 1 + (x.len() - N) / HOP;
    let mel = mel_weights(SR as f64);
    let ceps: Vec<Vec<f64>> = (0..frames)
        .map(|t| {
            let p = periodogram(&x[t * HOP..t * HOP + N]);
            let logmel: Vec<f64> = mel
                .iter()
                .map(|w| (w.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() + EPS).ln())
                .collect();
            dct(&logmel)
        })
        .collect();
    let d = delta(&ceps);
    let dd = delta(&d);
    (0..frames)
        .map(|t| [ceps[t].clone(), d[t].clone(), dd[t].clone()].concat())
        .collect()
}

/// Test signals: a 1 kHz tone, white noise, a tone padded with silence, a
/// chirp and a harmonic tone with noise.
pub fn clips() -> Vec<(&'static str, Vec<f64>)> {
    use rand::{Rng, SeedableRng};
    let sr = SR as f64;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let n = 22_050;
    let tone: Vec<f64> = (0..n).map(|i| 0.6 * (2.0 * PI * 1000.0 * i as f64 / sr).sin()).collect();
    let noise: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut padded = vec![0.0; 6000];
    padded.extend((0..12_000).map(|i| 0.4 * (2.0 * PI * 330.0 * i as f64 / sr + 0.3).sin()));
    padded.extend(vec![0.0; 7000]);
    let chirp: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            0.5 * (2.0 * PI * (200.0 * t + 4000.0 * t * t)).sin()
        })
        .collect();
    let mix: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            (1..=5).map(|h| (2.0 * PI * 220.0 * h as f64 * t).sin() / h as f64).sum::<f64>() * 0.3
                + rng.random_range(-0.05..0.05)
        })
        .collect();
    vec![
        ("tone_1khz", tone),
        ("white_noise", noise),
        ("silence_padded", padded),
        ("chirp", chirp),
        ("harmonics_noise", mix),
    ]
}

pub struct Comparison {
    pub name: &'static str,
    pub frames: usize,
    pub max_rel: f64,
    /// Samples the oracle's trim removed.
    pub trimmed: usize,
}

/// Error relative to each value, with a floor of 1e-3 of the block's peak
/// so coefficients crossing zero are compared on the block's scale.
pub fn compare(dir: &Path, name: &'static str, samples: &[f64]) -> Comparison {
    let path = dir.join(format!("{name}.wav"));
    write_wav(&path, samples);
    let raw = read_normalized(&path);
    let x = trim(&raw);
    let oracle = mfcc_d_dd(&x);

    let clip = load_clip(&path, SilenceRule::AbsOfSum).unwrap();
    assert_eq!(clip.samples.len(), x.len(), "{name}: trimmed lengths differ");
    let mut ex = Extractor::new(FeatureConfig::default()).unwrap();
    let (frames, dim, got) = ex.extract_f64(&clip.samples, clip.sample_rate, FeatureKind::MfccDDd).unwrap();
    assert_eq!((frames, dim), (oracle.len(), 3 * N_MFCC));

    let mut max_rel = 0.0f64;
    for block in 0..3 {
        let cols = block * N_MFCC..(block + 1) * N_MFCC;
        let peak = oracle
            .iter()
            .flat_map(|r| r[cols.clone()].iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        for (t, row) in oracle.iter().enumerate() {
            for j in cols.clone() {
                let (a, b) = (got[t * dim + j], row[j]);
                max_rel = max_rel.max((a - b).abs() / b.abs().max(1e-3 * peak));
            }
        }
    }
    Comparison {
        name,
        frames,
        max_rel,
        trimmed: raw.len() - x.len(),
    }
}
