//! Per-clip input representations: STFT spectra, MFCCs with regression
//! deltas, and train-set standardization.

pub mod cache;
pub mod deltas;
pub mod mel;
pub mod mfcc;
pub mod standardize;
pub mod stft;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use cache::{CacheOutcome, FeatureCache};
pub use mel::MelFilterbank;
pub use mfcc::{dct2_matrix, MfccTransform, LOG_FLOOR};
pub use standardize::{Standardization, StandardizationStats, STD_FLOOR};
pub use stft::{Spectrogram, Stft, StftConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Mag,
    Phase,
    MagPhase,
    Power,
    Mfcc,
    MfccD,
    MfccDDd,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 7] = [
        FeatureKind::Mag,
        FeatureKind::Phase,
        FeatureKind::MagPhase,
        FeatureKind::Power,
        FeatureKind::Mfcc,
        FeatureKind::MfccD,
        FeatureKind::MfccDDd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Mag => "mag",
            FeatureKind::Phase => "phase",
            FeatureKind::MagPhase => "mag_phase",
            FeatureKind::Power => "power",
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::MfccD => "mfcc_d",
            FeatureKind::MfccDDd => "mfcc_d_dd",
        }
    }

    pub fn code(self) -> u8 {
        FeatureKind::ALL.iter().position(|&k| k == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        FeatureKind::ALL.get(code as usize).copied()
    }

    pub fn is_spectral(self) -> bool {
        matches!(
            self,
            FeatureKind::Mag | FeatureKind::Phase | FeatureKind::MagPhase | FeatureKind::Power
        )
    }

    /// Feature dimension `D_F` under a given extraction config.
    pub fn dim(self, cfg: &FeatureConfig) -> usize {
        let bins = cfg.stft.bins();
        match self {
            FeatureKind::Mag | FeatureKind::Phase | FeatureKind::Power => bins,
            FeatureKind::MagPhase => 2 * bins,
            FeatureKind::Mfcc => cfg.n_mfcc,
            FeatureKind::MfccD => 2 * cfg.n_mfcc,
            FeatureKind::MfccDDd => 3 * cfg.n_mfcc,
        }
    }

    /// Number of equally sized blocks stacked along the feature axis.
    pub fn blocks(self) -> usize {
        match self {
            FeatureKind::MagPhase | FeatureKind::MfccD => 2,
            FeatureKind::MfccDDd => 3,
            _ => 1,
        }
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FeatureKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown feature kind '{s}' (expected mag|phase|mag_phase|power|mfcc|mfcc_d|mfcc_d_dd)"
                ))
            })
    }
}

/// Time-major `frames x dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub kind: FeatureKind,
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(kind: FeatureKind, frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || data.len() != frames * dim {
            return Err(Error::Shape(format!(
                "{kind} matrix: {} values for {frames} x {dim}",
                data.len()
            )));
        }
        Ok(FeatureMatrix {
            kind,
            frames,
            dim,
            data,
        })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub stft: StftConfig,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub fmin: f64,
    /// Upper mel edge; `None` means Nyquist.
    pub fmax: Option<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            stft: StftConfig::default(),
            n_mels: 128,
            n_mfcc: 128,
            fmin: 0.0,
            fmax: None,
        }
    }
}

impl FeatureConfig {
    /// Stable text form, used to key cached features.
    pub fn fingerprint(&self) -> String {
        format!(
            "n={};hop={};center={};mels={};mfcc={};fmin={};fmax={:?}",
            self.stft.frame_length,
            self.stft.hop,
            self.stft.center,
            self.n_mels,
            self.n_mfcc,
            self.fmin,
            self.fmax
        )
    }
}

/// Computes any [`FeatureKind`] for mono clips. Holds the FFT plan, and the
/// mel/DCT transform for the most recent sample rate.
pub struct Extractor {
    cfg: FeatureConfig,
    stft: Stft,
    mfcc: Option<(u32, MfccTransform)>,
}

impl Extractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        if cfg.n_mfcc == 0 || cfg.n_mfcc > cfg.n_mels {
            return Err(Error::InvalidArgument(format!(
                "n_mfcc {} must be in 1..={}",
                cfg.n_mfcc, cfg.n_mels
            )));
        }
        Ok(Extractor {
            stft: Stft::new(cfg.stft)?,
            cfg,
            mfcc: None,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    fn mfcc_transform(&mut self, sample_rate: u32) -> &MfccTransform {
        if self.mfcc.as_ref().map(|(sr, _)| *sr) != Some(sample_rate) {
            let fmax = self.cfg.fmax.unwrap_or(sample_rate as f64 / 2.0);
            let mel = MelFilterbank::new(
                self.cfg.n_mels,
                self.cfg.stft.frame_length,
                sample_rate,
                self.cfg.fmin,
                fmax,
            );
            self.mfcc = Some((sample_rate, MfccTransform::new(mel, self.cfg.n_mfcc)));
        }
        &self.mfcc.as_ref().unwrap().1
    }

    /// Full-precision features as `(frames, dim, row-major values)`.
    pub fn extract_f64(
        &mut self,
        samples: &[f64],
        sample_rate: u32,
        kind: FeatureKind,
    ) -> Result<(usize, usize, Vec<f64>)> {
        let spec = self.stft.run(samples)?;
        let (frames, bins) = (spec.frames, spec.bins);
        let dim = kind.dim(&self.cfg);
        let spectral = |f: fn(rustfft::num_complex::Complex<f64>) -> f64| -> Vec<f64> {
            spec.data.iter().map(|&z| f(z)).collect()
        };
        let data = match kind {
            FeatureKind::Mag => spectral(stft::magnitude),
            FeatureKind::Phase => spectral(stft::phase),
            FeatureKind::Power => spectral(stft::power),
            FeatureKind::MagPhase => {
                let mut out = Vec::with_capacity(frames * dim);
                for t in 0..frames {
                    out.extend(spec.row(t).iter().map(|&z| stft::magnitude(z)));
                    out.extend(spec.row(t).iter().map(|&z| stft::phase(z)));
                }
                out
            }
            FeatureKind::Mfcc | FeatureKind::MfccD | FeatureKind::MfccDDd => {
                let transform = self.mfcc_transform(sample_rate);
                let n = transform.n_mfcc();
                let mut ceps = vec![0.0; frames * n];
                let mut power = vec![0.0; bins];
                let mut mel = vec![0.0; transform.mel.n_mels()];
                for t in 0..frames {
                    for (p, z) in power.iter_mut().zip(spec.row(t)) {
                        *p = z.norm_sqr();
                    }
                    transform.apply(&power, &mut mel, &mut ceps[t * n..(t + 1) * n]);
                }
                let mut blocks = vec![ceps];
                for _ in 1..kind.blocks() {
                    let d = deltas::deltas(blocks.last().unwrap(), frames, n);
                    blocks.push(d);
                }
                let mut out = Vec::with_capacity(frames * dim);
                for t in 0..frames {
                    for b in &blocks {
                        out.extend_from_slice(&b[t * n..(t + 1) * n]);
                    }
                }
                out
            }
        };
        debug_assert_eq!(data.len(), frames * dim);
        Ok((frames, dim, data))
    }

    pub fn extract(
        &mut self,
        samples: &[f64],
        sample_rate: u32,
        kind: FeatureKind,
    ) -> Result<FeatureMatrix> {
        let (frames, dim, data) = self.extract_f64(samples, sample_rate, kind)?;
        let mut data: Vec<f32> = data.into_iter().map(|v| v as f32).collect();
        if matches!(kind, FeatureKind::Phase | FeatureKind::MagPhase) {
            // rounding to f32 can land a phase just above -pi on -pi itself
            let pi = std::f32::consts::PI;
            for v in data.iter_mut().filter(|v| **v <= -pi) {
                *v = pi;
            }
        }
        FeatureMatrix::new(kind, frames, dim, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_match_kinds() {
        let cfg = FeatureConfig::default();
        let dims: Vec<usize> = FeatureKind::ALL.iter().map(|k| k.dim(&cfg)).collect();
        assert_eq!(dims, vec![1025, 1025, 2050, 1025, 128, 256, 384]);
        for k in FeatureKind::ALL {
            assert_eq!(k.name().parse::<FeatureKind>().unwrap(), k);
            assert_eq!(FeatureKind::from_code(k.code()), Some(k));
        }
    }

    #[test]
    fn shapes_and_ranges() {
        let mut ex = Extractor::new(FeatureConfig::default()).unwrap();
        let x: Vec<f64> = (0..6000).map(|i| ((i * 7919) % 200) as f64 / 100.0 - 1.0).collect();
        for kind in FeatureKind::ALL {
            let f = ex.extract(&x, 44_100, kind).unwrap();
            assert_eq!(f.frames, 4);
            assert_eq!(f.dim, kind.dim(ex.config()));
            assert!(f.data.iter().all(|v| v.is_finite()));
        }
        let mag = ex.extract(&x, 44_100, FeatureKind::Mag).unwrap();
        let pow = ex.extract_f64(&x, 44_100, FeatureKind::Power).unwrap().2;
        let magd = ex.extract_f64(&x, 44_100, FeatureKind::Mag).unwrap().2;
        assert!(mag.data.iter().all(|&v| v >= 0.0));
        for (p, m) in pow.iter().zip(&magd) {
            assert!((p - m * m).abs() <= 1e-9 * p.max(1.0));
        }
        let ph = ex.extract(&x, 44_100, FeatureKind::Phase).unwrap();
        let pi = std::f32::consts::PI;
        assert!(ph.data.iter().all(|&v| v > -pi && v <= pi));
    }
}
