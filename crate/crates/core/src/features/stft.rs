use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_length: usize,
    pub hop: usize,
    /// Zero-pad `frame_length / 2` samples on both sides before framing.
    pub center: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            frame_length: 2048,
            hop: 1024,
            center: false,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.frame_length.is_power_of_two() || self.frame_length < 2 {
            return Err(Error::InvalidArgument(format!(
                "frame length {} is not a power of two",
                self.frame_length
            )));
        }
        if self.hop == 0 || self.hop > self.frame_length {
            return Err(Error::InvalidArgument(format!(
                "hop {} must be in 1..={}",
                self.hop, self.frame_length
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.frame_length / 2 + 1
    }

    /// `1 + floor((len - N) / hop)` on the (possibly padded) signal.
    pub fn frame_count(&self, len: usize) -> Result<usize> {
        let padded = if self.center { len + self.frame_length } else { len };
        if padded < self.frame_length {
            return Err(Error::TooShort {
                len,
                frame: self.frame_length,
            });
        }
        Ok(1 + (padded - self.frame_length) / self.hop)
    }
}

/// Periodic Hann window, `0.5 - 0.5 cos(2 pi n / N)`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Complex spectra, `L` rows of `N/2 + 1` bins.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn row(&self, t: usize) -> &[Complex<f64>] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.frame_length);
        Ok(Stft {
            cfg,
            window: hann_periodic(cfg.frame_length),
            fft,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn run(&self, samples: &[f64]) -> Result<Spectrogram> {
        let n = self.cfg.frame_length;
        let frames = self.cfg.frame_count(samples.len())?;
        let padded;
        let signal = if self.cfg.center {
            let mut p = vec![0.0; samples.len() + n];
            p[n / 2..n / 2 + samples.len()].copy_from_slice(samples);
            padded = p;
            &padded[..]
        } else {
            samples
        };
        let bins = self.cfg.bins();
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let frame = &signal[t * self.cfg.hop..t * self.cfg.hop + n];
            for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(x * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf[..bins]);
        }
        Ok(Spectrogram { frames, bins, data })
    }
}

pub fn magnitude(z: Complex<f64>) -> f64 {
    z.norm()
}

pub fn power(z: Complex<f64>) -> f64 {
    z.norm_sqr()
}

/// Principal value in `(-pi, pi]`.
pub fn phase(z: Complex<f64>) -> f64 {
    let p = z.im.atan2(z.re);
    if p <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        p
    }
}
