//! Slaney-style mel scale (linear below 1 kHz, logarithmic above) with
//! area-normalized triangular filters.

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    } else {
        mel * F_SP
    }
}

/// One triangular filter stored over its nonzero support.
#[derive(Debug, Clone)]
pub struct MelFilter {
    pub start: usize,
    pub weights: Vec<f64>,
    pub center_hz: f64,
}

#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub filters: Vec<MelFilter>,
    pub bins: usize,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Self {
        let bins = n_fft / 2 + 1;
        let sr = sample_rate as f64;
        let fft_hz: Vec<f64> = (0..bins).map(|k| k as f64 * sr / n_fft as f64).collect();
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let filters = (0..n_mels)
            .map(|i| {
                let (left, centre, right) = (edges[i], edges[i + 1], edges[i + 2]);
                let norm = 2.0 / (right - left);
                let full: Vec<f64> = fft_hz
                    .iter()
                    .map(|&f| {
                        let rise = (f - left) / (centre - left);
                        let fall = (right - f) / (right - centre);
                        rise.min(fall).max(0.0) * norm
                    })
                    .collect();
                let start = full.iter().position(|&w| w > 0.0).unwrap_or(0);
                let end = full.iter().rposition(|&w| w > 0.0).map_or(start, |e| e + 1);
                MelFilter {
                    start,
                    weights: full[start..end].to_vec(),
                    center_hz: centre,
                }
            })
            .collect();
        MelFilterbank { filters, bins }
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    /// Dense `n_mels x bins` weight matrix.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        self.filters
            .iter()
            .map(|f| {
                let mut row = vec![0.0; self.bins];
                row[f.start..f.start + f.weights.len()].copy_from_slice(&f.weights);
                row
            })
            .collect()
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.filters) {
            *o = f
                .weights
                .iter()
                .zip(&power[f.start..f.start + f.weights.len()])
                .map(|(w, p)| w * p)
                .sum();
        }
    }
}
