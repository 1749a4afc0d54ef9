use super::mel::MelFilterbank;

pub const LOG_FLOOR: f64 = 1e-10;

/// Orthonormal DCT-II basis, `n_out x n_in`, row `k` is
/// `s_k cos(pi k (2n + 1) / (2 n_in))`.
pub fn dct2_matrix(n_out: usize, n_in: usize) -> Vec<Vec<f64>> {
    let nf = n_in as f64;
    (0..n_out)
        .map(|k| {
            let s = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            (0..n_in)
                .map(|n| {
                    s * (std::f64::consts::PI * k as f64 * (2 * n + 1) as f64 / (2.0 * nf)).cos()
                })
                .collect()
        })
        .collect()
}

/// Power spectrum row to cepstral coefficients: mel energies, natural log
/// with floor, DCT-II.
pub struct MfccTransform {
    pub mel: MelFilterbank,
    dct: Vec<Vec<f64>>,
}

impl MfccTransform {
    pub fn new(mel: MelFilterbank, n_mfcc: usize) -> Self {
        let dct = dct2_matrix(n_mfcc, mel.n_mels());
        MfccTransform { mel, dct }
    }

    pub fn n_mfcc(&self) -> usize {
        self.dct.len()
    }

    pub fn apply(&self, power: &[f64], mel_buf: &mut [f64], out: &mut [f64]) {
        self.mel.apply(power, mel_buf);
        for e in mel_buf.iter_mut() {
            *e = (*e + LOG_FLOOR).ln();
        }
        for (o, basis) in out.iter_mut().zip(&self.dct) {
            *o = basis.iter().zip(mel_buf.iter()).map(|(b, e)| b * e).sum();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dct_is_orthonormal() {
        let m = dct2_matrix(128, 128);
        for i in 0..128 {
            for j in 0..128 {
                let dot: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "({i},{j}) = {dot}");
            }
        }
    }

    #[test]
    fn silent_frame_is_finite() {
        let t = MfccTransform::new(MelFilterbank::new(128, 2048, 44_100, 0.0, 22_050.0), 128);
        let mut mel = vec![0.0; 128];
        let mut out = vec![0.0; 128];
        t.apply(&vec![0.0; 1025], &mut mel, &mut out);
        assert!(out.iter().all(|v| v.is_finite()));
        // constant log energies put everything in the zeroth coefficient
        assert!((out[0] - LOG_FLOOR.ln() * 128f64.sqrt()).abs() < 1e-9);
        assert!(out[1..].iter().all(|v| v.abs() < 1e-9));
    }
}
