/// Half-width of the regression window (frames `t-4 ..= t+4`).
pub const DELTA_HALF_WIDTH: usize = 4;

/// Regression deltas over time for a row-major `frames x dim` matrix,
/// `sum_k k (c[t+k] - c[t-k]) / (2 sum_k k^2)`, with out-of-range frames
/// replaced by the nearest edge frame.
pub fn deltas(data: &[f64], frames: usize, dim: usize) -> Vec<f64> {
    let n = DELTA_HALF_WIDTH as isize;
    let denom: f64 = 2.0 * (1..=n).map(|k| (k * k) as f64).sum::<f64>();
    let clamp = |t: isize| t.clamp(0, frames as isize - 1) as usize;
    let mut out = vec![0.0; frames * dim];
    for t in 0..frames as isize {
        let row = &mut out[t as usize * dim..(t as usize + 1) * dim];
        for k in 1..=n {
            let next = &data[clamp(t + k) * dim..][..dim];
            let prev = &data[clamp(t - k) * dim..][..dim];
            for ((o, a), b) in row.iter_mut().zip(next).zip(prev) {
                *o += k as f64 * (a - b);
            }
        }
        for o in row.iter_mut() {
            *o /= denom;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_features_have_zero_deltas() {
        let data = vec![3.5; 12 * 4];
        assert!(deltas(&data, 12, 4).iter().all(|&d| d == 0.0));
    }

    #[test]
    fn linear_ramp_recovers_slope_in_interior() {
        let m = 0.75;
        let frames = 20;
        let data: Vec<f64> = (0..frames).flat_map(|t| [m * t as f64, -2.0 * t as f64]).collect();
        let d = deltas(&data, frames, 2);
        for t in 4..frames - 4 {
            assert!((d[t * 2] - m).abs() < 1e-12);
            assert!((d[t * 2 + 1] + 2.0).abs() < 1e-12);
        }
        // replication flattens the edges
        assert!(d[0] < m);
    }

    #[test]
    fn single_frame() {
        assert_eq!(deltas(&[1.0, 2.0], 1, 2), vec![0.0, 0.0]);
    }
}
