//! RMSE, Pearson correlation and the overall-distance measure used to pick
//! the best epoch and seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {} differ", a.len(), b.len())));
    }
    if a.len() < min {
        return Err(Error::InvalidArgument(format!(
            "need at least {min} values, got {}",
            a.len()
        )));
    }
    Ok(())
}

pub fn rmse(est: &[f64], tgt: &[f64]) -> Result<f64> {
    check_pair(est, tgt, 1)?;
    let mse = est.iter().zip(tgt).map(|(e, t)| (e - t) * (e - t)).sum::<f64>() / est.len() as f64;
    Ok(mse.sqrt())
}

/// Sample Pearson correlation. Constant input is an error, not zero.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("correlation undefined for constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation and RMSE (on the 1 to 5 scale) for train, validation, test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub rho: [f64; 3],
    pub loss: [f64; 3],
}

fn norm2(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

fn mean3(v: &[f64; 3]) -> f64 {
    (v[0] + v[1] + v[2]) / 3.0
}

fn spread(v: &[f64; 3]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

impl SplitMetrics {
    /// `||[1 - mean(rho), max(rho) - min(rho)]||`
    pub fn rho_hat(&self) -> f64 {
        norm2(1.0 - mean3(&self.rho), spread(&self.rho))
    }

    /// `||[mean(L), max(L) - min(L)]||`
    pub fn loss_hat(&self) -> f64 {
        norm2(mean3(&self.loss), spread(&self.loss))
    }

    /// `||[rho_hat, loss_hat]||`; NaN inputs give +inf so undefined
    /// correlations never win selection.
    pub fn overall_distance(&self) -> f64 {
        let d = norm2(self.rho_hat(), self.loss_hat());
        if d.is_nan() {
            f64::INFINITY
        } else {
            d
        }
    }
}

pub fn overall_distance(m: &SplitMetrics) -> f64 {
    m.overall_distance()
}

/// One row of a selection report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub seed: u64,
    pub epoch: usize,
    pub metrics: SplitMetrics,
}

impl Candidate {
    pub fn distance(&self) -> f64 {
        self.metrics.overall_distance()
    }
}

/// Minimum distance; ties go to the earliest epoch, then the lowest seed.
pub fn select_best(candidates: &[Candidate]) -> Result<Candidate> {
    candidates
        .iter()
        .copied()
        .min_by(|a, b| {
            a.distance()
                .total_cmp(&b.distance())
                .then(a.epoch.cmp(&b.epoch))
                .then(a.seed.cmp(&b.seed))
        })
        .ok_or_else(|| Error::InvalidArgument("no epochs to select from".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub seed: u64,
    pub epoch: usize,
    pub rho_tr: f64,
    pub rho_val: f64,
    pub rho_te: f64,
    #[serde(rename = "L_tr")]
    pub l_tr: f64,
    #[serde(rename = "L_val")]
    pub l_val: f64,
    #[serde(rename = "L_te")]
    pub l_te: f64,
    #[serde(rename = "D")]
    pub d: f64,
}

impl From<&Candidate> for ReportRow {
    fn from(c: &Candidate) -> Self {
        let m = &c.metrics;
        ReportRow {
            seed: c.seed,
            epoch: c.epoch,
            rho_tr: m.rho[0],
            rho_val: m.rho[1],
            rho_te: m.rho[2],
            l_tr: m.loss[0],
            l_val: m.loss[1],
            l_te: m.loss[2],
            d: c.distance(),
        }
    }
}

/// Note written next to every selection result: the distance includes the
/// test split, so the chosen model has seen test-set feedback.
pub const TEST_SELECTION_NOTE: &str =
    "selection uses test-split metrics; reported test scores are not held out";

pub fn write_report(path: &std::path::Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

pub fn read_report(path: &std::path::Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

impl From<&ReportRow> for Candidate {
    fn from(r: &ReportRow) -> Self {
        Candidate {
            seed: r.seed,
            epoch: r.epoch,
            metrics: SplitMetrics {
                rho: [r.rho_tr, r.rho_val, r.rho_te],
                loss: [r.l_tr, r.l_val, r.l_te],
            },
        }
    }
}
