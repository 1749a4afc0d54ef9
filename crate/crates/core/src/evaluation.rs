//! Method-comparison statistics over scored predictions: group means with
//! β exclusions, pairwise t-tests with a masked p-value grid, and plot-ready
//! histograms.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, IoContext, Result};
use crate::metrics;

/// One row of a predictions CSV: `file,method,beta,class,omos[,smos]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub file: String,
    pub method: String,
    /// β exactly as tagged in the manifest.
    #[serde(rename = "beta")]
    pub beta_tag: String,
    pub class: String,
    pub omos: f64,
    #[serde(default)]
    pub smos: Option<f64>,
}

impl ScoredPrediction {
    pub fn beta(&self) -> Result<f64> {
        self.beta_tag
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("{}: beta '{}' is not a number", self.file, self.beta_tag)))
    }
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<ScoredPrediction>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize().enumerate() {
        let p: ScoredPrediction = row?;
        let beta = p.beta()?;
        if beta.is_nan() || beta <= 0.0 {
            return Err(Error::Manifest {
                line: i + 2,
                message: format!("beta {beta} must be positive"),
            });
        }
        if !(1.0..=5.0).contains(&p.omos) {
            return Err(Error::Manifest {
                line: i + 2,
                message: format!("omos {} outside [1, 5]", p.omos),
            });
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[ScoredPrediction]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for p in preds {
        w.serialize(p)?;
    }
    w.flush().at(path)
}

/// Which β values are left out of every mean and test.
#[derive(Debug, Clone, PartialEq)]
pub struct Exclusions {
    /// Drop rows tagged exactly 1 (unmodified audio).
    pub unity: bool,
    /// Drop rows whose tag is below this value.
    pub below: Option<f64>,
}

impl Default for Exclusions {
    fn default() -> Self {
        Exclusions {
            unity: true,
            below: Some(0.25),
        }
    }
}

impl Exclusions {
    pub fn none() -> Self {
        Exclusions {
            unity: false,
            below: None,
        }
    }

    pub fn excludes(&self, p: &ScoredPrediction) -> Result<bool> {
        let beta = p.beta()?;
        Ok((self.unity && beta == 1.0) || self.below.is_some_and(|b| beta < b))
    }

    pub fn filter<'a>(&self, preds: &'a [ScoredPrediction]) -> Result<Vec<&'a ScoredPrediction>> {
        let mut kept = Vec::new();
        for p in preds {
            if !self.excludes(p)? {
                kept.push(p);
            }
        }
        if kept.is_empty() {
            return Err(Error::InvalidArgument(
                "no predictions left after the β exclusions".into(),
            ));
        }
        Ok(kept)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMean {
    pub method: String,
    /// `*` marks a marginal over that key.
    pub beta: String,
    pub class: String,
    pub n: usize,
    pub mean: f64,
}

pub const ALL: &str = "*";

/// Mean OMOS per method, β and class, plus per-method, per-method-class and
/// per-method-β marginals, all after exclusions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeansTable {
    pub cells: Vec<GroupMean>,
}

impl MeansTable {
    pub fn get(&self, method: &str, beta: &str, class: &str) -> Option<&GroupMean> {
        self.cells
            .iter()
            .find(|g| g.method == method && g.beta == beta && g.class == class)
    }

    pub fn method_mean(&self, method: &str) -> Option<f64> {
        self.get(method, ALL, ALL).map(|g| g.mean)
    }
}

pub fn aggregate(preds: &[ScoredPrediction], excl: &Exclusions) -> Result<MeansTable> {
    let kept = excl.filter(preds)?;
    // sums in a fixed (sorted) order so results do not depend on row order
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for p in kept {
        let (m, b, c) = (p.method.clone(), p.beta_tag.trim().to_string(), p.class.clone());
        for key in [
            (m.clone(), b.clone(), c.clone()),
            (m.clone(), ALL.into(), c.clone()),
            (m.clone(), b.clone(), ALL.into()),
            (m, ALL.into(), ALL.into()),
        ] {
            groups.entry(key).or_default().push(p.omos);
        }
    }
    let cells = groups
        .into_iter()
        .map(|((method, beta, class), mut v)| {
            v.sort_by(f64::total_cmp);
            GroupMean {
                method,
                beta,
                class,
                n: v.len(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
            }
        })
        .collect();
    Ok(MeansTable { cells })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TestKind {
    /// Unequal variances.
    #[default]
    Welch,
    Pooled,
}

/// Variance floor for the standard error; below it a comparison is flagged
/// degenerate.
pub const VARIANCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodComparison {
    pub a: String,
    pub b: String,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub reject: bool,
    /// Both samples had (near) zero variance; the standard error was floored.
    pub degenerate: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided two-sample t-test.
pub fn t_test(x: &[f64], y: &[f64], kind: TestKind) -> Result<(f64, f64, f64, bool)> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "t-test needs at least 2 samples per group (got {} and {})",
            x.len(),
            y.len()
        )));
    }
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let (m1, v1) = mean_var(x);
    let (m2, v2) = mean_var(y);
    let (se2, df) = match kind {
        TestKind::Welch => {
            let (a, b) = (v1 / n1, v2 / n2);
            let df = (a + b).powi(2) / (a * a / (n1 - 1.0) + b * b / (n2 - 1.0));
            (a + b, df)
        }
        TestKind::Pooled => {
            let sp2 = ((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / (n1 + n2 - 2.0);
            (sp2 * (1.0 / n1 + 1.0 / n2), n1 + n2 - 2.0)
        }
    };
    let degenerate = se2.is_nan() || se2 < VARIANCE_EPS;
    let (se2, df) = if degenerate {
        (VARIANCE_EPS, n1 + n2 - 2.0)
    } else {
        (se2, df)
    };
    let t = (m1 - m2) / se2.sqrt();
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::InvalidArgument(format!("t distribution with {df} dof: {e}")))?;
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok((t, df, p, degenerate))
}

/// Pairwise comparisons of every method with every other (and itself).
#[derive(Debug, Clone, PartialEq)]
pub struct TTestMatrix {
    pub methods: Vec<String>,
    pub alpha: f64,
    /// `cells[i][j]` compares `methods[i]` with `methods[j]`.
    pub cells: Vec<Vec<MethodComparison>>,
}

impl TTestMatrix {
    /// p where the equal-means hypothesis stands (`p > alpha`), else `None`.
    pub fn masked(&self) -> Vec<Vec<Option<f64>>> {
        self.cells
            .iter()
            .map(|row| row.iter().map(|c| (!c.reject).then_some(c.p)).collect())
            .collect()
    }

    pub fn any_degenerate(&self) -> bool {
        self.cells.iter().flatten().any(|c| c.degenerate)
    }
}

/// OMOS samples per method after exclusions, optionally within one class.
pub fn method_samples(
    preds: &[ScoredPrediction],
    excl: &Exclusions,
    class: Option<&str>,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in excl.filter(preds)? {
        if class.is_none_or(|c| c == p.class) {
            out.entry(p.method.clone()).or_default().push(p.omos);
        }
    }
    Ok(out)
}

pub fn ttest_matrix(
    samples: &BTreeMap<String, Vec<f64>>,
    alpha: f64,
    kind: TestKind,
) -> Result<TTestMatrix> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} must lie in (0, 1)")));
    }
    let methods: Vec<String> = samples.keys().cloned().collect();
    let mut cells = Vec::with_capacity(methods.len());
    for a in &methods {
        let mut row = Vec::with_capacity(methods.len());
        for b in &methods {
            let (t, df, p, degenerate) = t_test(&samples[a], &samples[b], kind)
                .map_err(|e| Error::InvalidArgument(format!("{a} vs {b}: {e}")))?;
            row.push(MethodComparison {
                a: a.clone(),
                b: b.clone(),
                t,
                df,
                p,
                reject: a != b && p <= alpha,
                degenerate,
            });
        }
        cells.push(row);
    }
    Ok(TTestMatrix {
        methods,
        alpha,
        cells,
    })
}

/// Equal-width bins over `[1, 5]`; 5 falls in the last bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Bins {
    pub count: usize,
}

impl Bins {
    pub fn with_width(width: f64) -> Result<Self> {
        let count = (4.0 / width).round();
        if width.is_nan() || width <= 0.0 || (count * width - 4.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("bin width {width} must divide 4")));
        }
        Ok(Bins { count: count as usize })
    }

    pub fn width(&self) -> f64 {
        4.0 / self.count as f64
    }

    pub fn lower_edge(&self, i: usize) -> f64 {
        1.0 + i as f64 * self.width()
    }

    pub fn index(&self, score: f64) -> Result<usize> {
        if !(1.0..=5.0).contains(&score) {
            return Err(Error::InvalidArgument(format!("score {score} outside [1, 5]")));
        }
        Ok((((score - 1.0) / self.width()).floor() as usize).min(self.count - 1))
    }
}

/// Total frames per SMOS bin.
pub fn frames_per_mos(rows: impl IntoIterator<Item = (f64, usize)>, bins: &Bins) -> Result<Vec<u64>> {
    let mut mass = vec![0u64; bins.count];
    for (smos, frames) in rows {
        mass[bins.index(smos)?] += frames as u64;
    }
    Ok(mass)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    pub bins: Bins,
    /// `counts[i][j]`: x in bin i, y in bin j.
    pub counts: Vec<Vec<u64>>,
    /// NaN when undefined (fewer than two points or a constant input).
    pub pearson: f64,
}

pub fn omos_confusion(x: &[f64], y: &[f64], bins: &Bins) -> Result<Confusion> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "{} x scores but {} y scores",
            x.len(),
            y.len()
        )));
    }
    let mut counts = vec![vec![0u64; bins.count]; bins.count];
    for (&a, &b) in x.iter().zip(y) {
        counts[bins.index(a)?][bins.index(b)?] += 1;
    }
    Ok(Confusion {
        bins: bins.clone(),
        counts,
        pearson: metrics::pearson(x, y).unwrap_or(f64::NAN),
    })
}

pub fn write_means(path: &Path, table: &MeansTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for g in &table.cells {
        w.serialize(g)?;
    }
    w.flush().at(path)
}

/// Mean OMOS per method and β (the line-plot series), excluded β omitted.
pub fn write_per_beta(path: &Path, table: &MeansTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "beta", "n", "mean"])?;
    for g in table.cells.iter().filter(|g| g.class == ALL && g.beta != ALL) {
        w.write_record([g.method.as_str(), &g.beta, &g.n.to_string(), &g.mean.to_string()])?;
    }
    w.flush().at(path)
}

/// Square grid, header `method,<m1>,...`; rejected cells are blank.
pub fn write_masked_p(path: &Path, m: &TTestMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method".to_string()];
    header.extend(m.methods.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in m.methods.iter().zip(m.masked()) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|p| p.map(|p| p.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush().at(path)
}

pub fn write_comparisons(path: &Path, m: &TTestMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in m.cells.iter().flatten() {
        w.serialize(c)?;
    }
    w.flush().at(path)
}

pub fn write_histogram(path: &Path, bins: &Bins, mass: &[u64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_lo", "bin_hi", "frames"])?;
    for (i, m) in mass.iter().enumerate() {
        w.write_record([
            bins.lower_edge(i).to_string(),
            bins.lower_edge(i + 1).to_string(),
            m.to_string(),
        ])?;
    }
    w.flush().at(path)
}

pub fn write_confusion(path: &Path, c: &Confusion) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x_lo", "y_lo", "count"])?;
    for (i, row) in c.counts.iter().enumerate() {
        for (j, n) in row.iter().enumerate() {
            w.write_record([
                c.bins.lower_edge(i).to_string(),
                c.bins.lower_edge(j).to_string(),
                n.to_string(),
            ])?;
        }
    }
    w.flush().at(path)
}
