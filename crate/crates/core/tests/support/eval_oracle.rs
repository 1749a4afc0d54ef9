//! Brute-force reference for the method-comparison harness on a small
//! handcrafted table. The t distribution tail is integrated numerically from
//! its density, independent of any statistics library.
#![allow(dead_code)]

use std::collections::BTreeMap;

use omoq::evaluation::{self, Exclusions, ScoredPrediction, TestKind};

pub const TOL: f64 = 1e-9;

fn row(method: &str, beta: &str, class: &str, omos: f64) -> ScoredPrediction {
    ScoredPrediction {
        file: format!("{method}_{beta}_{class}_{omos}"),
        method: method.into(),
        beta_tag: beta.into(),
        class: class.into(),
        omos,
        smos: None,
    }
}

/// Three methods, two kept β values, two classes; no excluded rows.
pub fn table() -> Vec<ScoredPrediction> {
    let mut v = Vec::new();
    let scores = [
        ("A", [3.1, 3.4, 2.9, 3.6, 3.3, 3.0, 3.2, 3.5]),
        ("B", [2.2, 2.6, 2.4, 2.9, 2.1, 2.5, 2.8, 2.3]),
        ("C", [3.0, 3.7, 2.8, 3.3, 3.6, 2.7, 3.1, 3.4]),
    ];
    for (m, s) in scores {
        for (i, &x) in s.iter().enumerate() {
            let beta = ["0.5", "1.5"][i % 2];
            let class = ["Voice", "Solo"][(i / 2) % 2];
            v.push(row(m, beta, class, x));
        }
    }
    v
}

/// Rows every default exclusion must drop, with extreme scores.
pub fn poison() -> Vec<ScoredPrediction> {
    let mut v = Vec::new();
    for m in ["A", "B", "C"] {
        v.push(row(m, "1", "Voice", 5.0));
        v.push(row(m, "0.2257", "Solo", 1.0));
        v.push(row(m, "0.1", "Voice", 1.0));
    }
    v
}

const EXCLUDED_TAGS: [&str; 3] = ["1", "0.2257", "0.1"];

fn kept(rows: &[ScoredPrediction]) -> Vec<&ScoredPrediction> {
    rows.iter().filter(|r| !EXCLUDED_TAGS.contains(&r.beta_tag.as_str())).collect()
}

fn mean(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    s / v.len() as f64
}

fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    let mut s = 0.0;
    for x in v {
        s += (x - m) * (x - m);
    }
    s / (v.len() as f64 - 1.0)
}

/// Lanczos approximation (g = 7, 9 terms).
fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Two-sided p-value: `1 - 2 * integral of the density over [0, |t|]`.
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    let c = (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0)).exp() / (df * std::f64::consts::PI).sqrt();
    let f = |x: f64| c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    let n = 200_000;
    let h = t.abs() / n as f64;
    let mut s = f(0.0) + f(t.abs());
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    (1.0 - 2.0 * s * h / 3.0).clamp(0.0, 1.0)
}

/// `(t, df, p)` for Welch's test.
pub fn welch(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (a, b) = (var(x) / x.len() as f64, var(y) / y.len() as f64);
    let t = (mean(x) - mean(y)) / (a + b).sqrt();
    let df = (a + b) * (a + b) / (a * a / (x.len() as f64 - 1.0) + b * b / (y.len() as f64 - 1.0));
    (t, df, two_sided_p(t, df))
}

/// Largest absolute deviation between harness and reference over every group
/// mean and every t-test cell, computed on the table plus poisoned rows.
/// `Err` on any structural mismatch or a rejected self-comparison.
pub fn run() -> Result<f64, String> {
    let clean = table();
    let mut all = clean.clone();
    all.extend(poison());
    // interleave so the poisoned rows are not simply a suffix
    all.sort_by(|a, b| a.file.cmp(&b.file));

    let harness = evaluation::aggregate(&all, &Exclusions::default()).map_err(|e| e.to_string())?;
    let rows = kept(&all);
    if rows.len() != clean.len() {
        return Err(format!("oracle kept {} rows, expected {}", rows.len(), clean.len()));
    }
    let mut worst = 0.0f64;
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        for (b, c) in [
            (r.beta_tag.clone(), r.class.clone()),
            ("*".into(), r.class.clone()),
            (r.beta_tag.clone(), "*".into()),
            ("*".into(), "*".into()),
        ] {
            groups.entry((r.method.clone(), b, c)).or_default().push(r.omos);
        }
    }
    if groups.len() != harness.cells.len() {
        return Err(format!("{} groups vs {} harness cells", groups.len(), harness.cells.len()));
    }
    for ((m, b, c), v) in &groups {
        let got = harness
            .get(m, b, c)
            .ok_or_else(|| format!("harness lacks group {m}/{b}/{c}"))?;
        if got.n != v.len() {
            return Err(format!("{m}/{b}/{c}: n {} vs {}", got.n, v.len()));
        }
        worst = worst.max((got.mean - mean(v)).abs());
    }
    // poisoned rows must not move anything
    let unpoisoned = evaluation::aggregate(&clean, &Exclusions::default()).map_err(|e| e.to_string())?;
    for (a, b) in harness.cells.iter().zip(&unpoisoned.cells) {
        if a.n != b.n || a.mean != b.mean {
            return Err(format!("excluded rows changed {}/{}/{}", a.method, a.beta, a.class));
        }
    }

    let samples = evaluation::method_samples(&all, &Exclusions::default(), None).map_err(|e| e.to_string())?;
    let matrix = evaluation::ttest_matrix(&samples, 0.05, TestKind::Welch).map_err(|e| e.to_string())?;
    let mut per_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        per_method.entry(r.method.as_str()).or_default().push(r.omos);
    }
    for (i, a) in matrix.methods.iter().enumerate() {
        for (j, b) in matrix.methods.iter().enumerate() {
            let cell = &matrix.cells[i][j];
            let (x, y) = (&per_method[a.as_str()], &per_method[b.as_str()]);
            if i == j {
                if cell.reject || (cell.p - 1.0).abs() > TOL || cell.t != 0.0 {
                    return Err(format!("{a} vs itself: t {} p {} reject {}", cell.t, cell.p, cell.reject));
                }
                continue;
            }
            let (t, df, p) = welch(x, y);
            worst = worst.max((cell.t - t).abs()).max((cell.df - df).abs()).max((cell.p - p).abs());
            if cell.reject != (p <= 0.05) {
                return Err(format!("{a} vs {b}: reject {} but p {p}", cell.reject));
            }
            if cell.p != matrix.cells[j][i].p {
                return Err(format!("{a} vs {b}: matrix not symmetric"));
            }
        }
    }
    Ok(worst)
}
