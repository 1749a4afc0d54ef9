//! Dataset manifest: `path,smos,method,beta,class,split`.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!(
                "unknown split '{s}' (expected train|val|test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    /// As written in the manifest.
    pub path: String,
    /// Resolved against the manifest's directory.
    pub resolved: PathBuf,
    pub smos: f64,
    pub method: String,
    /// Exact tag from the manifest; grouping and exclusions match on it.
    pub beta_tag: String,
    pub beta: f64,
    pub class: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

pub const HEADER: [&str; 6] = ["path", "smos", "method", "beta", "class", "split"];

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let reader = csv::Reader::from_path(path)?;
        Self::parse(reader, &base)
    }

    pub fn parse<R: std::io::Read>(mut reader: csv::Reader<R>, base: &Path) -> Result<Self> {
        let headers = reader.headers()?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Manifest {
                line: 1,
                message: format!("missing column '{name}' (header must be {})", HEADER.join(",")),
            })
        };
        let idx: Vec<usize> = HEADER.iter().map(|h| col(h)).collect::<Result<_>>()?;
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let field = |k: usize| rec.get(idx[k]).map(str::trim).unwrap_or("");
            let err = |message: String| Error::Manifest { line, message };
            let path = field(0).to_string();
            if path.is_empty() {
                return Err(err("empty path".into()));
            }
            if !seen.insert(path.clone()) {
                return Err(err(format!("duplicate path {path}")));
            }
            let smos: f64 = field(1)
                .parse()
                .map_err(|_| err(format!("smos '{}' is not a number", field(1))))?;
            if !(1.0..=5.0).contains(&smos) {
                return Err(err(format!("smos {smos} outside [1, 5]")));
            }
            let beta_tag = field(3).to_string();
            let beta: f64 = beta_tag
                .parse()
                .map_err(|_| err(format!("beta '{beta_tag}' is not a number")))?;
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(err(format!("beta {beta} must be positive")));
            }
            let split = field(5).parse().map_err(|e: Error| err(e.to_string()))?;
            let resolved = {
                let p = PathBuf::from(&path);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            rows.push(ManifestRow {
                path,
                resolved,
                smos,
                method: field(2).to_string(),
                beta_tag,
                beta,
                class: field(4).to_string(),
                split,
            });
        }
        Ok(Manifest { rows })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.path.as_str(),
                &r.smos.to_string(),
                &r.method,
                &r.beta_tag,
                &r.class,
                r.split.name(),
            ])?;
        }
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].split == split).collect()
    }

    /// When no row is marked `val`, move 10% of the training rows (rounded)
    /// to validation: a seeded shuffle within each method, with the per-method
    /// counts allotted by largest remainder so the total is exact. Returns the
    /// number of rows moved.
    pub fn assign_validation(&mut self, seed: u64) -> usize {
        if self.rows.iter().any(|r| r.split == Split::Val) {
            return 0;
        }
        let mut by_method: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            if r.split == Split::Train {
                by_method.entry(r.method.as_str()).or_default().push(i);
            }
        }
        let n: usize = by_method.values().map(Vec::len).sum();
        let total = ((n as f64) / 10.0).round() as usize;
        if total == 0 {
            return 0;
        }
        let mut quotas: Vec<(usize, f64)> = by_method
            .values()
            .map(|v| {
                let exact = v.len() as f64 * total as f64 / n as f64;
                (exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let mut left = total - quotas.iter().map(|q| q.0).sum::<usize>();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
        for &k in &order {
            if left == 0 {
                break;
            }
            quotas[k].0 += 1;
            left -= 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut moved = Vec::new();
        for (group, (quota, _)) in by_method.into_values().zip(quotas) {
            let mut group = group;
            group.shuffle(&mut rng);
            moved.extend_from_slice(&group[group.len() - quota..]);
        }
        for &i in &moved {
            self.rows[i].split = Split::Val;
        }
        moved.len()
    }
}

/// `(smos - 1) / 4`.
pub fn scale_target(smos: f64) -> Result<f64> {
    if !(1.0..=5.0).contains(&smos) {
        return Err(Error::InvalidArgument(format!("SMOS {smos} outside [1, 5]")));
    }
    Ok((smos - 1.0) / 4.0)
}

/// `4 y + 1`, the inverse of [`scale_target`].
pub fn rescale_omos(y: f64) -> f64 {
    4.0 * y + 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Manifest> {
        Manifest::parse(csv::Reader::from_reader(text.as_bytes()), Path::new("/data"))
    }

    #[test]
    fn scale_endpoints() {
        assert_eq!(scale_target(1.0).unwrap(), 0.0);
        assert_eq!(scale_target(3.0).unwrap(), 0.5);
        assert_eq!(scale_target(5.0).unwrap(), 1.0);
        assert!(scale_target(0.5).is_err());
        assert_eq!(rescale_omos(0.5), 3.0);
    }

    #[test]
    fn parses_and_resolves() {
        let m = parse("path,smos,method,beta,class,split\na.wav,3.5,PV,0.5,Voice,train\n/x/b.wav,1,WSOLA,1.0,Solo,test\n").unwrap();
        assert_eq!(m.rows.len(), 2);
        assert_eq!(m.rows[0].resolved, PathBuf::from("/data/a.wav"));
        assert_eq!(m.rows[1].resolved, PathBuf::from("/x/b.wav"));
        assert_eq!(m.rows[1].beta_tag, "1.0");
    }

    #[test]
    fn rejects_bad_rows() {
        let head = "path,smos,method,beta,class,split\n";
        for body in [
            "a.wav,5.5,PV,0.5,Voice,train\n",
            "a.wav,3,PV,0,Voice,train\n",
            "a.wav,3,PV,-1,Voice,train\n",
            "a.wav,3,PV,0.5,Voice,dev\n",
            "a.wav,3,PV,0.5,Voice,train\na.wav,3,PV,0.5,Voice,test\n",
        ] {
            let e = parse(&format!("{head}{body}")).unwrap_err();
            assert!(matches!(e, Error::Manifest { .. }), "{body}: {e}");
        }
        assert!(parse("path,smos\na,3\n").is_err());
    }

    #[test]
    fn validation_is_ten_percent_stratified_and_seeded() {
        let mut text = String::from("path,smos,method,beta,class,split\n");
        for i in 0..73 {
            let method = ["A", "B", "C"][i % 3];
            text.push_str(&format!("f{i}.wav,3,{method},0.5,Voice,train\n"));
        }
        text.push_str("t.wav,3,A,0.5,Voice,test\n");
        let base = parse(&text).unwrap();
        let mut a = base.clone();
        let moved = a.assign_validation(4);
        assert_eq!(moved, 7);
        assert_eq!(a.indices(Split::Val).len(), 7);
        assert_eq!(a.indices(Split::Test).len(), 1);
        for m in ["A", "B", "C"] {
            let k = a.rows.iter().filter(|r| r.split == Split::Val && r.method == m).count();
            assert!((2..=3).contains(&k), "{m}: {k}");
        }
        let mut b = base.clone();
        b.assign_validation(4);
        assert_eq!(a, b);
        let mut c = base;
        c.assign_validation(5);
        assert_ne!(a.indices(Split::Val), c.indices(Split::Val));
        // already assigned: untouched
        assert_eq!(a.assign_validation(9), 0);
    }
}
