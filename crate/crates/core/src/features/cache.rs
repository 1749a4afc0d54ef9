//! On-disk feature cache: one binary blob per (clip, kind) plus a CSV index.
//!
//! Blob layout, little-endian:
//! `magic[8] version:u32 kind:u8 dtype:u8 pad:u16 frames:u32 dim:u32
//! source_mtime_ns:u64 source_sha256[32] config_sha256[32]` followed by
//! `frames * dim` f32 values in row-major order.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use sha2::{Digest, Sha256};

use super::{Extractor, FeatureKind, FeatureMatrix};
use crate::audio::{load_clip, SilenceRule};
use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"OMQFEAT\0";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 4 + 4 + 8 + 32 + 32;

pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Computed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlobHeader {
    pub kind: FeatureKind,
    pub frames: usize,
    pub dim: usize,
    pub source_mtime_ns: u64,
    pub source_sha256: [u8; 32],
    pub config_sha256: [u8; 32],
}

pub fn encode_blob(header: &BlobHeader, data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(header.kind.code());
    out.push(DTYPE_F32);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(header.frames as u32).to_le_bytes());
    out.extend_from_slice(&(header.dim as u32).to_le_bytes());
    out.extend_from_slice(&header.source_mtime_ns.to_le_bytes());
    out.extend_from_slice(&header.source_sha256);
    out.extend_from_slice(&header.config_sha256);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_header(bytes: &[u8]) -> Result<BlobHeader> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Cache("not a feature blob".into()));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != VERSION {
        return Err(Error::Cache(format!("blob version {version}, expected {VERSION}")));
    }
    let kind = FeatureKind::from_code(bytes[12])
        .ok_or_else(|| Error::Cache(format!("unknown kind code {}", bytes[12])))?;
    if bytes[13] != DTYPE_F32 {
        return Err(Error::Cache(format!("unknown dtype {}", bytes[13])));
    }
    Ok(BlobHeader {
        kind,
        frames: u32_at(16) as usize,
        dim: u32_at(20) as usize,
        source_mtime_ns: u64::from_le_bytes(bytes[24..32].try_into().unwrap()),
        source_sha256: bytes[32..64].try_into().unwrap(),
        config_sha256: bytes[64..96].try_into().unwrap(),
    })
}

pub fn decode_blob(bytes: &[u8]) -> Result<(BlobHeader, FeatureMatrix)> {
    let header = decode_header(bytes)?;
    let n = header.frames * header.dim;
    let body = &bytes[HEADER_LEN..];
    if body.len() != n * 4 {
        return Err(Error::Cache(format!(
            "blob body has {} bytes, header says {} values",
            body.len(),
            n
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let fm = FeatureMatrix::new(header.kind, header.frames, header.dim, data)?;
    Ok((header, fm))
}

pub fn read_blob(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).at(path)?;
    Ok(decode_blob(&bytes)?.1)
}

fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

fn mtime_ns(path: &Path) -> Result<u64> {
    let modified = fs::metadata(path).and_then(|m| m.modified()).at(path)?;
    Ok(modified
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0))
}

pub struct FeatureCache {
    dir: PathBuf,
    config_sha256: [u8; 32],
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>, extractor: &Extractor, rule: SilenceRule) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).at(&dir)?;
        let key = format!("{};trim={:?}", extractor.config().fingerprint(), rule);
        Ok(FeatureCache {
            dir,
            config_sha256: sha256(key.as_bytes()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Blob location for a source file: readable stem plus a digest of the
    /// full path so equal file names in different folders do not collide.
    pub fn blob_path(&self, source: &Path, kind: FeatureKind) -> PathBuf {
        let digest = sha256(source.to_string_lossy().as_bytes());
        let stem = source
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.dir
            .join(format!("{stem}-{}.{}.omqf", &hex::encode(digest)[..12], kind))
    }

    /// Returns cached features when the blob matches the source's mtime (or,
    /// failing that, its content hash) and the extraction settings.
    pub fn load_or_compute(
        &self,
        source: &Path,
        kind: FeatureKind,
        extractor: &mut Extractor,
        rule: SilenceRule,
    ) -> Result<(FeatureMatrix, CacheOutcome)> {
        let blob = self.blob_path(source, kind);
        let mtime = mtime_ns(source)?;
        let mut source_hash = None;
        if let Ok(bytes) = fs::read(&blob) {
            if let Ok((header, fm)) = decode_blob(&bytes) {
                let same_config = header.config_sha256 == self.config_sha256 && header.kind == kind;
                if same_config && header.source_mtime_ns == mtime {
                    return Ok((fm, CacheOutcome::Hit));
                }
                if same_config {
                    let h = sha256(&fs::read(source).at(source)?);
                    if h == header.source_sha256 {
                        return Ok((fm, CacheOutcome::Hit));
                    }
                    source_hash = Some(h);
                }
            }
        }
        let source_sha256 = match source_hash {
            Some(h) => h,
            None => sha256(&fs::read(source).at(source)?),
        };
        let clip = load_clip(source, rule)?;
        let fm = extractor.extract(&clip.samples, clip.sample_rate, kind)?;
        let header = BlobHeader {
            kind,
            frames: fm.frames,
            dim: fm.dim,
            source_mtime_ns: mtime,
            source_sha256,
            config_sha256: self.config_sha256,
        };
        let tmp = blob.with_extension("omqf.tmp");
        fs::write(&tmp, encode_blob(&header, &fm.data)).at(&tmp)?;
        fs::rename(&tmp, &blob).at(&blob)?;
        Ok((fm, CacheOutcome::Computed))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct IndexRow {
    pub path: String,
    pub kind: String,
    #[serde(rename = "L")]
    pub frames: usize,
    #[serde(rename = "D_F")]
    pub dim: usize,
}

pub fn write_index(dir: &Path, rows: &[IndexRow]) -> Result<()> {
    let path = dir.join(INDEX_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(&path)?;
    Ok(())
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexRow>> {
    let mut r = csv::Reader::from_path(dir.join(INDEX_FILE))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
