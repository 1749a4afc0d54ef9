//! Versioned binary checkpoint.
//!
//! Layout, little-endian: `magic[8] version:u32 meta_len:u32 meta(JSON)`,
//! then two array sections (parameters, then batch-norm buffers), each
//! `count:u32` followed by `name_len:u32 name ndim:u32 dims:u32* data:f32*`.

use std::path::Path;

use omoq_autograd::{BatchNormState, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::audio::SilenceRule;
use crate::error::{Error, IoContext, Result};
use crate::features::{FeatureConfig, FeatureKind, StandardizationStats};
use crate::training::SegmentPolicy;

pub const MAGIC: &[u8; 8] = b"OMQCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub feature_kind: FeatureKind,
    pub feature_config: FeatureConfig,
    pub silence_rule: SilenceRule,
    pub standardization: StandardizationStats,
    pub segment_policy: SegmentPolicy,
    /// Dataset minimum frame count: the window length of truncating policies.
    pub min_frames: usize,
    /// Dataset maximum frame count: the tiling target of `repeat_to_max`.
    pub max_frames: usize,
    /// Windows averaged at inference under truncating policies.
    pub eval_segments: usize,
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    pub bn: Vec<BatchNormState<f32>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn array(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        self.u32(name.len());
        self.0.extend_from_slice(name.as_bytes());
        self.u32(shape.len());
        for &d in shape {
            self.u32(d);
        }
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn array(&mut self) -> Result<(String, Tensor<f32>)> {
        let n = self.u32()?;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let ndim = self.u32()?;
        let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = self
            .take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("bad shape".into()))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, meta: CheckpointMeta) -> Self {
        Checkpoint {
            meta,
            params: model.params.clone(),
            bn: model.bn.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.u32(meta.len());
        w.0.extend_from_slice(&meta);
        w.u32(self.params.len());
        for (_, name, t) in self.params.iter() {
            w.array(name, t.shape(), t.data());
        }
        w.u32(self.bn.len() * 2);
        for (i, st) in self.bn.iter().enumerate() {
            let c = st.channels();
            w.array(&format!("bn{i}.running_mean"), &[c], &st.running_mean);
            w.array(&format!("bn{i}.running_var"), &[c], &st.running_var);
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {VERSION}"
            )));
        }
        let meta_len = r.u32()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let (name, t) = r.array()?;
            params.insert(name, t);
        }
        let n_buffers = r.u32()?;
        if n_buffers % 2 != 0 {
            return Err(Error::Checkpoint("unpaired batch-norm buffers".into()));
        }
        let mut bn = Vec::new();
        for i in 0..n_buffers / 2 {
            let (mean_name, mean) = r.array()?;
            let (var_name, var) = r.array()?;
            if mean_name != format!("bn{i}.running_mean") || var_name != format!("bn{i}.running_var")
            {
                return Err(Error::Checkpoint(format!("unexpected buffers {mean_name}, {var_name}")));
            }
            let mut st = BatchNormState::new(mean.numel());
            st.running_mean = mean.into_data();
            st.running_var = var.into_data();
            bn.push(st);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { meta, params, bn })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).at(&tmp)?;
        std::fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).at(path)?)
    }

    pub fn require_kind(&self, kind: FeatureKind) -> Result<()> {
        if self.meta.feature_kind != kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on {} features, got {kind}",
                self.meta.feature_kind
            )));
        }
        Ok(())
    }

    /// Rebuild the model, checking every parameter name and shape against
    /// the stored architecture.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Model::<f32>::init(self.meta.spec.clone(), &mut rng)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, architecture has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (_, name, t) in self.params.iter() {
            model
                .params
                .set(name, t.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if model.bn.len() != self.bn.len()
            || model.bn.iter().zip(&self.bn).any(|(a, b)| a.channels() != b.channels())
        {
            return Err(Error::Checkpoint("batch-norm buffers do not match architecture".into()));
        }
        model.bn = self.bn.clone();
        Ok(model)
    }
}
