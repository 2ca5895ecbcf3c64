use std::path::Path;

use super::optim::AdamW;
use super::{TrainConfig, TrainError};
use crate::codec::NormalizerStats;
use crate::model::Model;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XWCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamW,
    /// Number of completed training steps.
    pub step: usize,
    pub config: TrainConfig,
    pub stats: NormalizerStats,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn f32s(&mut self, xs: &[f32]) {
        self.u64(xs.len() as u64);
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {} (need {n} more)", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn len(&mut self, unit: usize) -> Result<usize, String> {
        let n = self.u64()? as usize;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(format!("length {n} at byte {} exceeds the file", self.pos - 8));
        }
        Ok(n)
    }

    fn bytes(&mut self) -> Result<&'a [u8], String> {
        let n = self.len(1)?;
        self.take(n)
    }

    fn f32s(&mut self) -> Result<Vec<f32>, String> {
        let n = self.len(4)?;
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect())
    }
}

impl Checkpoint {
    /// Magic, version, then length-prefixed little-endian parameter
    /// name/shape/data triples, both Adam moments per parameter, the update
    /// count, the step, and the JSON-encoded config and normalizer.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let p = &self.model.params;
        w.u64(p.len() as u64);
        for (name, t) in p.names.iter().zip(&p.tensors) {
            w.bytes(name.as_bytes());
            w.u64(t.shape().len() as u64);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f32s(t.data());
        }
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            w.f32s(m);
            w.f32s(v);
        }
        w.u64(self.optimizer.t);
        w.0.extend_from_slice(&self.optimizer.weight_decay.to_le_bytes());
        w.u64(self.step as u64);
        w.bytes(serde_json::to_string(&self.config).expect("config serializes").as_bytes());
        w.bytes(serde_json::to_string(&self.stats).expect("stats serialize").as_bytes());
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("two bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let n = r.len(1)?;
        let mut named = Vec::with_capacity(n);
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| "parameter name is not UTF-8".to_string())?;
            let rank = r.len(8)?;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let data = r.f32s()?;
            let t = Tensor::new(&shape, data).map_err(|e| format!("parameter {name}: {e}"))?;
            named.push((name, t));
        }
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            m.push(r.f32s()?);
            v.push(r.f32s()?);
        }
        let t = r.u64()?;
        let weight_decay = f64::from_le_bytes(r.take(8)?.try_into().expect("eight bytes"));
        let step = r.u64()? as usize;
        let config: TrainConfig = serde_json::from_slice(r.bytes()?).map_err(|e| format!("config: {e}"))?;
        let stats: NormalizerStats = serde_json::from_slice(r.bytes()?).map_err(|e| format!("normalizer: {e}"))?;
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }

        let mut model = Model::new(config.model, 0).map_err(|e| e.to_string())?;
        if named.iter().any(|(name, _)| name.starts_with("depth.")) {
            model.init_depth_branch(config.model.depth_blocks, 0).map_err(|e| e.to_string())?;
        }
        if model.params.names.len() != n {
            return Err(format!("{n} stored parameters, configuration expects {}", model.params.names.len()));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if model.params.names[i] != name || model.params.tensors[i].shape() != t.shape() {
                return Err(format!("parameter {i} ({name}) does not match the configured model"));
            }
            if m[i].len() != t.len() || v[i].len() != t.len() {
                return Err(format!("optimizer moments of {name} have the wrong length"));
            }
            model.params.tensors[i] = t;
        }
        Ok(Self { model, optimizer: AdamW { weight_decay, t, m, v }, step, config, stats })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.encode()).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        Self::decode(&bytes).map_err(|reason| TrainError::Checkpoint { path: path.to_path_buf(), reason })
    }
}
