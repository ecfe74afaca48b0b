//! Binary checkpoint: `MMTA`, u32 version, u32 tensor count, then per tensor a
//! u16-prefixed name, u8 rank, u64 dims and f32 data, all little-endian; a
//! u32-prefixed JSON metadata block closes the file.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Phase, TrainError};
use crate::model::{ModelConfig, MuMTAffect};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMTA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub phase: Option<Phase>,
    pub epoch: usize,
    pub seed: u64,
    pub best_val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Snapshot of every parameter and buffer of `model`.
    pub fn capture(model: &MuMTAffect, phase: Option<Phase>, epoch: usize, seed: u64, best: Option<f64>) -> Self {
        Self {
            tensors: model
                .params
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.tensor.clone()))
                .collect(),
            meta: CheckpointMeta {
                config: model.cfg.clone(),
                phase,
                epoch,
                seed,
                best_val_loss: best.filter(|v| v.is_finite()),
            },
        }
    }

    /// Copies the tensors into `model`. Every mismatch is reported at once.
    pub fn restore_into(&self, model: &mut MuMTAffect) -> Result<(), TrainError> {
        let mut problems = Vec::new();
        for (name, t) in &self.tensors {
            match model.params.id(name) {
                None => problems.push(format!("{name}: not in model")),
                Some(id) if model.params.get(id).shape() != t.shape() => problems.push(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )),
                Some(_) => {}
            }
        }
        for e in model.params.entries() {
            if !self.tensors.iter().any(|(n, _)| *n == e.name) {
                problems.push(format!("{}: missing from checkpoint", e.name));
            }
        }
        if !problems.is_empty() {
            return Err(TrainError::Mismatch(problems));
        }
        for (name, t) in &self.tensors {
            let id = model.params.id(name).expect("checked above");
            *model.params.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Builds a fresh model from the stored config and loads the tensors.
    pub fn to_model(&self) -> Result<MuMTAffect, TrainError> {
        let mut m = MuMTAffect::new(self.meta.config.clone(), self.meta.seed)?;
        self.restore_into(&mut m)?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| TrainError::Format(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            let rank = u8::try_from(t.rank()).map_err(|_| TrainError::Format(format!("rank too large: {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&self.meta).map_err(|e| TrainError::Format(e.to_string()))?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(TrainError::Format("bad magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TrainError::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| TrainError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= (bytes.len() - r.pos) / 4)
                .ok_or_else(|| TrainError::Format(format!("truncated data for tensor {name}")))?;
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| TrainError::Format(e.to_string()))?;
            tensors.push((name, t));
        }
        let len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(len)?)
            .map_err(|e| TrainError::Format(format!("metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(TrainError::Format(format!(
                "{} trailing bytes after metadata",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TrainError::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
