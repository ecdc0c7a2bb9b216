//! Binary checkpoint format.
//!
//! ```text
//! "PFTF" | version u32 | header_len u64 | header (TOML)
//! per tensor: name_len u32 | name | rank u32 | dims u64 × rank | f32 × numel
//! sha256 of everything above (32 bytes)
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::peft::{apply_strategy, TunableModel, TuningStrategy};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PFTF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub step: u64,
    pub tensors: u64,
    pub model: ModelConfig,
    /// Absent for a bare backbone.
    pub strategy: Option<TuningStrategy>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Values already rounded to `f32`.
    pub tensors: Vec<(String, Tensor)>,
}

fn quantize(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x as f32 as f64).collect())
        .expect("same shape")
}

impl Checkpoint {
    pub fn from_backbone(model: &TransformerModel, step: u64) -> Self {
        let tensors: Vec<_> = model
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), quantize(&p.tensor)))
            .collect();
        Self {
            header: CheckpointHeader {
                step,
                tensors: tensors.len() as u64,
                model: model.config.clone(),
                strategy: None,
            },
            tensors,
        }
    }

    pub fn from_tunable(tm: &TunableModel, step: u64) -> Self {
        let mut c = Self::from_backbone(&tm.model, step);
        c.header.strategy = Some(tm.strategy.clone());
        c
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&self.header)
            .map_err(|e| Error::Checkpoint(format!("cannot serialize header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a PFTF checkpoint".into()));
        }
        if bytes.len() < 4 + 4 + 32 {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch, file is truncated or corrupt".into()));
        }
        let header_len = r.u64()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let header: CheckpointHeader =
            toml::from_str(header).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors as usize);
        for _ in 0..header.tensors {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("bad dims".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn check_config(&self, expected: Option<&ModelConfig>) -> Result<()> {
        self.header.model.validate()?;
        if let Some(e) = expected {
            if *e != self.header.model {
                return Err(Error::Checkpoint(format!(
                    "model config mismatch: checkpoint has {:?}, expected {:?}",
                    self.header.model, e
                )));
            }
        }
        Ok(())
    }

    fn fill(&self, params: &mut crate::model::ParamStore, exact: bool) -> Result<()> {
        let mut used = 0;
        let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let Some((_, t)) = self.tensors.iter().find(|(n, _)| *n == name) else {
                return Err(Error::Checkpoint(format!("missing tensor {name}")));
            };
            params.assign(id, t.clone())?;
            used += 1;
        }
        if exact && used != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors in the file do not belong to the model",
                self.tensors.len() - used
            )));
        }
        Ok(())
    }

    /// Backbone weights only; strategy tensors in the file are ignored.
    pub fn backbone(&self, expected: Option<&ModelConfig>) -> Result<TransformerModel> {
        self.check_config(expected)?;
        let mut m = TransformerModel::new(self.header.model.clone(), 0)?;
        self.fill(&mut m.params, false)?;
        Ok(m)
    }

    /// The full tuned model, rebuilt from the recorded strategy.
    pub fn tunable(&self, expected: Option<&ModelConfig>) -> Result<TunableModel> {
        self.check_config(expected)?;
        let strategy = self
            .header
            .strategy
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint holds a bare backbone, no strategy".into()))?;
        let m = TransformerModel::new(self.header.model.clone(), 0)?;
        let mut tm = apply_strategy(m, strategy, 0)?;
        self.fill(&mut tm.model.params, true)?;
        Ok(tm)
    }
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}
