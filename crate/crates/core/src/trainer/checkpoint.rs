//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `SSPOOLCK`, `u32` version, `u32` length
//! and UTF-8 JSON of the [`TrainConfig`], `u64` step, `u32` array count,
//! then per array: `u32` name length, name, `u32` rank, `u32` dims, `f32`
//! values. Optimizer moments are stored as arrays named `opt.m/<param>`
//! and `opt.v/<param>`.

use std::path::Path;

use super::{OptimizerState, TrainConfig, TrainError};
use crate::diffcore::{ParamSet, Tensor};
use crate::encoder::EncoderModel;
use crate::fsutil;

pub const MAGIC: &[u8; 8] = b"SSPOOLCK";
pub const FORMAT_VERSION: u32 = 1;

const M_PREFIX: &str = "opt.m/";
const V_PREFIX: &str = "opt.v/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub params: ParamSet<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<EncoderModel<f32>, TrainError> {
        Ok(EncoderModel::from_params(self.config.model.clone(), self.params.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        put_u32(&mut out, cfg.len())?;
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&self.step.to_le_bytes());
        let mut arrays: Vec<(String, &Tensor<f32>)> =
            self.params.iter().map(|(k, t)| (k.clone(), t)).collect();
        if let Some(opt) = &self.optimizer {
            arrays.extend(opt.m.iter().map(|(k, t)| (format!("{M_PREFIX}{k}"), t)));
            arrays.extend(opt.v.iter().map(|(k, t)| (format!("{V_PREFIX}{k}"), t)));
        }
        put_u32(&mut out, arrays.len())?;
        for (name, t) in arrays {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(TrainError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported format version {version}")));
        }
        let n = r.u32()? as usize;
        let config: TrainConfig = serde_json::from_slice(r.take(n)?)?;
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let count = r.u32()?;
        let (mut params, mut m, mut v) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| TrainError::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(4).ok_or_else(|| TrainError::Checkpoint("array too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            if let Some(k) = name.strip_prefix(M_PREFIX) {
                m.insert(k, t);
            } else if let Some(k) = name.strip_prefix(V_PREFIX) {
                v.insert(k, t);
            } else {
                params.insert(name, t);
            }
        }
        if r.pos != bytes.len() {
            return Err(TrainError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let optimizer = (!m.is_empty()).then_some(OptimizerState { m, v, step });
        let ck = Self { config, step, params, optimizer };
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fsutil::write_atomic(path, &self.to_bytes()?).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), TrainError> {
    let v = u32::try_from(v).map_err(|_| TrainError::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
