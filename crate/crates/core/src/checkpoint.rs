//! Single-file model checkpoints: a JSON metadata record followed by named
//! little-endian f32 tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AscError, Result};
use crate::model::{ModelConfig, NtsccModel};
use crate::nn::{Group, ParamSet};

const MAGIC: &[u8; 8] = b"ASCCKPT\x01";

/// Training context stored next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Side-information bits per token, `log2 |V|`.
    pub side_info_bits: usize,
    pub lambda: f64,
    pub eta_y: f64,
    pub eta_z: f64,
    /// Training SNR range in dB; equal ends for a fixed-SNR model.
    pub train_snr_db: (f64, f64),
    pub channel: String,
    pub seed: u64,
    pub steps: usize,
}

pub fn to_bytes(meta: &CheckpointMeta, params: &ParamSet) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta).map_err(|e| AscError::Data(format!("cannot encode metadata: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + params.total() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.params() {
        let name = p.name.as_bytes();
        let group = p.group.name().as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(group.len() as u8);
        out.extend_from_slice(group);
        out.extend_from_slice(&(p.rows as u32).to_le_bytes());
        out.extend_from_slice(&(p.cols as u32).to_le_bytes());
        for v in &p.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(AscError::Data(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn str(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| AscError::Data("checkpoint name is not UTF-8".into()))
    }
}

pub fn from_bytes(data: &[u8]) -> Result<(CheckpointMeta, ParamSet)> {
    let mut r = Reader { data, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(AscError::Data("not a checkpoint file".into()));
    }
    let n = r.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(n)?).map_err(|e| AscError::Data(format!("bad checkpoint metadata: {e}")))?;
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let nl = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = r.str(nl)?;
        let gl = r.take(1)?[0] as usize;
        let gname = r.str(gl)?;
        let group = Group::from_name(&gname).ok_or_else(|| AscError::Data(format!("unknown group {gname}")))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if params.get(&name).is_some() {
            return Err(AscError::Data(format!("duplicate tensor {name}")));
        }
        params.add(&name, group, rows, cols, values);
    }
    if r.pos != data.len() {
        return Err(AscError::Data(format!("{} trailing bytes in checkpoint", data.len() - r.pos)));
    }
    Ok((meta, params))
}

pub fn save(path: &Path, meta: &CheckpointMeta, params: &ParamSet) -> Result<()> {
    fs::write(path, to_bytes(meta, params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, ParamSet)> {
    let data = fs::read(path).map_err(|e| AscError::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    from_bytes(&data)
}

/// Loads a checkpoint and validates it against its own model config.
pub fn load_model(path: &Path) -> Result<(CheckpointMeta, NtsccModel)> {
    let (meta, params) = load(path)?;
    let model = NtsccModel::from_parts(meta.model.clone(), params)?;
    Ok((meta, model))
}
