//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `CNMP`, `u32` version, five `u64` sizes
//! (embed, node, edge, hidden, steps), six `f32` feature scales, `u32` tensor
//! count, then per tensor a `u32` rank and `u64` dims, then all tensor values
//! as `f32` in header order.

use std::fs;
use std::path::Path;

use super::{MpnConfig, MpnParams};
use crate::error::{Error, Result};
use crate::model::EDGE_FEATURES;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CNMP";

pub fn encode_params(params: &MpnParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let c = params.config;
    for v in [c.embed_dim, c.node_dim, c.edge_dim, c.hidden, c.steps] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for s in params.feature_scale {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (_, shape, _) in &tensors {
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, _, values) in &tensors {
        for &v in values.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("size {v} overflows")))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<MpnParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = MpnConfig {
        embed_dim: r.u64()?,
        node_dim: r.u64()?,
        edge_dim: r.u64()?,
        hidden: r.u64()?,
        steps: r.u64()?,
    };
    const LIMIT: usize = 1 << 16;
    if [config.embed_dim, config.node_dim, config.edge_dim, config.hidden, config.steps]
        .iter()
        .any(|&v| v > LIMIT)
    {
        return Err(Error::Checkpoint(format!("implausible sizes {config:?}")));
    }
    let mut params = MpnParams::init(config, 0)
        .map_err(|e| Error::Checkpoint(e.to_string()))?
        .zeros_like();
    let mut scale = [0.0; EDGE_FEATURES];
    for s in scale.iter_mut() {
        *s = r.f32()?;
    }
    params.feature_scale = scale;
    let expected: Vec<Vec<usize>> = params.tensors().into_iter().map(|t| t.1).collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }
    for (k, want) in expected.iter().enumerate() {
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        if &shape != want {
            return Err(Error::Checkpoint(format!(
                "tensor {k} has shape {shape:?}, expected {want:?}"
            )));
        }
    }
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = r.f32()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    params
        .validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(params)
}

pub fn save_params(params: &MpnParams, path: &Path) -> Result<()> {
    fs::write(path, encode_params(params))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<MpnParams> {
    decode_params(&fs::read(path)?)
}
