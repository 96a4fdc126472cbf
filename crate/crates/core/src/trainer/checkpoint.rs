//! `CKP1` training checkpoints.
//!
//! ```text
//! "CKP1" u32 version  u64 step  u64 encoder_hash  u64 adam_t
//! u32 config_len  config (TOML, UTF-8)
//! u64 n  f64[n] params  f64[n] adam_m  f64[n] adam_v
//! ```
//! All integers and floats little-endian; parameters in visiting order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;

use super::{AdamState, ModelParams, TrainSetup};

const MAGIC: &[u8; 4] = b"CKP1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub setup: TrainSetup,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Optimizer steps taken.
    pub step: u64,
    /// Hash of the frozen encoder weights the parameters were trained against.
    pub encoder_hash: u64,
}

pub fn encode_checkpoint(ckp: &Checkpoint) -> Result<Vec<u8>> {
    let config = toml::to_string(&ckp.setup).map_err(|e| Error::Config(format!("config echo: {e}")))?;
    let flat = ckp.params.to_flat();
    if ckp.adam.m.len() != flat.len() || ckp.adam.v.len() != flat.len() {
        return Err(Error::ShapeMismatch("optimizer state does not match the parameters".into()));
    }
    let mut out = Vec::with_capacity(40 + config.len() + 24 * flat.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ckp.step.to_le_bytes());
    out.extend_from_slice(&ckp.encoder_hash.to_le_bytes());
    out.extend_from_slice(&ckp.adam.t.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for block in [&flat, &ckp.adam.m, &ckp.adam.v] {
        for v in block.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        let v: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err("non-finite value".into());
        }
        Ok(v)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err("missing CKP1 header".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let step = r.u64()?;
    let encoder_hash = r.u64()?;
    let t = r.u64()?;
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|e| format!("config echo: {e}"))?;
    let setup: TrainSetup = toml::from_str(text).map_err(|e| format!("config echo: {e}"))?;
    setup.validate().map_err(|e| e.to_string())?;
    let mut params = ModelParams::init(&setup.model);
    let n = r.u64()? as usize;
    if n != params.num_params() {
        return Err(format!("{n} parameters stored, configuration needs {}", params.num_params()));
    }
    params.load_flat(&r.f64s(n)?);
    let m = r.f64s(n)?;
    let v = r.f64s(n)?;
    if r.at != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(Checkpoint { setup, params, adam: AdamState { m, v, t }, step, encoder_hash })
}

pub fn write_checkpoint(path: &Path, ckp: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckp)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?).map_err(|r| Error::malformed(path, r))
}
