//! `RIV1` files: magic, `u32` H, W, C (= 3), `H·W·C` little-endian `f32`
//! (row-major, channel-last), then `H·W` mask bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{RivImage, CHANNELS};

const MAGIC: &[u8; 4] = b"RIV1";

pub fn encode_riv(img: &RivImage) -> Vec<u8> {
    let n = img.height() * img.width();
    let mut out = Vec::with_capacity(16 + n * (CHANNELS * 4 + 1));
    out.extend_from_slice(MAGIC);
    for dim in [img.height(), img.width(), CHANNELS] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(img.valid_mask().iter().map(|&b| b as u8));
    out
}

pub fn decode_riv(bytes: &[u8]) -> std::result::Result<RivImage, String> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err("missing RIV1 header".into());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    if c != CHANNELS {
        return Err(format!("expected {CHANNELS} channels, found {c}"));
    }
    let n = h.checked_mul(w).ok_or("dimensions overflow")?;
    let expected = 16 + n * (CHANNELS * 4 + 1);
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes, found {}", bytes.len()));
    }
    let body = &bytes[16..16 + n * CHANNELS * 4];
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err("non-finite channel value".into());
    }
    let valid = bytes[16 + n * CHANNELS * 4..]
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(format!("mask byte {other} is not 0/1")),
        })
        .collect::<std::result::Result<Vec<bool>, String>>()?;
    for (i, &ok) in valid.iter().enumerate() {
        if !ok && data[i * CHANNELS..(i + 1) * CHANNELS].iter().any(|&v| v != 0.0) {
            return Err(format!("invalid pixel {i} holds non-zero channels"));
        }
    }
    RivImage::from_parts(h, w, data, valid).ok_or_else(|| "inconsistent buffers".into())
}

pub fn write_riv(path: &Path, img: &RivImage) -> Result<()> {
    fs::write(path, encode_riv(img))?;
    Ok(())
}

pub fn read_riv(path: &Path) -> Result<RivImage> {
    decode_riv(&fs::read(path)?).map_err(|reason| Error::malformed(path, reason))
}
