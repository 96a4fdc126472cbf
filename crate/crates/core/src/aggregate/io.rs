//! `DSC1` descriptor files: magic, `u32` count, `u32` dim, then `count · dim`
//! little-endian `f32` values row by row. The sidecar `<file>.idx` maps each
//! row to its scan id, timestamp and pose.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::params::read_u32;
use crate::scan_geometry::Pose;

use super::Descriptor;

const MAGIC: &[u8; 4] = b"DSC1";

/// Per-row metadata of a descriptor file.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMeta {
    pub id: String,
    pub pose: Pose,
}

impl DescriptorMeta {
    pub fn timestamp(&self) -> f64 {
        self.pose.timestamp
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".idx");
    PathBuf::from(s)
}

pub fn encode_descriptors(descs: &[Descriptor]) -> Result<Vec<u8>> {
    let dim = descs.first().map_or(0, |d| d.len());
    if descs.iter().any(|d| d.len() != dim) {
        return Err(Error::ShapeMismatch("descriptors of different lengths".into()));
    }
    let mut out = Vec::with_capacity(12 + 4 * dim * descs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(descs.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for d in descs {
        for v in d.values() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Rows are taken verbatim; an all-zero row decodes as an invalid descriptor.
pub fn decode_descriptors(bytes: &[u8]) -> std::result::Result<Vec<Descriptor>, String> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err("missing DSC1 header".into());
    }
    let mut at = 4;
    let count = read_u32(bytes, &mut at)? as usize;
    let dim = read_u32(bytes, &mut at)? as usize;
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(12))
        .ok_or("dimensions overflow")?;
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes, found {}", bytes.len()));
    }
    (0..count)
        .map(|r| {
            let row: Vec<f64> = bytes[12 + 4 * r * dim..12 + 4 * (r + 1) * dim]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            if row.iter().any(|v| !v.is_finite()) {
                return Err(format!("row {r} has a non-finite value"));
            }
            Ok(Descriptor::from_stored(row))
        })
        .collect()
}

pub fn format_sidecar(metas: &[DescriptorMeta]) -> Result<String> {
    let mut s = String::from("# row id timestamp tx ty tz qx qy qz qw\n");
    for (row, m) in metas.iter().enumerate() {
        if m.id.is_empty() || m.id.chars().any(char::is_whitespace) {
            return Err(Error::arg(format!("scan id '{}' must be non-empty without whitespace", m.id)));
        }
        let q = m.pose.rotation.quaternion();
        let t = m.pose.translation;
        let _ = writeln!(
            s,
            "{row} {} {} {} {} {} {} {} {} {}",
            m.id, m.pose.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        );
    }
    Ok(s)
}

pub fn parse_sidecar(text: &str) -> std::result::Result<Vec<DescriptorMeta>, String> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 10 {
            return Err(format!("line {}: expected 10 fields", lineno + 1));
        }
        let row: usize = fields[0].parse().map_err(|e| format!("line {}: {e}", lineno + 1))?;
        if row != out.len() {
            return Err(format!("line {}: row {row} out of order", lineno + 1));
        }
        let nums: Vec<f64> = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        let pose = Pose::from_components(nums[0], [nums[1], nums[2], nums[3]], [nums[4], nums[5], nums[6], nums[7]])
            .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        out.push(DescriptorMeta {
            id: fields[1].to_string(),
            pose,
        });
    }
    Ok(out)
}

pub fn write_descriptors(path: &Path, descs: &[Descriptor], metas: &[DescriptorMeta]) -> Result<()> {
    if descs.len() != metas.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} descriptors but {} metadata rows",
            descs.len(),
            metas.len()
        )));
    }
    fs::write(path, encode_descriptors(descs)?)?;
    fs::write(sidecar_path(path), format_sidecar(metas)?)?;
    Ok(())
}

pub fn read_descriptors(path: &Path) -> Result<(Vec<Descriptor>, Vec<DescriptorMeta>)> {
    let descs = decode_descriptors(&fs::read(path)?).map_err(|r| Error::malformed(path, r))?;
    let side = sidecar_path(path);
    let metas = parse_sidecar(&fs::read_to_string(&side)?).map_err(|r| Error::malformed(&side, r))?;
    if metas.len() != descs.len() {
        return Err(Error::malformed(
            &side,
            format!("{} rows for {} descriptors", metas.len(), descs.len()),
        ));
    }
    Ok((descs, metas))
}
