use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Point, Pose, Scan};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanFormat {
    /// Little-endian `f32` quadruples `(x, y, z, reflectivity)`, no header.
    XyzrBin,
    /// Header `x,y,z,reflectivity`, one point per row.
    Csv,
}

impl ScanFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "bin" => Some(ScanFormat::XyzrBin),
            "csv" => Some(ScanFormat::Csv),
            _ => None,
        }
    }
}

/// Reads a scan; its id is the file stem and its timestamp 0.
pub fn load_scan(path: &Path, format: ScanFormat) -> Result<Scan> {
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    let points = match format {
        ScanFormat::XyzrBin => parse_xyzr_bin(&fs::read(path)?),
        ScanFormat::Csv => parse_csv(&fs::read_to_string(path)?),
    }
    .map_err(|reason| Error::malformed(path, reason))?;
    Ok(Scan::new(id, 0.0, points))
}

pub fn parse_xyzr_bin(bytes: &[u8]) -> std::result::Result<Vec<Point>, String> {
    if bytes.is_empty() {
        return Err("empty file".into());
    }
    if bytes.len() % 16 != 0 {
        return Err(format!("length {} is not a multiple of 16 (truncated record)", bytes.len()));
    }
    bytes
        .chunks_exact(16)
        .enumerate()
        .map(|(i, rec)| {
            let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
            let p = Point::new(f(0), f(1), f(2), f(3));
            if p.is_valid() {
                Ok(p)
            } else {
                Err(format!("record {i} has a non-finite or negative value"))
            }
        })
        .collect()
}

pub fn encode_xyzr_bin(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in [p.x, p.y, p.z, p.reflectivity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn parse_csv(text: &str) -> std::result::Result<Vec<Point>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty file")?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != ["x", "y", "z", "reflectivity"] {
        return Err(format!("unexpected header '{header}'"));
    }
    let points = lines
        .enumerate()
        .map(|(i, line)| {
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format!("row {}: {e}", i + 1))?;
            if vals.len() != 4 {
                return Err(format!("row {} has {} fields", i + 1, vals.len()));
            }
            let p = Point::new(vals[0], vals[1], vals[2], vals[3]);
            if !p.is_valid() {
                return Err(format!("row {} has a non-finite or negative value", i + 1));
            }
            Ok(p)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if points.is_empty() {
        return Err("no points".into());
    }
    Ok(points)
}

pub fn write_scan(path: &Path, scan: &Scan, format: ScanFormat) -> Result<()> {
    match format {
        ScanFormat::XyzrBin => fs::write(path, encode_xyzr_bin(&scan.points))?,
        ScanFormat::Csv => {
            let mut s = String::from("x,y,z,reflectivity\n");
            for p in &scan.points {
                let _ = writeln!(s, "{},{},{},{}", p.x, p.y, p.z, p.reflectivity);
            }
            fs::write(path, s)?
        }
    }
    Ok(())
}

/// Parses `timestamp tx ty tz qx qy qz qw` lines; `#` lines and blanks are skipped.
pub fn parse_poses(text: &str) -> std::result::Result<Vec<Pose>, String> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        if vals.len() != 8 {
            return Err(format!("line {}: expected 8 fields, found {}", lineno + 1, vals.len()));
        }
        let pose = Pose::from_components(
            vals[0],
            [vals[1], vals[2], vals[3]],
            [vals[4], vals[5], vals[6], vals[7]],
        )
        .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        if let Some(prev) = poses.last() {
            let prev: &Pose = prev;
            if pose.timestamp < prev.timestamp {
                return Err(format!("line {}: timestamps not monotone", lineno + 1));
            }
        }
        poses.push(pose);
    }
    Ok(poses)
}

pub fn load_poses(path: &Path) -> Result<Vec<Pose>> {
    parse_poses(&fs::read_to_string(path)?).map_err(|reason| Error::malformed(path, reason))
}

pub fn format_poses(poses: &[Pose]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for p in poses {
        let q = p.rotation.quaternion();
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            p.timestamp, p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w
        );
    }
    s
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    fs::write(path, format_poses(poses))?;
    Ok(())
}
