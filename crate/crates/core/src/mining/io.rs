//! Line-oriented patch-pair files.
//!
//! ```text
//! # {"format":"PatchPairSet","version":1,...}
//! POS a_idx b_idx
//! NEGA pos_ordinal idx
//! NEGB pos_ordinal idx
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{MiningConfig, PatchPairSet};

const FORMAT: &str = "PatchPairSet";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    source_a: String,
    source_b: String,
    rows: usize,
    cols: usize,
    seed: u64,
    positives: usize,
    config: MiningConfig,
}

pub fn encode_pairs(set: &PatchPairSet) -> String {
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        source_a: set.source_a.clone(),
        source_b: set.source_b.clone(),
        rows: set.rows,
        cols: set.cols,
        seed: set.seed,
        positives: set.positives.len(),
        config: set.config,
    };
    let mut s = format!("# {}\n", serde_json::to_string(&header).expect("header serializes"));
    for (a, b) in &set.positives {
        let _ = writeln!(s, "POS {a} {b}");
    }
    for (k, list) in set.negatives_a.iter().enumerate() {
        for n in list {
            let _ = writeln!(s, "NEGA {k} {n}");
        }
    }
    for (k, list) in set.negatives_b.iter().enumerate() {
        for n in list {
            let _ = writeln!(s, "NEGB {k} {n}");
        }
    }
    s
}

pub fn decode_pairs(text: &str) -> std::result::Result<PatchPairSet, String> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or("empty file")?;
    let json = first.strip_prefix("# ").ok_or("missing header line")?;
    let header: Header = serde_json::from_str(json).map_err(|e| format!("header: {e}"))?;
    if header.format != FORMAT || header.version != 1 {
        return Err(format!("unsupported format {} v{}", header.format, header.version));
    }
    let n_patches = header.rows * header.cols;
    let mut set = PatchPairSet {
        source_a: header.source_a,
        source_b: header.source_b,
        rows: header.rows,
        cols: header.cols,
        seed: header.seed,
        config: header.config,
        positives: Vec::with_capacity(header.positives),
        negatives_a: vec![Vec::new(); header.positives],
        negatives_b: vec![Vec::new(); header.positives],
    };
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: &str| format!("line {}: {m}", lineno + 1);
        let mut it = line.split_whitespace();
        let tag = it.next().unwrap_or_default();
        let x: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| err("bad field"))?;
        let y: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| err("bad field"))?;
        if it.next().is_some() {
            return Err(err("trailing fields"));
        }
        match tag {
            "POS" => {
                if x >= n_patches || y >= n_patches {
                    return Err(err("patch index outside grid"));
                }
                set.positives.push((x, y));
            }
            "NEGA" | "NEGB" => {
                if x >= header.positives || y >= n_patches {
                    return Err(err("index out of range"));
                }
                let side = if tag == "NEGA" { &mut set.negatives_a } else { &mut set.negatives_b };
                side[x].push(y);
            }
            other => return Err(err(&format!("unknown record '{other}'"))),
        }
    }
    if set.positives.len() != header.positives {
        return Err(format!(
            "header announces {} positives, found {}",
            header.positives,
            set.positives.len()
        ));
    }
    Ok(set)
}

pub fn write_pairs(path: &Path, set: &PatchPairSet) -> Result<()> {
    fs::write(path, encode_pairs(set))?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<PatchPairSet> {
    decode_pairs(&fs::read_to_string(path)?).map_err(|r| Error::malformed(path, r))
}
