//! Geometric mining of positive and negative patch pairs between two scans.

mod io;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{ToyEncoder, PATCH};
use crate::error::{Error, Result};
use crate::riv::{pixel_winners, project_geometry, project_point, project_scan, RivConfig, RivImage, CH_RANGE};
use crate::scan_geometry::{icp_align_detailed, voxel_downsample, IcpConfig, Pose, RigidTransform, Scan};

pub use io::{decode_pairs, encode_pairs, read_pairs, write_pairs};

const PATCH_PIXELS: f64 = (PATCH * PATCH) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub rho_valid: f64,
    pub mad_k: f64,
    /// Patch rows.
    pub v_dist: usize,
    /// Patch columns.
    pub h_dist: usize,
    pub max_positives: usize,
    /// Negatives sampled per positive and per side.
    pub negatives_per_positive: usize,
    /// Voxel size used before ICP, meters.
    pub voxel: f64,
    /// Largest pose distance accepted by [`mine_pair`], meters.
    pub positive_radius: f64,
    pub icp: IcpConfig,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            rho_valid: 0.5,
            mad_k: 3.0,
            v_dist: 3,
            h_dist: 20,
            max_positives: 192,
            negatives_per_positive: 128,
            voxel: 0.4,
            positive_radius: 10.0,
            icp: IcpConfig::default(),
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_valid > 0.0 && self.rho_valid <= 1.0) {
            return Err(Error::Config("mining: rho_valid must lie in (0, 1]".into()));
        }
        if self.v_dist == 0 || self.h_dist == 0 {
            return Err(Error::Config("mining: v_dist and h_dist must be >= 1".into()));
        }
        if !(self.mad_k >= 0.0) || !(self.voxel > 0.0) || !(self.positive_radius > 0.0) {
            return Err(Error::Config("mining: mad_k >= 0, voxel > 0 and positive_radius > 0 required".into()));
        }
        Ok(())
    }
}

/// Patch index pairs between image A and image B plus per-positive negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPairSet {
    pub source_a: String,
    pub source_b: String,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub config: MiningConfig,
    pub positives: Vec<(usize, usize)>,
    /// Patches of image A, one list per positive.
    pub negatives_a: Vec<Vec<usize>>,
    /// Patches of image B, one list per positive.
    pub negatives_b: Vec<Vec<usize>>,
}

impl PatchPairSet {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    /// Same pairs with the roles of A and B exchanged.
    pub fn swapped(&self) -> PatchPairSet {
        PatchPairSet {
            source_a: self.source_b.clone(),
            source_b: self.source_a.clone(),
            positives: self.positives.iter().map(|&(a, b)| (b, a)).collect(),
            negatives_a: self.negatives_b.clone(),
            negatives_b: self.negatives_a.clone(),
            ..self.clone()
        }
    }
}

/// Accepted patch of image A with its overlap statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMatch {
    pub patch: usize,
    /// Pixels valid in both images.
    pub overlap: usize,
    /// Mean absolute range difference in image units.
    pub delta_r: f64,
}

/// Projects `scan_b` into A's image after moving it into A's frame.
pub fn reproject(scan_b: &Scan, t_b_to_a: &RigidTransform, cfg_a: &RivConfig) -> Result<RivImage> {
    project_scan(&scan_b.transformed(t_b_to_a), cfg_a)
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `τ_r = median(d) + k · MAD(d)`.
pub fn mad_threshold(d: &[f64], k: f64) -> f64 {
    let med = median(d);
    let dev: Vec<f64> = d.iter().map(|x| (x - med).abs()).collect();
    med + k * median(&dev)
}

/// Overlap and range-consistency test for one patch given its signed
/// per-pixel differences; all-zero residuals are accepted.
pub fn accept_patch(d: &[f64], rho_valid: f64, mad_k: f64) -> Option<f64> {
    if d.len() as f64 / PATCH_PIXELS <= rho_valid {
        return None;
    }
    let delta_r = d.iter().map(|x| x.abs()).sum::<f64>() / d.len() as f64;
    if delta_r == 0.0 || delta_r < mad_threshold(d, mad_k) {
        Some(delta_r)
    } else {
        None
    }
}

fn patch_range_diffs(a: &RivImage, b: &RivImage, pr: usize, pc: usize) -> Vec<f64> {
    let mut d = Vec::with_capacity(PATCH * PATCH);
    for v in pr * PATCH..(pr + 1) * PATCH {
        for u in pc * PATCH..(pc + 1) * PATCH {
            if a.is_valid(v, u) && b.is_valid(v, u) {
                d.push(a.get(v, u, CH_RANGE) as f64 - b.get(v, u, CH_RANGE) as f64);
            }
        }
    }
    d
}

/// Patches of A whose overlap with `reproj_b` exceeds `rho_valid` and whose
/// mean range difference passes the MAD test, capped at `max_positives`
/// by smallest `delta_r` and returned in patch order.
pub fn mine_positives(img_a: &RivImage, reproj_b: &RivImage, cfg: &MiningConfig) -> Result<Vec<PatchMatch>> {
    if img_a.height() != reproj_b.height() || img_a.width() != reproj_b.width() {
        return Err(Error::ShapeMismatch("images of different sizes".into()));
    }
    let (rows, cols) = ToyEncoder::grid_shape(img_a.height(), img_a.width());
    let mut found = Vec::new();
    for pr in 0..rows {
        for pc in 0..cols {
            let d = patch_range_diffs(img_a, reproj_b, pr, pc);
            if let Some(delta_r) = accept_patch(&d, cfg.rho_valid, cfg.mad_k) {
                found.push(PatchMatch {
                    patch: pr * cols + pc,
                    overlap: d.len(),
                    delta_r,
                });
            }
        }
    }
    if found.len() > cfg.max_positives {
        found.sort_by(|a, b| a.delta_r.total_cmp(&b.delta_r).then(a.patch.cmp(&b.patch)));
        found.truncate(cfg.max_positives);
        found.sort_by_key(|m| m.patch);
    }
    Ok(found)
}

/// Cyclic column distance on a grid `cols` wide.
pub fn cyclic_distance(a: usize, b: usize, cols: usize) -> usize {
    let d = a.abs_diff(b) % cols;
    d.min(cols - d)
}

/// `n` is far enough from `p` on a `rows × cols` grid.
pub fn admissible(n: usize, p: usize, cols: usize, cfg: &MiningConfig) -> bool {
    let (nr, nc) = (n / cols, n % cols);
    let (pr, pc) = (p / cols, p % cols);
    nr.abs_diff(pr) >= cfg.v_dist || cyclic_distance(nc, pc, cols) >= cfg.h_dist
}

/// Samples, for each positive, up to `count` patches per side that are
/// admissible with respect to both `p1` and `p2`. Lists are sorted.
pub fn mine_negatives(
    positives: &[(usize, usize)],
    grid: (usize, usize),
    cfg: &MiningConfig,
    count: usize,
    seed: u64,
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let (rows, cols) = grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut neg_a = Vec::with_capacity(positives.len());
    let mut neg_b = Vec::with_capacity(positives.len());
    let mut starved = 0;
    for &(p1, p2) in positives {
        let pool: Vec<usize> = (0..rows * cols)
            .filter(|&n| admissible(n, p1, cols, cfg) && admissible(n, p2, cols, cfg))
            .collect();
        if pool.is_empty() {
            starved += 1;
        }
        let mut draw = || {
            let k = count.min(pool.len());
            let mut picked: Vec<usize> = sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
            picked.sort_unstable();
            picked
        };
        neg_a.push(draw());
        neg_b.push(draw());
    }
    if starved > 0 {
        log::debug!("{starved} of {} positives have no admissible negatives", positives.len());
    }
    (neg_a, neg_b)
}

/// Positive pairs `(p1, p2)` where `p2` is the B patch contributing most
/// overlap pixels to `p1` (lowest index on ties).
fn assign_partners(
    img_a: &RivImage,
    reproj_b: &RivImage,
    b_patch_of_pixel: &[Option<usize>],
    matches: &[PatchMatch],
    cols: usize,
) -> Vec<(usize, usize)> {
    let w = img_a.width();
    let mut out = Vec::with_capacity(matches.len());
    for m in matches {
        let (pr, pc) = (m.patch / cols, m.patch % cols);
        let mut votes: Vec<(usize, usize)> = Vec::new();
        for v in pr * PATCH..(pr + 1) * PATCH {
            for u in pc * PATCH..(pc + 1) * PATCH {
                if !(img_a.is_valid(v, u) && reproj_b.is_valid(v, u)) {
                    continue;
                }
                if let Some(q) = b_patch_of_pixel[v * w + u] {
                    match votes.iter_mut().find(|(p, _)| *p == q) {
                        Some(e) => e.1 += 1,
                        None => votes.push((q, 1)),
                    }
                }
            }
        }
        let best = votes.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((q, _)) = best {
            out.push((m.patch, q));
        }
    }
    out
}

/// Voxelize, refine the pose-derived relative transform with ICP, reproject B
/// into A and mine positives and negatives.
#[allow(clippy::too_many_arguments)]
pub fn mine_pair(
    scan_a: &Scan,
    scan_b: &Scan,
    pose_a: &Pose,
    pose_b: &Pose,
    riv: &RivConfig,
    cfg: &MiningConfig,
    seed: u64,
) -> Result<PatchPairSet> {
    let dist = pose_a.distance(pose_b);
    if dist > cfg.positive_radius {
        return Err(Error::Protocol(format!(
            "not a positive pair: poses {dist:.2} m apart (radius {})",
            cfg.positive_radius
        )));
    }
    let init = pose_a.relative_from(pose_b);
    let va = voxel_downsample(scan_a, cfg.voxel)?;
    let vb = voxel_downsample(scan_b, cfg.voxel)?;
    let t = icp_align_detailed(&vb, &va, &init, &cfg.icp)?.transform;
    mine_pair_with_transform(scan_a, scan_b, &t, riv, cfg, seed)
}

/// Mining for a known B → A transform.
pub fn mine_pair_with_transform(
    scan_a: &Scan,
    scan_b: &Scan,
    t_b_to_a: &RigidTransform,
    riv: &RivConfig,
    cfg: &MiningConfig,
    seed: u64,
) -> Result<PatchPairSet> {
    let img_a = project_geometry(scan_a, riv)?;
    let moved = scan_b.transformed(t_b_to_a);
    let reproj_b = project_geometry(&moved, riv)?;
    let (rows, cols) = ToyEncoder::grid_shape(riv.height, riv.width);

    let b_patch_of_pixel: Vec<Option<usize>> = pixel_winners(&moved, riv)
        .into_iter()
        .map(|w| {
            let (i, _) = w?;
            let pix = project_point(&scan_b.points[i], riv)?.pixel;
            let (pr, pc) = (pix.v / PATCH, pix.u / PATCH);
            (pr < rows && pc < cols).then_some(pr * cols + pc)
        })
        .collect();

    let matches = mine_positives(&img_a, &reproj_b, cfg)?;
    let positives = assign_partners(&img_a, &reproj_b, &b_patch_of_pixel, &matches, cols);
    let (negatives_a, negatives_b) =
        mine_negatives(&positives, (rows, cols), cfg, cfg.negatives_per_positive, seed);
    Ok(PatchPairSet {
        source_a: scan_a.id.clone(),
        source_b: scan_b.id.clone(),
        rows,
        cols,
        seed,
        config: *cfg,
        positives,
        negatives_a,
        negatives_b,
    })
}
