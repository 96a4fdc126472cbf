//! Point clouds, poses, voxel downsampling, exact k-NN and point-to-point ICP.

mod icp;
mod io;
pub mod kdtree;
mod transform;

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub use icp::{icp_align, icp_align_detailed, IcpConfig, IcpOutcome};
pub use io::{
    encode_xyzr_bin, format_poses, load_poses, load_scan, parse_csv, parse_poses, parse_xyzr_bin,
    write_poses, write_scan, ScanFormat,
};
pub use kdtree::KdTree;
pub use transform::{Pose, RigidTransform};

/// A single LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub reflectivity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, reflectivity: f64) -> Self {
        Point {
            x,
            y,
            z,
            reflectivity,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && self.reflectivity.is_finite()
            && self.reflectivity >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub id: String,
    pub timestamp: f64,
    pub points: Vec<Point>,
}

impl Scan {
    pub fn new(id: impl Into<String>, timestamp: f64, points: Vec<Point>) -> Self {
        Scan {
            id: id.into(),
            timestamp,
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(Point::as_array).collect()
    }

    pub fn kdtree(&self) -> KdTree {
        KdTree::new(self.positions())
    }

    pub fn transformed(&self, t: &RigidTransform) -> Scan {
        Scan {
            id: self.id.clone(),
            timestamp: self.timestamp,
            points: self.points.iter().map(|p| t.apply(p)).collect(),
        }
    }
}

fn voxel_key(p: &Point, cell: f64) -> (i64, i64, i64) {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

/// Replaces every occupied voxel by the centroid of its members.
///
/// Reflectivity is averaged; output is ordered by ascending voxel key.
pub fn voxel_downsample(scan: &Scan, cell: f64) -> Result<Scan> {
    if !(cell > 0.0) || !cell.is_finite() {
        return Err(Error::arg(format!("voxel cell must be positive, got {cell}")));
    }
    let mut cells: BTreeMap<(i64, i64, i64), ([f64; 4], usize)> = BTreeMap::new();
    for p in &scan.points {
        let entry = cells.entry(voxel_key(p, cell)).or_insert(([0.0; 4], 0));
        entry.0[0] += p.x;
        entry.0[1] += p.y;
        entry.0[2] += p.z;
        entry.0[3] += p.reflectivity;
        entry.1 += 1;
    }
    let points = cells
        .into_values()
        .map(|(sum, count)| {
            let n = count as f64;
            Point::new(sum[0] / n, sum[1] / n, sum[2] / n, sum[3] / n)
        })
        .collect();
    Ok(Scan {
        id: scan.id.clone(),
        timestamp: scan.timestamp,
        points,
    })
}

/// Indices of the `k` points closest to `query`, nearest first.
///
/// Exhaustive; ties go to the lower index. Returns every index when `k >= n`.
pub fn knn(scan: &Scan, query: &Point, k: usize) -> Result<Vec<usize>> {
    if scan.is_empty() {
        return Err(Error::arg("knn on an empty scan"));
    }
    if k == 0 {
        return Err(Error::arg("knn requires k >= 1"));
    }
    let q = query.position();
    let mut ranked: Vec<(f64, usize)> = scan
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p.position() - q).norm_squared(), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let k = k.min(ranked.len());
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k - 1, cmp);
        ranked.truncate(k);
    }
    ranked.sort_by(cmp);
    Ok(ranked.into_iter().map(|(_, i)| i).collect())
}
