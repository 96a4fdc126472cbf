use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{KdTree, RigidTransform, Scan};

/// Point-to-point ICP settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    pub max_iter: usize,
    /// Stop once the mean correspondence distance improves by less than this (meters).
    pub tol: f64,
    /// Pairs farther than `reject_factor` × current mean distance are dropped.
    pub reject_factor: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iter: 50,
            tol: 1e-4,
            reject_factor: 3.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcpOutcome {
    pub transform: RigidTransform,
    pub iterations: usize,
    /// Mean nearest-neighbor distance of the transformed source, starting at `init`.
    pub mean_distances: Vec<f64>,
}

impl IcpOutcome {
    pub fn final_mean_distance(&self) -> f64 {
        self.mean_distances
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Refines `init` so that it maps `source` onto `target`.
pub fn icp_align(
    source: &Scan,
    target: &Scan,
    init: &RigidTransform,
    max_iter: usize,
    tol: f64,
) -> Result<RigidTransform> {
    let cfg = IcpConfig {
        max_iter,
        tol,
        ..IcpConfig::default()
    };
    icp_align_detailed(source, target, init, &cfg).map(|o| o.transform)
}

/// Least-squares rigid fit of `src` onto `dst` (Kabsch).
fn fit_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> RigidTransform {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    RigidTransform::from_parts_unchecked(r, cd - r * cs)
}

fn correspondences(
    source: &[Vector3<f64>],
    tree: &KdTree,
    t: &RigidTransform,
) -> (Vec<(Vector3<f64>, Vector3<f64>, f64)>, f64) {
    let pairs: Vec<_> = source
        .iter()
        .map(|p| {
            let moved = t.apply_vec(p);
            let (j, d2) = tree.nearest(&[moved.x, moved.y, moved.z]).expect("non-empty tree");
            let q = tree.point(j);
            (*p, Vector3::new(q[0], q[1], q[2]), d2.sqrt())
        })
        .collect();
    let mean = pairs.iter().map(|c| c.2).sum::<f64>() / pairs.len() as f64;
    (pairs, mean)
}

/// ICP returning the full iteration history.
///
/// The returned transform is the iterate with the lowest mean nearest-neighbor
/// distance, so it never scores worse than `init`.
pub fn icp_align_detailed(
    source: &Scan,
    target: &Scan,
    init: &RigidTransform,
    cfg: &IcpConfig,
) -> Result<IcpOutcome> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::arg("icp_align needs non-empty source and target"));
    }
    let src: Vec<Vector3<f64>> = source.points.iter().map(|p| p.position()).collect();
    let tree = target.kdtree();

    let mut current = *init;
    let (mut pairs, mut mean) = correspondences(&src, &tree, &current);
    let mut history = vec![mean];
    let mut best = (mean, current);
    let mut iterations = 0;

    for _ in 0..cfg.max_iter {
        let cutoff = cfg.reject_factor * mean;
        let (s, d): (Vec<_>, Vec<_>) = pairs
            .iter()
            .filter(|c| c.2 <= cutoff)
            .map(|c| (c.0, c.1))
            .unzip();
        if s.len() < 3 {
            return Err(Error::Alignment(format!(
                "only {} correspondences survived rejection",
                s.len()
            )));
        }
        current = fit_rigid(&s, &d);
        iterations += 1;
        let prev = mean;
        (pairs, mean) = correspondences(&src, &tree, &current);
        history.push(mean);
        if mean < best.0 {
            best = (mean, current);
        }
        if prev - mean < cfg.tol {
            break;
        }
    }

    Ok(IcpOutcome {
        transform: best.1,
        iterations,
        mean_distances: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan_geometry::Point;

    fn surface_cloud() -> Scan {
        let mut pts = Vec::new();
        for i in 0..13 {
            for j in 0..13 {
                let x = -3.0 + 0.5 * i as f64;
                let y = -3.0 + 0.5 * j as f64;
                let z = 0.3 * x * x + 0.4 * (1.3 * y).sin() + 0.1 * x * y;
                pts.push(Point::new(x, y, z, 1.0));
            }
        }
        Scan::new("grid", 0.0, pts)
    }

    #[test]
    fn recovers_small_translation() {
        let src = surface_cloud();
        let truth = RigidTransform::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let tgt = src.transformed(&truth);
        let t = icp_align(&src, &tgt, &RigidTransform::identity(), 50, 1e-6).unwrap();
        assert!((t.translation() - Vector3::new(0.1, 0.0, 0.0)).norm() < 1e-3);
    }

    #[test]
    fn fixed_point_is_identity() {
        let src = surface_cloud();
        let t = icp_align(&src, &src, &RigidTransform::identity(), 50, 1e-4).unwrap();
        assert!((t.rotation() - Matrix3::identity()).norm() < 1e-6);
        assert!(t.translation().norm() < 1e-4);
    }

    #[test]
    fn recovers_five_degree_yaw() {
        let src = surface_cloud();
        let truth = RigidTransform::from_yaw(5f64.to_radians(), Vector3::zeros());
        let tgt = src.transformed(&truth);
        let t = icp_align(&src, &tgt, &RigidTransform::identity(), 100, 1e-9).unwrap();
        let err = t.inverse().compose(&truth).rotation_angle().to_degrees();
        assert!(err < 0.1, "rotation error {err}°");
    }

    #[test]
    fn best_iterate_never_worse_than_init() {
        let src = surface_cloud();
        let truth = RigidTransform::from_yaw(0.05, Vector3::new(0.2, -0.1, 0.05));
        let tgt = src.transformed(&truth);
        let out = icp_align_detailed(&src, &tgt, &RigidTransform::identity(), &IcpConfig::default()).unwrap();
        assert!(out.final_mean_distance() <= out.mean_distances[0]);
        assert!(out.mean_distances.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn empty_scan_is_error() {
        let src = surface_cloud();
        let empty = Scan::new("e", 0.0, vec![]);
        assert!(icp_align(&src, &empty, &RigidTransform::identity(), 5, 1e-4).is_err());
    }

    #[test]
    fn degenerate_correspondences_fail() {
        let src = Scan::new("a", 0.0, vec![Point::new(0.0, 0.0, 0.0, 0.0), Point::new(1.0, 0.0, 0.0, 0.0)]);
        let r = icp_align(&src, &src, &RigidTransform::identity(), 5, 1e-4);
        assert!(matches!(r, Err(Error::Alignment(_))));
    }
}
