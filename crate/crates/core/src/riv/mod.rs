//! Three-channel range-image view (RIV): reflectivity, normalized range and
//! normal ratio per pixel of a cylindrical projection.

mod image;
mod io;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan_geometry::{knn, KdTree, Point, Scan};

pub use image::RivImage;
pub use io::{decode_riv, encode_riv, read_riv, write_riv};

pub const CHANNELS: usize = 3;
pub const CH_REFLECTIVITY: usize = 0;
pub const CH_RANGE: usize = 1;
pub const CH_NORMAL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RivConfig {
    pub width: usize,
    pub height: usize,
    /// Upper bound of the vertical field of view, radians.
    pub fov_up: f64,
    /// Total vertical field of view, radians.
    pub fov_total: f64,
    pub max_range: f64,
    pub knn_k: usize,
    pub wrap_cols: usize,
    pub normal_eps: f64,
    pub normal_log_cap: f64,
}

impl Default for RivConfig {
    fn default() -> Self {
        RivConfig {
            width: 1022,
            height: 126,
            fov_up: 11.25f64.to_radians(),
            fov_total: 22.5f64.to_radians(),
            max_range: 200.0,
            knn_k: 8,
            wrap_cols: 28,
            normal_eps: 1e-6,
            normal_log_cap: 1e6f64.ln(),
        }
    }
}

impl RivConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("riv: width and height must be positive".into()));
        }
        if !(self.fov_up > 0.0 && self.fov_up < self.fov_total) {
            return Err(Error::Config("riv: need 0 < fov_up < fov_total".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config("riv: max_range must be positive".into()));
        }
        if self.knn_k < 3 {
            return Err(Error::Config("riv: knn_k must be at least 3".into()));
        }
        if !(self.normal_eps > 0.0 && self.normal_log_cap > 0.0) {
            return Err(Error::Config("riv: normal_eps and normal_log_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelCoord {
    /// Column.
    pub u: usize,
    /// Row.
    pub v: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub pixel: PixelCoord,
    pub range: f64,
}

/// Maps a point to its pixel, or `None` when it is the origin, beyond
/// `max_range`, or outside the vertical field of view.
pub fn project_point(p: &Point, cfg: &RivConfig) -> Option<Projected> {
    let r = p.range();
    if !(r > 0.0) || r > cfg.max_range {
        return None;
    }
    let w = cfg.width as f64;
    let h = cfg.height as f64;
    let u = (0.5 * (1.0 - p.y.atan2(p.x) / std::f64::consts::PI) * w).floor();
    let u = u.clamp(0.0, w - 1.0) as usize;
    let v = ((cfg.fov_up - (p.z / r).asin()) / cfg.fov_total * h).floor();
    if !(v >= 0.0 && v < h) {
        return None;
    }
    Some(Projected {
        pixel: PixelCoord { u, v: v as usize },
        range: r,
    })
}

/// Point at the center of pixel `(u, v)` at distance `range`.
pub fn unproject_pixel(pixel: PixelCoord, range: f64, cfg: &RivConfig) -> Vector3<f64> {
    let pi = std::f64::consts::PI;
    let azimuth = pi * (1.0 - 2.0 * (pixel.u as f64 + 0.5) / cfg.width as f64);
    let elevation = cfg.fov_up - (pixel.v as f64 + 0.5) / cfg.height as f64 * cfg.fov_total;
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    Vector3::new(range * ce * ca, range * ce * sa, range * se)
}

/// Normalized log singular-value ratio of the neighborhood covariance.
fn normal_ratio_of(points: &[Point], neighbors: &[usize], eps: f64, log_cap: f64) -> f64 {
    let k = neighbors.len() as f64;
    let mean = neighbors
        .iter()
        .map(|&i| points[i].position())
        .sum::<Vector3<f64>>()
        / k;
    let mut cov = Matrix3::zeros();
    for &i in neighbors {
        let d = points[i].position() - mean;
        cov += d * d.transpose();
    }
    cov /= k;
    let sv = cov.singular_values();
    let (s_max, s_min) = (sv.max(), sv.min().max(0.0));
    let raw = ((s_max + eps) / (s_min + eps)).ln();
    (raw / log_cap).clamp(0.0, 1.0)
}

/// Normal-ratio channel value for `scan.points[idx]` using its `k` nearest neighbors
/// (the point itself included).
pub fn normal_ratio(scan: &Scan, idx: usize, k: usize, eps: f64, log_cap: f64) -> Result<f64> {
    if idx >= scan.len() {
        return Err(Error::arg(format!("point index {idx} out of range")));
    }
    if k > scan.len() {
        return Err(Error::arg(format!("k = {k} exceeds scan size {}", scan.len())));
    }
    if k == 0 {
        return Err(Error::arg("k must be positive"));
    }
    let neighbors = knn(scan, &scan.points[idx], k)?;
    Ok(normal_ratio_of(&scan.points, &neighbors, eps, log_cap))
}

/// Reflectivity divided by 255; scans exceeding 255 are min-max rescaled first.
fn reflectivity_normalizer(scan: &Scan) -> impl Fn(f64) -> f32 {
    let (min, max) = scan.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.reflectivity), hi.max(p.reflectivity))
    });
    let rescale = max > 255.0;
    move |r: f64| {
        let r = if rescale {
            if max > min {
                255.0 * (r - min) / (max - min)
            } else {
                0.0
            }
        } else {
            r
        };
        (r / 255.0).clamp(0.0, 1.0) as f32
    }
}

/// Per-pixel index of the point that won the pixel (smallest range; lower index on ties).
pub fn pixel_winners(scan: &Scan, cfg: &RivConfig) -> Vec<Option<(usize, f64)>> {
    let mut winners: Vec<Option<(usize, f64)>> = vec![None; cfg.width * cfg.height];
    for (i, p) in scan.points.iter().enumerate() {
        if let Some(pr) = project_point(p, cfg) {
            let slot = &mut winners[pr.pixel.v * cfg.width + pr.pixel.u];
            match slot {
                Some((_, r)) if *r <= pr.range => {}
                _ => *slot = Some((i, pr.range)),
            }
        }
    }
    winners
}

/// Projects a scan; collisions keep the nearest point.
pub fn project_scan(scan: &Scan, cfg: &RivConfig) -> Result<RivImage> {
    if scan.is_empty() {
        return Err(Error::arg("cannot project an empty scan"));
    }
    let winners = pixel_winners(scan, cfg);
    let tree = KdTree::new(scan.positions());
    let k = cfg.knn_k.min(scan.len());
    let refl = reflectivity_normalizer(scan);

    let channels: Vec<Option<[f32; 3]>> = winners
        .par_iter()
        .map(|w| {
            w.map(|(i, r)| {
                let p = &scan.points[i];
                let nbrs = tree.knn(&p.as_array(), k);
                let nr = normal_ratio_of(&scan.points, &nbrs, cfg.normal_eps, cfg.normal_log_cap);
                [refl(p.reflectivity), (r / cfg.max_range) as f32, nr as f32]
            })
        })
        .collect();

    let mut img = RivImage::zeros(cfg.height, cfg.width);
    for (pix, ch) in channels.into_iter().enumerate() {
        if let Some(ch) = ch {
            img.set_pixel(pix / cfg.width, pix % cfg.width, ch);
        }
    }
    Ok(img)
}

/// Like [`project_scan`] but leaves the normal-ratio channel at zero, which
/// skips the neighbor search.
pub fn project_geometry(scan: &Scan, cfg: &RivConfig) -> Result<RivImage> {
    if scan.is_empty() {
        return Err(Error::arg("cannot project an empty scan"));
    }
    let refl = reflectivity_normalizer(scan);
    let mut img = RivImage::zeros(cfg.height, cfg.width);
    for (pix, w) in pixel_winners(scan, cfg).into_iter().enumerate() {
        if let Some((i, r)) = w {
            let ch = [refl(scan.points[i].reflectivity), (r / cfg.max_range) as f32, 0.0];
            img.set_pixel(pix / cfg.width, pix % cfg.width, ch);
        }
    }
    Ok(img)
}

/// Points at the centers of the valid pixels, at their stored ranges.
pub fn image_to_scan(img: &RivImage, cfg: &RivConfig, id: impl Into<String>, timestamp: f64) -> Result<Scan> {
    if img.height() != cfg.height || img.width() != cfg.width {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs configured {}x{}",
            img.height(),
            img.width(),
            cfg.height,
            cfg.width
        )));
    }
    let mut points = Vec::with_capacity(img.valid_count());
    for v in 0..img.height() {
        for u in 0..img.width() {
            if let Some([refl, range, _]) = img.pixel(v, u) {
                let p = unproject_pixel(PixelCoord { u, v }, range as f64 * cfg.max_range, cfg);
                points.push(Point::new(p.x, p.y, p.z, refl as f64 * 255.0));
            }
        }
    }
    Ok(Scan::new(id, timestamp, points))
}

/// Appends the last `wrap_cols` columns on the left and the first `wrap_cols`
/// on the right.
pub fn wrap_pad(img: &RivImage, wrap_cols: usize) -> Result<RivImage> {
    let w = img.width();
    if wrap_cols > w {
        return Err(Error::arg(format!("wrap_cols {wrap_cols} exceeds width {w}")));
    }
    let out_w = w + 2 * wrap_cols;
    let mut out = RivImage::zeros(img.height(), out_w);
    for v in 0..img.height() {
        for q in 0..out_w {
            let src = (q + w - wrap_cols) % w;
            out.copy_pixel_from(v, q, img, v, src);
        }
    }
    Ok(out)
}

/// Per-column linear resampling to `new_h` rows (align-corners convention).
///
/// The validity mask is interpolated the same way and thresholded at 0.5;
/// pixels that end up invalid are zeroed.
pub fn resize_vertical(img: &RivImage, new_h: usize) -> Result<RivImage> {
    if new_h == 0 {
        return Err(Error::arg("new_h must be positive"));
    }
    let h = img.height();
    if new_h == h {
        return Ok(img.clone());
    }
    let mut out = RivImage::zeros(new_h, img.width());
    for r in 0..new_h {
        let pos = if new_h == 1 {
            0.0
        } else {
            r as f64 * (h - 1) as f64 / (new_h - 1) as f64
        };
        let lo = (pos.floor() as usize).min(h - 1);
        let hi = (lo + 1).min(h - 1);
        let t = pos - lo as f64;
        for u in 0..img.width() {
            let m = (1.0 - t) * img.is_valid(lo, u) as u8 as f64 + t * img.is_valid(hi, u) as u8 as f64;
            if m < 0.5 {
                continue;
            }
            let mut ch = [0f32; 3];
            for (c, slot) in ch.iter_mut().enumerate() {
                let a = img.get(lo, u, c) as f64;
                let b = img.get(hi, u, c) as f64;
                *slot = ((1.0 - t) * a + t * b) as f32;
            }
            out.set_pixel(r, u, ch);
        }
    }
    Ok(out)
}
