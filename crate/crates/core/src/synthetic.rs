//! Ray-cast street scenes around a closed loop, with per-session nuisances,
//! so the pipeline can be trained and evaluated without external data.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::riv::{unproject_pixel, PixelCoord, RivConfig};
use crate::scan_geometry::{Point, Pose, Scan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    /// Mean radius of the loop road, meters.
    pub loop_radius: f64,
    pub sensor_height: f64,
    /// Rays beyond this distance return nothing.
    pub max_range: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 1,
            loop_radius: 55.0,
            sensor_height: 1.8,
            max_range: 60.0,
        }
    }
}

/// One traversal of the loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub seed: u64,
    /// Distance between consecutive scans along the road, meters.
    pub spacing: f64,
    pub speed: f64,
    pub start_time: f64,
    /// Peak lateral offset from the road center, meters.
    pub lateral_amplitude: f64,
    pub heading_noise_deg: f64,
    pub reflectivity_gain: f64,
    pub reflectivity_noise: f64,
    pub range_noise: f64,
    pub dropout: f64,
    /// Mean gap between parked cars, meters; 0 disables them.
    pub car_spacing: f64,
    pub reverse: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            seed: 11,
            spacing: 3.0,
            speed: 2.0,
            start_time: 0.0,
            lateral_amplitude: 1.0,
            heading_noise_deg: 2.0,
            reflectivity_gain: 1.0,
            reflectivity_noise: 6.0,
            range_noise: 0.02,
            dropout: 0.02,
            car_spacing: 18.0,
            reverse: false,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.loop_radius >= 20.0 && self.sensor_height > 0.0 && self.max_range > 0.0) {
            return Err(Error::Config("world: need loop_radius >= 20, positive sensor_height and max_range".into()));
        }
        Ok(())
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0 && self.speed > 0.0) {
            return Err(Error::Config("session: spacing and speed must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.reflectivity_gain > 0.0) {
            return Err(Error::Config("session: need 0 <= dropout < 1 and reflectivity_gain > 0".into()));
        }
        if !(self.range_noise >= 0.0 && self.reflectivity_noise >= 0.0 && self.car_spacing >= 0.0) {
            return Err(Error::Config("session: noise levels and car_spacing must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    /// Oriented box standing on the ground.
    Block { cx: f64, cy: f64, hx: f64, hy: f64, yaw: f64, height: f64 },
    /// Vertical cylinder standing on the ground.
    Column { cx: f64, cy: f64, radius: f64, height: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Obstacle {
    shape: Shape,
    reflectivity: f64,
}

impl Obstacle {
    fn center(&self) -> (f64, f64) {
        match self.shape {
            Shape::Block { cx, cy, .. } | Shape::Column { cx, cy, .. } => (cx, cy),
        }
    }

    fn extent(&self) -> f64 {
        match self.shape {
            Shape::Block { hx, hy, .. } => hx.hypot(hy),
            Shape::Column { radius, .. } => radius,
        }
    }

    fn hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match self.shape {
            Shape::Block { cx, cy, hx, hy, yaw, height } => {
                let (s, c) = yaw.sin_cos();
                let (px, py) = (o.x - cx, o.y - cy);
                let lo = [c * px + s * py, -s * px + c * py, o.z];
                let ld = [c * d.x + s * d.y, -s * d.x + c * d.y, d.z];
                let bounds = [(-hx, hx), (-hy, hy), (0.0, height)];
                let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
                for k in 0..3 {
                    if ld[k].abs() < 1e-12 {
                        if lo[k] < bounds[k].0 || lo[k] > bounds[k].1 {
                            return None;
                        }
                        continue;
                    }
                    let a = (bounds[k].0 - lo[k]) / ld[k];
                    let b = (bounds[k].1 - lo[k]) / ld[k];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                (t0 <= t1 && t0 > 1e-9).then_some(t0)
            }
            Shape::Column { cx, cy, radius, height } => {
                let (px, py) = (o.x - cx, o.y - cy);
                let a = d.x * d.x + d.y * d.y;
                if a < 1e-12 {
                    return None;
                }
                let b = px * d.x + py * d.y;
                let cc = px * px + py * py - radius * radius;
                let disc = b * b - a * cc;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / a;
                let z = o.z + t * d.z;
                (t > 1e-9 && (0.0..=height).contains(&z)).then_some(t)
            }
        }
    }
}

/// Closed road centerline sampled by arc length.
#[derive(Debug, Clone, PartialEq)]
struct Centerline {
    points: Vec<(f64, f64)>,
    arc: Vec<f64>,
}

impl Centerline {
    fn new(radius: f64, phases: (f64, f64)) -> Self {
        let n = 4096;
        let points: Vec<(f64, f64)> = (0..=n)
            .map(|i| {
                let th = 2.0 * PI * i as f64 / n as f64;
                let r = radius * (1.0 + 0.12 * (2.0 * th + phases.0).sin() + 0.08 * (3.0 * th + phases.1).cos());
                (r * th.cos(), r * th.sin())
            })
            .collect();
        let mut arc = vec![0.0];
        for w in points.windows(2) {
            let step = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            arc.push(arc.last().unwrap() + step);
        }
        Centerline { points, arc }
    }

    fn length(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    /// Position and heading at arc length `s` (wrapped).
    fn at(&self, s: f64) -> ((f64, f64), f64) {
        let s = s.rem_euclid(self.length());
        let i = self.arc.partition_point(|&a| a <= s).clamp(1, self.arc.len() - 1);
        let (a0, a1) = (self.arc[i - 1], self.arc[i]);
        let f = if a1 > a0 { (s - a0) / (a1 - a0) } else { 0.0 };
        let (p0, p1) = (self.points[i - 1], self.points[i]);
        let pos = (p0.0 + f * (p1.0 - p0.0), p0.1 + f * (p1.1 - p0.1));
        (pos, (p1.1 - p0.1).atan2(p1.0 - p0.0))
    }

    /// Point offset to the left of the road by `lateral` meters.
    fn offset(&self, s: f64, lateral: f64) -> ((f64, f64), f64) {
        let ((x, y), h) = self.at(s);
        ((x - lateral * h.sin(), y + lateral * h.cos()), h)
    }

    fn clearance(&self, x: f64, y: f64) -> f64 {
        self.points
            .iter()
            .step_by(8)
            .map(|p| (p.0 - x).hypot(p.1 - y))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Static scene: loop road lined with buildings, poles and trees.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    road: Centerline,
    statics: Vec<Obstacle>,
}

fn block_corners_clear(road: &Centerline, cx: f64, cy: f64, hx: f64, hy: f64, yaw: f64, min: f64) -> bool {
    let (s, c) = yaw.sin_cos();
    [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0), (0.0, 0.0)]
        .iter()
        .all(|&(a, b)| {
            let (lx, ly) = (a * hx, b * hy);
            road.clearance(cx + c * lx - s * ly, cy + s * lx + c * ly) >= min
        })
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let road = Centerline::new(config.loop_radius, (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)));
        let len = road.length();
        let mut statics = Vec::new();

        for side in [-1.0, 1.0] {
            let mut s = rng.gen_range(0.0..6.0);
            while s < len {
                let length = rng.gen_range(6.0..20.0);
                let depth = rng.gen_range(6.0..12.0);
                let setback = rng.gen_range(8.0..15.0);
                let height = rng.gen_range(3.0..22.0);
                let refl = rng.gen_range(30.0..200.0);
                let keep = rng.gen_bool(0.85);
                let ((cx, cy), yaw) = road.offset(s + length / 2.0, side * (setback + depth / 2.0));
                let (hx, hy) = (length / 2.0, depth / 2.0);
                if keep && block_corners_clear(&road, cx, cy, hx, hy, yaw, 6.5) {
                    statics.push(Obstacle { shape: Shape::Block { cx, cy, hx, hy, yaw, height }, reflectivity: refl });
                }
                s += length + rng.gen_range(1.0..9.0);
            }

            let mut s = rng.gen_range(0.0..10.0);
            while s < len {
                let ((cx, cy), _) = road.offset(s, side * rng.gen_range(5.5..7.0));
                let radius = rng.gen_range(0.12..0.3);
                let height = rng.gen_range(4.0..9.0);
                statics.push(Obstacle {
                    shape: Shape::Column { cx, cy, radius, height },
                    reflectivity: rng.gen_range(150.0..250.0),
                });
                s += rng.gen_range(8.0..26.0);
            }

            let mut s = rng.gen_range(0.0..10.0);
            while s < len {
                let ((cx, cy), _) = road.offset(s, side * rng.gen_range(6.5..8.5));
                let radius = rng.gen_range(0.6..1.6);
                let height = rng.gen_range(2.5..6.0);
                statics.push(Obstacle {
                    shape: Shape::Column { cx, cy, radius, height },
                    reflectivity: rng.gen_range(20.0..80.0),
                });
                s += rng.gen_range(6.0..22.0);
            }
        }
        Ok(World { config, road, statics })
    }

    pub fn loop_length(&self) -> f64 {
        self.road.length()
    }

    pub fn session(&self, config: &SessionConfig) -> Result<Session> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e55_10e5);
        let len = self.road.length();
        let count = (len / config.spacing).floor() as usize;
        let phase = rng.gen_range(0.0..config.spacing);
        let (w1, w2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
        let heading = Normal::new(0.0, config.heading_noise_deg.to_radians()).map_err(|e| Error::Config(e.to_string()))?;

        let poses = (0..count)
            .map(|k| {
                let along = k as f64 * config.spacing;
                let s = if config.reverse { phase - along } else { phase + along };
                let u = 2.0 * PI * s / len;
                let lateral = config.lateral_amplitude * (0.6 * (2.0 * u + w1).sin() + 0.4 * (5.0 * u + w2).sin());
                let ((x, y), h) = self.road.offset(s, lateral);
                let yaw = h + if config.reverse { PI } else { 0.0 } + heading.sample(&mut rng);
                let t = config.start_time + along / config.speed;
                Pose::planar(t, x, y, self.config.sensor_height, yaw)
            })
            .collect();

        let mut cars = Vec::new();
        if config.car_spacing > 0.0 {
            let mut s = rng.gen_range(0.0..config.car_spacing);
            while s < len {
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let ((cx, cy), yaw) = self.road.offset(s, side * rng.gen_range(3.6..4.6));
                cars.push(Obstacle {
                    shape: Shape::Block { cx, cy, hx: rng.gen_range(2.0..2.6), hy: rng.gen_range(0.85..1.0), yaw, height: rng.gen_range(1.3..1.9) },
                    reflectivity: rng.gen_range(40.0..250.0),
                });
                s += rng.gen_range(0.3..1.7) * config.car_spacing;
            }
        }
        Ok(Session { config: *config, poses, cars })
    }

    /// Ray-casts one pixel-centered beam per RIV pixel from `pose` of `session`.
    pub fn scan(&self, session: &Session, k: usize, riv: &RivConfig) -> Scan {
        let pose = &session.poses[k];
        let cfg = &session.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ k as u64);
        let range_noise = Normal::new(0.0, cfg.range_noise).expect("finite sigma");
        let refl_noise = Normal::new(0.0, cfg.reflectivity_noise).expect("finite sigma");
        let max_range = self.config.max_range;
        let origin = pose.translation;
        let nearby: Vec<&Obstacle> = self
            .statics
            .iter()
            .chain(&session.cars)
            .filter(|o| {
                let (cx, cy) = o.center();
                (cx - origin.x).hypot(cy - origin.y) <= max_range + o.extent()
            })
            .collect();
        let rot = pose.rotation.to_rotation_matrix();

        let mut points = Vec::with_capacity(riv.width * riv.height);
        for v in 0..riv.height {
            for u in 0..riv.width {
                let dir = unproject_pixel(PixelCoord { u, v }, 1.0, riv);
                let world_dir = rot * dir;
                let mut best: Option<(f64, f64)> = None;
                if world_dir.z < -1e-9 {
                    let t = -origin.z / world_dir.z;
                    let (gx, gy) = (origin.x + t * world_dir.x, origin.y + t * world_dir.y);
                    best = Some((t, ground_reflectivity(gx, gy)));
                }
                for o in &nearby {
                    if let Some(t) = o.hit(&origin, &world_dir) {
                        if best.map_or(true, |(b, _)| t < b) {
                            best = Some((t, o.reflectivity));
                        }
                    }
                }
                let noise = range_noise.sample(&mut rng);
                let dn = refl_noise.sample(&mut rng);
                let drop = rng.gen_bool(cfg.dropout);
                let Some((t, refl)) = best else { continue };
                if t > max_range || drop {
                    continue;
                }
                let r = (t + noise).max(0.1);
                let refl = (refl * cfg.reflectivity_gain + dn).clamp(0.0, 255.0);
                points.push(Point::new(dir.x * r, dir.y * r, dir.z * r, refl));
            }
        }
        Scan::new(format!("s{:x}_{k:04}", cfg.seed), pose.timestamp, points)
    }
}

fn ground_reflectivity(x: f64, y: f64) -> f64 {
    let cell = ((x / 4.0).floor() as i64).wrapping_mul(73_856_093) ^ ((y / 4.0).floor() as i64).wrapping_mul(19_349_663);
    25.0 + (cell.rem_euclid(17)) as f64 * 1.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub config: SessionConfig,
    pub poses: Vec<Pose>,
    cars: Vec<Obstacle>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Sensor layout used for the desk-scale experiments: 3 × 48 patches.
pub fn desk_riv_config() -> RivConfig {
    RivConfig {
        width: 672,
        height: 42,
        fov_up: 25f64.to_radians(),
        fov_total: 40f64.to_radians(),
        max_range: 60.0,
        knn_k: 8,
        wrap_cols: 28,
        ..RivConfig::default()
    }
}

/// Nuisances of the second traversal: other lane offsets, recalibrated
/// reflectivity, different parked cars, later start.
pub fn revisit_session(seed: u64, start_time: f64) -> SessionConfig {
    SessionConfig {
        seed,
        start_time,
        lateral_amplitude: 1.8,
        heading_noise_deg: 4.0,
        reflectivity_gain: 0.6,
        reflectivity_noise: 10.0,
        range_noise: 0.03,
        dropout: 0.05,
        car_spacing: 14.0,
        ..SessionConfig::default()
    }
}
