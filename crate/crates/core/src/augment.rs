//! Training-time image augmentation: cyclic yaw shift and occlusion masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::riv::RivImage;

pub const SQUARE_MASK_RATIO_CAP: f64 = 0.4;
pub const CYL_MASK_WIDTH_CAP: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Cyclic column shift.
    pub yaw_shift: usize,
    /// Upper bound on the fraction of the image covered by square masks.
    pub square_mask_ratio_max: f64,
    /// Upper bound on the cylindrical band width as a fraction of W.
    pub cyl_mask_width_max: f64,
    pub line_mask_count_max: usize,
    pub rng_seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            yaw_shift: 0,
            square_mask_ratio_max: SQUARE_MASK_RATIO_CAP,
            cyl_mask_width_max: CYL_MASK_WIDTH_CAP,
            line_mask_count_max: 3,
            rng_seed: 0,
        }
    }
}

impl AugmentSpec {
    /// No-op augmentation.
    pub fn identity() -> Self {
        AugmentSpec {
            yaw_shift: 0,
            square_mask_ratio_max: 0.0,
            cyl_mask_width_max: 0.0,
            line_mask_count_max: 0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=SQUARE_MASK_RATIO_CAP).contains(&self.square_mask_ratio_max) {
            return Err(Error::Config(format!(
                "augment: square_mask_ratio_max must lie in [0, {SQUARE_MASK_RATIO_CAP}]"
            )));
        }
        if !(0.0..=CYL_MASK_WIDTH_CAP).contains(&self.cyl_mask_width_max) {
            return Err(Error::Config(format!(
                "augment: cyl_mask_width_max must lie in [0, {CYL_MASK_WIDTH_CAP}]"
            )));
        }
        Ok(())
    }

    pub fn validate_for(&self, width: usize) -> Result<()> {
        self.validate()?;
        if self.yaw_shift >= width {
            return Err(Error::arg(format!("yaw_shift {} must be < W = {width}", self.yaw_shift)));
        }
        Ok(())
    }
}

/// Column `q` of the output is column `(q − s) mod W` of the input.
pub fn yaw_shift(img: &RivImage, s: usize) -> RivImage {
    let w = img.width();
    let s = s % w.max(1);
    let mut out = RivImage::zeros(img.height(), w);
    for v in 0..img.height() {
        for q in 0..w {
            out.copy_pixel_from(v, q, img, v, (q + w - s) % w);
        }
    }
    out
}

/// Axis-aligned rectangle whose columns wrap around the image seam.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WrapRect {
    pub row: usize,
    pub rows: usize,
    pub col: usize,
    pub cols: usize,
}

impl WrapRect {
    fn for_each_pixel(&self, height: usize, width: usize, mut f: impl FnMut(usize, usize)) {
        for v in self.row..(self.row + self.rows).min(height) {
            for dc in 0..self.cols.min(width) {
                f(v, (self.col + dc) % width);
            }
        }
    }
}

/// Concrete masks drawn from an [`AugmentSpec`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskPlan {
    pub squares: Vec<WrapRect>,
    pub cylinder: Option<WrapRect>,
    pub lines: Vec<WrapRect>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.squares.is_empty() && self.cylinder.is_none() && self.lines.is_empty()
    }

    /// The same plan expressed in coordinates shifted by `s` columns.
    pub fn shifted(&self, s: usize, width: usize) -> MaskPlan {
        let shift = |r: &WrapRect| WrapRect {
            col: (r.col + s) % width,
            ..*r
        };
        MaskPlan {
            squares: self.squares.iter().map(shift).collect(),
            cylinder: self.cylinder.as_ref().map(shift),
            lines: self.lines.iter().map(shift).collect(),
        }
    }

    pub fn rects(&self) -> impl Iterator<Item = &WrapRect> {
        self.squares.iter().chain(self.cylinder.iter()).chain(self.lines.iter())
    }

    /// Pixels covered by the square masks alone.
    pub fn square_area(&self, height: usize, width: usize) -> usize {
        let mut hit = vec![false; height * width];
        for r in &self.squares {
            r.for_each_pixel(height, width, |v, u| hit[v * width + u] = true);
        }
        hit.iter().filter(|&&h| h).count()
    }
}

/// Draws masks uniformly within the caps of `spec`.
pub fn sample_masks(height: usize, width: usize, spec: &AugmentSpec) -> MaskPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut plan = MaskPlan::default();
    if height == 0 || width == 0 {
        return plan;
    }

    if spec.square_mask_ratio_max > 0.0 {
        let ratio = rng.gen_range(0.0..=spec.square_mask_ratio_max);
        let budget = (ratio * (height * width) as f64).floor() as usize;
        let max_side = (height.min(width) / 2).max(1);
        let mut covered = vec![false; height * width];
        let mut area = 0;
        for _ in 0..64 {
            if area >= budget {
                break;
            }
            let side = rng.gen_range(1..=max_side);
            let rect = WrapRect {
                row: rng.gen_range(0..=height - side),
                rows: side,
                col: rng.gen_range(0..width),
                cols: side,
            };
            let mut added = 0;
            rect.for_each_pixel(height, width, |v, u| added += !covered[v * width + u] as usize);
            if area + added > budget {
                continue;
            }
            rect.for_each_pixel(height, width, |v, u| covered[v * width + u] = true);
            area += added;
            plan.squares.push(rect);
        }
    }

    if spec.cyl_mask_width_max > 0.0 {
        let frac = rng.gen_range(0.0..=spec.cyl_mask_width_max);
        let cols = (frac * width as f64).floor() as usize;
        if cols > 0 {
            plan.cylinder = Some(WrapRect {
                row: 0,
                rows: height,
                col: rng.gen_range(0..width),
                cols,
            });
        }
    }

    if spec.line_mask_count_max > 0 {
        let count = rng.gen_range(0..=spec.line_mask_count_max);
        for _ in 0..count {
            let rows = rng.gen_range(1..=3usize.min(height));
            let row = rng.gen_range(0..=height - rows);
            let rect = if rng.gen_bool(0.5) {
                WrapRect { row, rows, col: 0, cols: width }
            } else {
                let cols = rng.gen_range(1..=width);
                WrapRect { row, rows, col: rng.gen_range(0..width), cols }
            };
            plan.lines.push(rect);
        }
    }
    plan
}

/// Zeroes every pixel covered by `plan` and clears its validity bit.
pub fn apply_plan(img: &RivImage, plan: &MaskPlan) -> RivImage {
    let mut out = img.clone();
    let (h, w) = (img.height(), img.width());
    for rect in plan.rects() {
        rect.for_each_pixel(h, w, |v, u| out.clear_pixel(v, u));
    }
    out
}

/// Samples masks from `spec` (seeded) and applies them.
pub fn apply_masks(img: &RivImage, spec: &AugmentSpec) -> Result<RivImage> {
    spec.validate()?;
    let plan = sample_masks(img.height(), img.width(), spec);
    Ok(apply_plan(img, &plan))
}

/// Yaw shift followed by masking.
pub fn augment(img: &RivImage, spec: &AugmentSpec) -> Result<RivImage> {
    spec.validate_for(img.width())?;
    apply_masks(&yaw_shift(img, spec.yaw_shift), spec)
}
