//! Patch-feature extraction: a frozen toy block stack followed by trainable
//! convolutional adapters.

mod adapter;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{param_hash, slice1, slice2, ParamSet};
use crate::riv::{RivImage, CHANNELS};

pub use adapter::{
    adapter_backward, adapter_forward, adapter_forward_taped, decode_adapter, encode_adapter,
    read_adapter, write_adapter, AdapterParams, AdapterStage, AdapterTape,
};

pub const PATCH: usize = 14;
/// Per-channel mean, std, min, max.
pub const STATS_PER_PATCH: usize = 4 * CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Feature width C.
    pub channels: usize,
    /// Number of frozen blocks L.
    pub blocks: usize,
    /// Adapter interval k.
    pub k_interval: usize,
    /// Hidden width inside each adapter stage.
    pub adapter_hidden: usize,
    /// Seed of the frozen block weights.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: 64,
            blocks: 12,
            k_interval: 3,
            adapter_hidden: 32,
            seed: 0x5eed,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.adapter_hidden == 0 {
            return Err(Error::Config("encoder: channels and adapter_hidden must be > 0".into()));
        }
        if self.k_interval == 0 || self.blocks < self.k_interval {
            return Err(Error::Config("encoder: need blocks >= k_interval >= 1".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.blocks / self.k_interval
    }
}

/// `H′ × W′ × C` patch features (row-major patch order) and one global token.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureGrid {
    pub rows: usize,
    pub cols: usize,
    /// `(rows · cols) × C`; patch `(r, c)` lives at row `r · cols + c`.
    pub patches: Array2<f64>,
    pub token: Array1<f64>,
}

impl PatchFeatureGrid {
    pub fn new(rows: usize, cols: usize, patches: Array2<f64>, token: Array1<f64>) -> Result<Self> {
        if patches.nrows() != rows * cols || patches.ncols() != token.len() {
            return Err(Error::ShapeMismatch(format!(
                "grid {rows}x{cols} with patches {:?} and token {}",
                patches.dim(),
                token.len()
            )));
        }
        Ok(PatchFeatureGrid { rows, cols, patches, token })
    }

    pub fn channels(&self) -> usize {
        self.patches.ncols()
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_size(&self) -> usize {
        PATCH
    }

    /// Cyclic shift by `s` patch columns, the token untouched.
    pub fn column_shift(&self, s: usize) -> PatchFeatureGrid {
        PatchFeatureGrid {
            rows: self.rows,
            cols: self.cols,
            patches: shift_patch_rows(&self.patches, self.rows, self.cols, s),
            token: self.token.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.patches.iter().chain(self.token.iter()).all(|v| v.is_finite())
    }
}

/// Reorders patch rows of an `(rows · cols) × C` matrix so that column `q`
/// receives column `(q − s) mod cols`.
pub fn shift_patch_rows(m: &Array2<f64>, rows: usize, cols: usize, s: usize) -> Array2<f64> {
    let mut out = Array2::zeros(m.dim());
    let s = s % cols.max(1);
    for r in 0..rows {
        for q in 0..cols {
            let src = r * cols + (q + cols - s) % cols;
            out.row_mut(r * cols + q).assign(&m.row(src));
        }
    }
    out
}

/// Per-block patch features of the frozen stack.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStack {
    pub rows: usize,
    pub cols: usize,
    /// `blocks[b]` holds the patch features of block `b + 1`.
    pub blocks: Vec<Array2<f64>>,
    pub tokens: Vec<Array1<f64>>,
    pub k_interval: usize,
}

impl BlockStack {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Patch features of block `l`, 1-based.
    pub fn block(&self, l: usize) -> &Array2<f64> {
        &self.blocks[l - 1]
    }

    pub fn last_token(&self) -> &Array1<f64> {
        self.tokens.last().expect("non-empty stack")
    }
}

/// Frozen, seeded stand-in for a pre-trained patch encoder.
///
/// Each patch is summarized by 12 statistics; block 1 is a seeded affine map
/// of those followed by `tanh`, later blocks add a residual `tanh` layer. No
/// positional information enters, so whole-patch column shifts of the input
/// permute patch features exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub config: EncoderConfig,
    stem_w: Array2<f64>,
    stem_b: Array1<f64>,
    block_w: Vec<Array2<f64>>,
    block_b: Vec<Array1<f64>>,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

fn uniform_vector(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.gen_range(-bound..bound))
}

impl ToyEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let stem_w = uniform_matrix(&mut rng, STATS_PER_PATCH, c, 1.5);
        let stem_b = uniform_vector(&mut rng, c, 0.5);
        let bound = (3.0 / c as f64).sqrt();
        let mut block_w = Vec::new();
        let mut block_b = Vec::new();
        for _ in 1..config.blocks {
            block_w.push(uniform_matrix(&mut rng, c, c, bound));
            block_b.push(uniform_vector(&mut rng, c, 0.2));
        }
        Ok(ToyEncoder {
            config,
            stem_w,
            stem_b,
            block_w,
            block_b,
        })
    }

    pub fn grid_shape(height: usize, width: usize) -> (usize, usize) {
        (height / PATCH, width / PATCH)
    }

    /// Hash of every frozen weight.
    pub fn weight_hash(&self) -> u64 {
        param_hash(&FrozenView(self))
    }

    pub fn encode(&self, img: &RivImage) -> Result<BlockStack> {
        let (rows, cols) = Self::grid_shape(img.height(), img.width());
        if rows == 0 || cols == 0 {
            return Err(Error::arg(format!(
                "image {}x{} is smaller than one {PATCH}x{PATCH} patch",
                img.height(),
                img.width()
            )));
        }
        let stats = patch_statistics(img, rows, cols);
        let mut x = stats.dot(&self.stem_w) + &self.stem_b;
        x.mapv_inplace(f64::tanh);
        let mut blocks = Vec::with_capacity(self.config.blocks);
        let mut tokens = Vec::with_capacity(self.config.blocks);
        tokens.push(x.mean_axis(Axis(0)).expect("non-empty grid"));
        blocks.push(x);
        for (w, b) in self.block_w.iter().zip(&self.block_b) {
            let prev = blocks.last().unwrap();
            let mut h = prev.dot(w) + b;
            h.mapv_inplace(|v| 0.5 * v.tanh());
            let next = prev + &h;
            tokens.push(next.mean_axis(Axis(0)).expect("non-empty grid"));
            blocks.push(next);
        }
        Ok(BlockStack {
            rows,
            cols,
            blocks,
            tokens,
            k_interval: self.config.k_interval,
        })
    }
}

struct FrozenView<'a>(&'a ToyEncoder);

impl ParamSet for FrozenView<'_> {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice2(&self.0.stem_w));
        f(slice1(&self.0.stem_b));
        for (w, b) in self.0.block_w.iter().zip(&self.0.block_b) {
            f(slice2(w));
            f(slice1(b));
        }
    }

    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut [f64])) {
        unreachable!("frozen weights are read-only")
    }
}

/// `(rows · cols) × 12` matrix of per-patch channel statistics.
///
/// Invalid pixels contribute their stored zeros.
pub fn patch_statistics(img: &RivImage, rows: usize, cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows * cols, STATS_PER_PATCH));
    let n = (PATCH * PATCH) as f64;
    for pr in 0..rows {
        for pc in 0..cols {
            let mut row = out.row_mut(pr * cols + pc);
            for ch in 0..CHANNELS {
                let (mut sum, mut sq) = (0.0, 0.0);
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for v in pr * PATCH..(pr + 1) * PATCH {
                    for u in pc * PATCH..(pc + 1) * PATCH {
                        let x = img.get(v, u, ch) as f64;
                        sum += x;
                        sq += x * x;
                        lo = lo.min(x);
                        hi = hi.max(x);
                    }
                }
                let mean = sum / n;
                let var = (sq / n - mean * mean).max(0.0);
                row[4 * ch] = mean;
                row[4 * ch + 1] = var.sqrt();
                row[4 * ch + 2] = lo;
                row[4 * ch + 3] = hi;
            }
        }
    }
    out
}

/// Frozen encoding followed by the adapter recurrence.
pub fn encode(encoder: &ToyEncoder, img: &RivImage, params: &AdapterParams) -> Result<PatchFeatureGrid> {
    adapter_forward(&encoder.encode(img)?, params)
}

/// Block-1 patches and the last token, i.e. the output of a zero adapter.
pub fn collapsed_grid(stack: &BlockStack) -> PatchFeatureGrid {
    PatchFeatureGrid {
        rows: stack.rows,
        cols: stack.cols,
        patches: stack.block(1).clone(),
        token: stack.last_token().clone(),
    }
}
