//! Convolutional adapters over the patch grid and the residual recurrence
//! that inserts them every `k` blocks.
//!
//! One stage maps `z` (`n × C`) through
//! `a = relu(z·Wd + bd)`, `c = a + relu(conv3x3(a) + bm)`, `out = c·Wu + bu`.
//! The 3×3 convolution wraps around the column axis (the grid is a cylinder)
//! and zero-pads rows.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{
    read_f32_into, read_u32, slice1, slice1_mut, slice2, slice2_mut, slice3, slice3_mut, ParamSet,
};

use super::{BlockStack, PatchFeatureGrid};

const MAGIC: &[u8; 4] = b"ADP1";

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStage {
    pub wd: Array2<f64>,
    pub bd: Array1<f64>,
    /// `9 × h × h`, offset `(dr, dc)` at index `(dr + 1) · 3 + (dc + 1)`.
    pub conv: Array3<f64>,
    pub bm: Array1<f64>,
    pub wu: Array2<f64>,
    pub bu: Array1<f64>,
}

impl AdapterStage {
    fn zeros(c: usize, h: usize) -> Self {
        AdapterStage {
            wd: Array2::zeros((c, h)),
            bd: Array1::zeros(h),
            conv: Array3::zeros((9, h, h)),
            bm: Array1::zeros(h),
            wu: Array2::zeros((h, c)),
            bu: Array1::zeros(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub channels: usize,
    pub hidden: usize,
    pub stages: Vec<AdapterStage>,
}

impl AdapterParams {
    pub fn zeros(stages: usize, channels: usize, hidden: usize) -> Self {
        AdapterParams {
            channels,
            hidden,
            stages: (0..stages).map(|_| AdapterStage::zeros(channels, hidden)).collect(),
        }
    }

    /// Uniform fan-in initialization; the up-projection starts small so the
    /// initial output stays close to block-1 features.
    pub fn init(stages: usize, channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(stages, channels, hidden);
        let bd = (3.0 / channels as f64).sqrt();
        let bk = (3.0 / (9 * hidden) as f64).sqrt();
        let bu = 0.1 * (3.0 / hidden as f64).sqrt();
        for st in &mut p.stages {
            st.wd.mapv_inplace(|_| rng.gen_range(-bd..bd));
            st.conv.mapv_inplace(|_| rng.gen_range(-bk..bk));
            st.wu.mapv_inplace(|_| rng.gen_range(-bu..bu));
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.stages.len(), self.channels, self.hidden)
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }
}

impl ParamSet for AdapterParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for st in &self.stages {
            f(slice2(&st.wd));
            f(slice1(&st.bd));
            f(slice3(&st.conv));
            f(slice1(&st.bm));
            f(slice2(&st.wu));
            f(slice1(&st.bu));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for st in &mut self.stages {
            f(slice2_mut(&mut st.wd));
            f(slice1_mut(&mut st.bd));
            f(slice3_mut(&mut st.conv));
            f(slice1_mut(&mut st.bm));
            f(slice2_mut(&mut st.wu));
            f(slice1_mut(&mut st.bu));
        }
    }
}

/// Source patch of `p` under offset `o`, `None` beyond the top or bottom row.
fn neighbor(p: usize, o: usize, rows: usize, cols: usize) -> Option<usize> {
    let (r, c) = ((p / cols) as isize, (p % cols) as isize);
    let dr = (o / 3) as isize - 1;
    let dc = (o % 3) as isize - 1;
    let rr = r + dr;
    if rr < 0 || rr >= rows as isize {
        return None;
    }
    let cc = (c + dc).rem_euclid(cols as isize);
    Some(rr as usize * cols + cc as usize)
}

fn gather(a: &Array2<f64>, o: usize, rows: usize, cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros(a.dim());
    for p in 0..a.nrows() {
        if let Some(q) = neighbor(p, o, rows, cols) {
            out.row_mut(p).assign(&a.row(q));
        }
    }
    out
}

fn scatter_add(dst: &mut Array2<f64>, g: &Array2<f64>, o: usize, rows: usize, cols: usize) {
    for p in 0..g.nrows() {
        if let Some(q) = neighbor(p, o, rows, cols) {
            let mut row = dst.row_mut(q);
            row += &g.row(p);
        }
    }
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

fn relu_mask(g: &mut Array2<f64>, pre: &Array2<f64>) {
    g.zip_mut_with(pre, |gv, &p| {
        if p <= 0.0 {
            *gv = 0.0
        }
    });
}

#[derive(Debug, Clone)]
struct StageTape {
    z: Array2<f64>,
    a_pre: Array2<f64>,
    a: Array2<f64>,
    conv_pre: Array2<f64>,
    c: Array2<f64>,
}

/// Intermediate values needed by [`adapter_backward`].
#[derive(Debug, Clone)]
pub struct AdapterTape {
    rows: usize,
    cols: usize,
    stages: Vec<StageTape>,
}

fn stage_forward(st: &AdapterStage, z: Array2<f64>, rows: usize, cols: usize) -> (Array2<f64>, StageTape) {
    let a_pre = z.dot(&st.wd) + &st.bd;
    let a = relu(&a_pre);
    let mut conv_pre = Array2::zeros(a.dim());
    conv_pre += &st.bm;
    for o in 0..9 {
        conv_pre += &gather(&a, o, rows, cols).dot(&st.conv.index_axis(Axis(0), o));
    }
    let c = &a + &relu(&conv_pre);
    let out = c.dot(&st.wu) + &st.bu;
    (out, StageTape { z, a_pre, a, conv_pre, c })
}

fn stage_backward(
    st: &AdapterStage,
    tape: &StageTape,
    g_out: &Array2<f64>,
    grad: &mut AdapterStage,
    rows: usize,
    cols: usize,
) -> Array2<f64> {
    grad.wu += &tape.c.t().dot(g_out);
    grad.bu += &g_out.sum_axis(Axis(0));
    let gc = g_out.dot(&st.wu.t());

    let mut g_conv = gc.clone();
    relu_mask(&mut g_conv, &tape.conv_pre);
    grad.bm += &g_conv.sum_axis(Axis(0));
    let mut ga = gc;
    for o in 0..9 {
        let k = st.conv.index_axis(Axis(0), o);
        let shifted = gather(&tape.a, o, rows, cols);
        let mut gk = grad.conv.index_axis_mut(Axis(0), o);
        gk += &shifted.t().dot(&g_conv);
        scatter_add(&mut ga, &g_conv.dot(&k.t()), o, rows, cols);
    }

    relu_mask(&mut ga, &tape.a_pre);
    grad.wd += &tape.z.t().dot(&ga);
    grad.bd += &ga.sum_axis(Axis(0));
    ga.dot(&st.wd.t())
}

fn check_shapes(stack: &BlockStack, params: &AdapterParams) -> Result<()> {
    let expected = stack.depth() / stack.k_interval;
    if params.num_stages() != expected {
        return Err(Error::arg(format!(
            "adapter has {} stages, stack of {} blocks at interval {} needs {expected}",
            params.num_stages(),
            stack.depth(),
            stack.k_interval
        )));
    }
    let c = stack.block(1).ncols();
    if params.channels != c {
        return Err(Error::arg(format!("adapter width {} vs feature width {c}", params.channels)));
    }
    Ok(())
}

/// Adapter recurrence; the returned grid carries the untouched last-block token.
pub fn adapter_forward(stack: &BlockStack, params: &AdapterParams) -> Result<PatchFeatureGrid> {
    adapter_forward_taped(stack, params).map(|(g, _)| g)
}

pub fn adapter_forward_taped(
    stack: &BlockStack,
    params: &AdapterParams,
) -> Result<(PatchFeatureGrid, AdapterTape)> {
    check_shapes(stack, params)?;
    let (rows, cols, k) = (stack.rows, stack.cols, stack.k_interval);
    let mut y = stack.block(1).clone();
    let mut tapes = Vec::with_capacity(params.num_stages());
    for (i, st) in params.stages.iter().enumerate() {
        let z = &y + stack.block((i + 1) * k);
        let (out, tape) = stage_forward(st, z, rows, cols);
        y += &out;
        tapes.push(tape);
    }
    let grid = PatchFeatureGrid {
        rows,
        cols,
        patches: y,
        token: stack.last_token().clone(),
    };
    Ok((grid, AdapterTape { rows, cols, stages: tapes }))
}

/// Accumulates into `grad` the parameter gradient for upstream patch
/// gradient `g_patches`.
pub fn adapter_backward(
    params: &AdapterParams,
    tape: &AdapterTape,
    g_patches: &Array2<f64>,
    grad: &mut AdapterParams,
) {
    let mut gy = g_patches.clone();
    for (i, (st, t)) in params.stages.iter().zip(&tape.stages).enumerate().rev() {
        let gz = stage_backward(st, t, &gy, &mut grad.stages[i], tape.rows, tape.cols);
        if i > 0 {
            gy += &gz;
        }
    }
}

/// `ADP1` layout: magic, `u32` stages, `u32` C, `u32` hidden, then per stage
/// the little-endian `f32` blocks `Wd (C×h)`, `bd (h)`, `conv (9×h×h)`,
/// `bm (h)`, `Wu (h×C)`, `bu (C)`, each row-major.
pub fn encode_adapter(params: &AdapterParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.num_params());
    out.extend_from_slice(MAGIC);
    for v in [params.num_stages(), params.channels, params.hidden] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    params.visit(&mut |s| {
        for v in s {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    });
    out
}

pub fn decode_adapter(bytes: &[u8]) -> std::result::Result<AdapterParams, String> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err("missing ADP1 header".into());
    }
    let mut at = 4;
    let stages = read_u32(bytes, &mut at)? as usize;
    let c = read_u32(bytes, &mut at)? as usize;
    let h = read_u32(bytes, &mut at)? as usize;
    if c == 0 || h == 0 {
        return Err("zero channel or hidden width".into());
    }
    let mut p = AdapterParams::zeros(stages, c, h);
    if bytes.len() != 16 + 4 * p.num_params() {
        return Err(format!("expected {} bytes, found {}", 16 + 4 * p.num_params(), bytes.len()));
    }
    let mut err = None;
    p.visit_mut(&mut |s| {
        if err.is_none() {
            err = read_f32_into(bytes, &mut at, s).err();
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(p),
    }
}

pub fn write_adapter(path: &Path, params: &AdapterParams) -> Result<()> {
    fs::write(path, encode_adapter(params))?;
    Ok(())
}

pub fn read_adapter(path: &Path) -> Result<AdapterParams> {
    decode_adapter(&fs::read(path)?).map_err(|reason| Error::malformed(path, reason))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{collapsed_grid, shift_patch_rows};

    fn random_stack(rows: usize, cols: usize, c: usize, blocks: usize, k: usize, seed: u64) -> BlockStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks: Vec<Array2<f64>> = (0..blocks)
            .map(|_| Array2::from_shape_fn((rows * cols, c), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let tokens = blocks.iter().map(|b| b.mean_axis(Axis(0)).unwrap()).collect();
        BlockStack { rows, cols, blocks, tokens, k_interval: k }
    }

    /// Independent straight-line evaluation of one stage with explicit loops.
    fn stage_reference(st: &AdapterStage, z: &Array2<f64>, rows: usize, cols: usize) -> Array2<f64> {
        let (n, c) = z.dim();
        let h = st.bd.len();
        let mut a = Array2::<f64>::zeros((n, h));
        for p in 0..n {
            for j in 0..h {
                let mut s = st.bd[j];
                for i in 0..c {
                    s += z[[p, i]] * st.wd[[i, j]];
                }
                a[[p, j]] = s.max(0.0);
            }
        }
        let mut out = Array2::<f64>::zeros((n, c));
        for r in 0..rows {
            for col in 0..cols {
                let p = r * cols + col;
                let mut m = vec![0.0; h];
                for (j, mj) in m.iter_mut().enumerate() {
                    let mut s = st.bm[j];
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let rr = r as i64 + dr;
                            if rr < 0 || rr >= rows as i64 {
                                continue;
                            }
                            let cc = (col as i64 + dc + cols as i64) as usize % cols;
                            let q = rr as usize * cols + cc;
                            let o = ((dr + 1) * 3 + (dc + 1)) as usize;
                            for i in 0..h {
                                s += a[[q, i]] * st.conv[[o, i, j]];
                            }
                        }
                    }
                    *mj = a[[p, j]] + s.max(0.0);
                }
                for k in 0..c {
                    let mut s = st.bu[k];
                    for j in 0..h {
                        s += m[j] * st.wu[[j, k]];
                    }
                    out[[p, k]] = s;
                }
            }
        }
        out
    }

    #[test]
    fn zero_adapter_collapses_to_block_one() {
        let stack = random_stack(3, 8, 6, 12, 3, 1);
        let p = AdapterParams::zeros(4, 6, 4);
        let out = adapter_forward(&stack, &p).unwrap();
        assert_eq!(out, collapsed_grid(&stack));
    }

    #[test]
    fn single_stage_unrolls() {
        let stack = random_stack(2, 5, 4, 3, 3, 2);
        let p = AdapterParams::init(1, 4, 3, 7);
        let out = adapter_forward(&stack, &p).unwrap();
        let z = stack.block(1) + stack.block(3);
        let expected = stage_reference(&p.stages[0], &z, 2, 5) + stack.block(1);
        assert!((&out.patches - &expected).iter().all(|d| d.abs() < 1e-12));
        assert_eq!(&out.token, stack.last_token());
    }

    #[test]
    fn recurrence_matches_unrolled_reference() {
        let stack = random_stack(3, 7, 5, 12, 3, 3);
        let mut p = AdapterParams::init(4, 5, 4, 11);
        for st in &mut p.stages {
            st.bm.fill(0.05);
            st.bu.fill(-0.02);
        }
        let out = adapter_forward(&stack, &p).unwrap();
        let mut y = stage_reference(&p.stages[0], &(stack.block(1) + stack.block(3)), 3, 7) + stack.block(1);
        for i in 2..=4 {
            let z = &y + stack.block(3 * i);
            y = stage_reference(&p.stages[i - 1], &z, 3, 7) + &y;
        }
        assert!((&out.patches - &y).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn wrong_stage_count_rejected() {
        let stack = random_stack(2, 4, 3, 12, 3, 4);
        assert!(adapter_forward(&stack, &AdapterParams::zeros(3, 3, 2)).is_err());
        assert!(adapter_forward(&stack, &AdapterParams::zeros(4, 5, 2)).is_err());
    }

    #[test]
    fn column_shift_equivariance() {
        let (rows, cols) = (3, 9);
        let stack = random_stack(rows, cols, 5, 6, 2, 5);
        let p = AdapterParams::init(3, 5, 4, 6);
        let base = adapter_forward(&stack, &p).unwrap();
        for s in 0..cols {
            let shifted = BlockStack {
                blocks: stack.blocks.iter().map(|b| shift_patch_rows(b, rows, cols, s)).collect(),
                ..stack.clone()
            };
            let out = adapter_forward(&shifted, &p).unwrap();
            assert_eq!(out.patches, shift_patch_rows(&base.patches, rows, cols, s));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (rows, cols) = (2, 5);
        let stack = random_stack(rows, cols, 4, 6, 2, 8);
        let mut p = AdapterParams::init(3, 4, 3, 9);
        for st in &mut p.stages {
            st.wu.mapv_inplace(|v| v * 10.0);
            st.bd.fill(0.1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let probe = Array2::from_shape_fn((rows * cols, 4), |_| rng.gen_range(-1.0..1.0));
        let objective = |q: &AdapterParams| (&adapter_forward(&stack, q).unwrap().patches * &probe).sum();

        let (_, tape) = adapter_forward_taped(&stack, &p).unwrap();
        let mut grad = p.zeros_like();
        adapter_backward(&p, &tape, &probe, &mut grad);
        let analytic = grad.to_flat();
        let base = p.to_flat();
        let h = 1e-6;
        for idx in (0..base.len()).step_by(3) {
            let mut plus = base.clone();
            plus[idx] += h;
            let mut minus = base.clone();
            minus[idx] -= h;
            let mut qp = p.clone();
            qp.load_flat(&plus);
            let mut qm = p.clone();
            qm.load_flat(&minus);
            let fd = (objective(&qp) - objective(&qm)) / (2.0 * h);
            let err = (fd - analytic[idx]).abs() / (fd.abs().max(analytic[idx].abs()).max(1e-6));
            assert!(err < 1e-4, "param {idx}: fd {fd} analytic {}", analytic[idx]);
        }
    }

    #[test]
    fn adp1_round_trip() {
        let mut p = AdapterParams::init(2, 6, 3, 12);
        p.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v = *v as f32 as f64));
        let bytes = encode_adapter(&p);
        assert_eq!(&bytes[..4], b"ADP1");
        assert_eq!(&bytes[4..16], &[2, 0, 0, 0, 6, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(decode_adapter(&bytes).unwrap(), p);
        assert!(decode_adapter(&bytes[..bytes.len() - 2]).is_err());
    }
}
