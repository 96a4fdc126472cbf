//! Optimal-transport pooling of patch features into a global descriptor.

mod io;
mod sinkhorn;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::PatchFeatureGrid;
use crate::error::{Error, Result};
use crate::params::{slice1, slice1_mut, slice2, slice2_mut, ParamSet};

pub use io::{
    decode_descriptors, encode_descriptors, format_sidecar, parse_sidecar, read_descriptors,
    sidecar_path, write_descriptors, DescriptorMeta,
};
pub use sinkhorn::{marginal_residual, sinkhorn, sinkhorn_backward, sinkhorn_taped, SinkhornTape};

/// Pre-normalization norms below this mark the descriptor invalid.
pub const ZERO_NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateConfig {
    /// Cluster count m.
    pub clusters: usize,
    /// Per-cluster dimension l.
    pub cluster_dim: usize,
    /// Global embedding dimension e.
    pub global_dim: usize,
    pub token_hidden: usize,
    pub sinkhorn_iters: usize,
    pub lambda_ot: f64,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        AggregateConfig {
            clusters: 128,
            cluster_dim: 64,
            global_dim: 256,
            token_hidden: 512,
            sinkhorn_iters: 100,
            lambda_ot: 1.0,
        }
    }
}

impl AggregateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.cluster_dim == 0 || self.global_dim == 0 || self.token_hidden == 0 {
            return Err(Error::Config("aggregate: m, l, e and token_hidden must be > 0".into()));
        }
        if self.sinkhorn_iters == 0 || !(self.lambda_ot > 0.0) {
            return Err(Error::Config("aggregate: need sinkhorn_iters >= 1 and lambda_ot > 0".into()));
        }
        Ok(())
    }

    pub fn descriptor_dim(&self) -> usize {
        self.clusters * self.cluster_dim + self.global_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateParams {
    pub config: AggregateConfig,
    pub channels: usize,
    /// Score map `C → m`.
    pub ws: Array2<f64>,
    pub bs: Array1<f64>,
    /// Feature map `C → l`.
    pub wf: Array2<f64>,
    pub bf: Array1<f64>,
    /// Token MLP `C → hidden → e`.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl AggregateParams {
    pub fn zeros(config: AggregateConfig, channels: usize) -> Self {
        let (m, l, e, h) = (config.clusters, config.cluster_dim, config.global_dim, config.token_hidden);
        AggregateParams {
            config,
            channels,
            ws: Array2::zeros((channels, m)),
            bs: Array1::zeros(m),
            wf: Array2::zeros((channels, l)),
            bf: Array1::zeros(l),
            w1: Array2::zeros((channels, h)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((h, e)),
            b2: Array1::zeros(e),
        }
    }

    /// Uniform fan-in initialization with zero biases.
    pub fn init(config: AggregateConfig, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config, channels);
        let bc = (3.0 / channels as f64).sqrt();
        let bh = (3.0 / config.token_hidden as f64).sqrt();
        p.ws.mapv_inplace(|_| rng.gen_range(-bc..bc));
        p.wf.mapv_inplace(|_| rng.gen_range(-bc..bc));
        p.w1.mapv_inplace(|_| rng.gen_range(-bc..bc));
        p.w2.mapv_inplace(|_| rng.gen_range(-bh..bh));
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config, self.channels)
    }

    pub fn descriptor_dim(&self) -> usize {
        self.config.descriptor_dim()
    }
}

impl ParamSet for AggregateParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice2(&self.ws));
        f(slice1(&self.bs));
        f(slice2(&self.wf));
        f(slice1(&self.bf));
        f(slice2(&self.w1));
        f(slice1(&self.b1));
        f(slice2(&self.w2));
        f(slice1(&self.b2));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice2_mut(&mut self.ws));
        f(slice1_mut(&mut self.bs));
        f(slice2_mut(&mut self.wf));
        f(slice1_mut(&mut self.bf));
        f(slice2_mut(&mut self.w1));
        f(slice1_mut(&mut self.b1));
        f(slice2_mut(&mut self.w2));
        f(slice1_mut(&mut self.b2));
    }
}

/// Unit-norm global descriptor, or an all-zero vector flagged invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    values: Vec<f64>,
    valid: bool,
}

impl Descriptor {
    /// Normalizes `raw`; tiny norms produce an invalid descriptor.
    pub fn from_raw(raw: Vec<f64>) -> Self {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= ZERO_NORM_GUARD) {
            return Descriptor {
                values: vec![0.0; raw.len()],
                valid: false,
            };
        }
        Descriptor {
            values: raw.into_iter().map(|v| v / norm).collect(),
            valid: true,
        }
    }

    /// Wraps already-normalized values; an all-zero vector is invalid.
    pub fn from_stored(values: Vec<f64>) -> Self {
        let valid = values.iter().any(|&v| v != 0.0);
        Descriptor { values, valid }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Euclidean distance between two valid descriptors.
pub fn descriptor_distance(a: &Descriptor, b: &Descriptor) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::arg("distance involving an invalid descriptor"));
    }
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("descriptor lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Values needed to differentiate [`aggregate_taped`].
#[derive(Debug, Clone)]
pub struct AggregateTape {
    features: Array2<f64>,
    sinkhorn: SinkhornTape,
    fbar: Array2<f64>,
    token: Array1<f64>,
    hidden_pre: Array1<f64>,
    hidden: Array1<f64>,
    raw: Vec<f64>,
    norm: f64,
}

impl AggregateTape {
    pub fn plan(&self) -> &Array2<f64> {
        &self.sinkhorn.plan
    }
}

pub fn aggregate(grid: &PatchFeatureGrid, params: &AggregateParams) -> Result<Descriptor> {
    aggregate_taped(grid, params).map(|(d, _)| d)
}

pub fn aggregate_taped(grid: &PatchFeatureGrid, params: &AggregateParams) -> Result<(Descriptor, AggregateTape)> {
    if grid.channels() != params.channels {
        return Err(Error::ShapeMismatch(format!(
            "grid width {} vs aggregator width {}",
            grid.channels(),
            params.channels
        )));
    }
    if !grid.is_finite() {
        return Err(Error::arg("non-finite patch features"));
    }
    let cfg = &params.config;
    let f = &grid.patches;
    let scores = f.dot(&params.ws) + &params.bs;
    let sk = sinkhorn_taped(&scores, cfg.sinkhorn_iters, cfg.lambda_ot)?;
    let fbar = f.dot(&params.wf) + &params.bf;
    let v = sk.plan.t().dot(&fbar);

    let hidden_pre = grid.token.dot(&params.w1) + &params.b1;
    let hidden = hidden_pre.mapv(|x| x.max(0.0));
    let g = hidden.dot(&params.w2) + &params.b2;

    let mut raw: Vec<f64> = v.iter().copied().collect();
    raw.extend(g.iter());
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let desc = Descriptor::from_raw(raw.clone());
    let tape = AggregateTape {
        features: f.clone(),
        sinkhorn: sk,
        fbar,
        token: grid.token.clone(),
        hidden_pre,
        hidden,
        raw,
        norm,
    };
    Ok((desc, tape))
}

/// Accumulates parameter gradients into `grad` and returns the gradient with
/// respect to the patch features. Invalid descriptors propagate nothing.
pub fn aggregate_backward(
    params: &AggregateParams,
    tape: &AggregateTape,
    g_desc: &[f64],
    grad: &mut AggregateParams,
) -> Array2<f64> {
    let (m, l) = (params.config.clusters, params.config.cluster_dim);
    let mut g_f = Array2::zeros(tape.features.dim());
    if !(tape.norm >= ZERO_NORM_GUARD) {
        return g_f;
    }
    let inv = 1.0 / tape.norm;
    let dot: f64 = tape.raw.iter().zip(g_desc).map(|(r, g)| r * inv * g).sum();
    let g_raw: Vec<f64> = tape
        .raw
        .iter()
        .zip(g_desc)
        .map(|(r, g)| (g - r * inv * dot) * inv)
        .collect();

    let g_v = Array2::from_shape_vec((m, l), g_raw[..m * l].to_vec()).expect("cluster block shape");
    let g_g = Array1::from(g_raw[m * l..].to_vec());

    grad.b2 += &g_g;
    grad.w2 += &outer(&tape.hidden, &g_g);
    let mut g_h = params.w2.dot(&g_g);
    g_h.zip_mut_with(&tape.hidden_pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    grad.b1 += &g_h;
    grad.w1 += &outer(&tape.token, &g_h);

    let plan = &tape.sinkhorn.plan;
    let g_plan = tape.fbar.dot(&g_v.t());
    let g_fbar = plan.dot(&g_v);
    grad.wf += &tape.features.t().dot(&g_fbar);
    grad.bf += &g_fbar.sum_axis(Axis(0));
    g_f += &g_fbar.dot(&params.wf.t());

    let g_s = sinkhorn_backward(&tape.sinkhorn, &g_plan);
    grad.ws += &tape.features.t().dot(&g_s);
    grad.bs += &g_s.sum_axis(Axis(0));
    g_f += &g_s.dot(&params.ws.t());
    g_f
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}
