//! Desk-scale training of the adapter and aggregation parameters with the
//! combined patch-contrastive and ranking objective.

mod checkpoint;
mod optim;

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    aggregate, aggregate_backward, aggregate_taped, AggregateConfig, AggregateParams, Descriptor, DescriptorMeta,
};
use crate::augment::{augment, AugmentSpec};
use crate::encoder::{
    adapter_backward, adapter_forward, adapter_forward_taped, AdapterParams, EncoderConfig, PatchFeatureGrid, ToyEncoder,
    PATCH,
};
use crate::error::{Error, Result};
use crate::evaluate::DescriptorDb;
use crate::loss::{combined_loss, patch_infonce, tsap, Accumulate, LossConfig, LossValue, TsapLabels};
use crate::mining::{mine_pair, MiningConfig, PatchPairSet};
use crate::params::ParamSet;
use crate::riv::{image_to_scan, project_scan, RivConfig, RivImage};
use crate::scan_geometry::Pose;
use crate::synthetic::{Session, World};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint};
pub use optim::{learning_rate, AdamState, AdamWConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Image pairs closer than this are positives, meters.
    pub positive_radius: f64,
    /// Image pairs farther than this are negatives, meters.
    pub negative_floor: f64,
    /// Fraction of the positive image pairs of a batch that get patch mining.
    pub pair_subsample: f64,
    /// Minimum travelled distance between kept frames, meters.
    pub sample_spacing: f64,
    /// Hard cap on optimizer steps; 0 leaves the epoch count in charge.
    pub max_steps: usize,
    /// Steps between evaluations of the fixed monitor batch.
    pub monitor_every: usize,
    /// Draw a uniform column shift for every training image.
    pub random_yaw: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            learning_rate: 5e-4,
            warmup_fraction: 0.1,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            positive_radius: 10.0,
            negative_floor: 30.0,
            pair_subsample: 0.125,
            sample_spacing: 3.0,
            max_steps: 0,
            monitor_every: 25,
            random_yaw: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.positive_radius > 0.0 && self.positive_radius < self.negative_floor) {
            return Err(Error::Config("train: need 0 < positive_radius < negative_floor".into()));
        }
        if !(self.pair_subsample > 0.0 && self.pair_subsample <= 1.0) {
            return Err(Error::Config("train: pair_subsample must lie in (0, 1]".into()));
        }
        if self.batch_size < 2 || self.epochs == 0 || self.monitor_every == 0 {
            return Err(Error::Config("train: need batch_size >= 2, epochs >= 1, monitor_every >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train: need learning_rate >= 0, warmup_fraction in [0, 1], weight_decay >= 0".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) || !(self.sample_spacing >= 0.0) {
            return Err(Error::Config("train: betas must lie in [0, 1) and sample_spacing >= 0".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub aggregate: AggregateConfig,
    /// Seed of the trainable parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { encoder: EncoderConfig::default(), aggregate: AggregateConfig::default(), init_seed: 7 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.aggregate.validate()
    }
}

/// Every trainable tensor: adapter first, aggregation second.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub adapter: AdapterParams,
    pub aggregate: AggregateParams,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig) -> Self {
        let e = &cfg.encoder;
        ModelParams {
            adapter: AdapterParams::init(e.stages(), e.channels, e.adapter_hidden, cfg.init_seed),
            aggregate: AggregateParams::init(cfg.aggregate, e.channels, cfg.init_seed.wrapping_add(1)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams { adapter: self.adapter.zeros_like(), aggregate: self.aggregate.zeros_like() }
    }
}

impl ParamSet for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.adapter.visit(f);
        self.aggregate.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.adapter.visit_mut(f);
        self.aggregate.visit_mut(f);
    }
}

impl Accumulate for ModelParams {
    fn add_scaled(&mut self, a: f64, other: &Self) {
        self.axpy(a, other);
    }
}

/// Frozen encoder with its trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: ToyEncoder,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model { config, encoder: ToyEncoder::new(config.encoder)?, params: ModelParams::init(&config) })
    }

    pub fn with_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        let mut m = Self::new(config)?;
        if params.num_params() != m.params.num_params() {
            return Err(Error::ShapeMismatch("parameters do not match the model configuration".into()));
        }
        m.params = params;
        Ok(m)
    }

    pub fn descriptor_dim(&self) -> usize {
        self.config.aggregate.descriptor_dim()
    }

    pub fn patch_features(&self, img: &RivImage) -> Result<PatchFeatureGrid> {
        adapter_forward(&self.encoder.encode(img)?, &self.params.adapter)
    }

    pub fn describe(&self, img: &RivImage) -> Result<Descriptor> {
        aggregate(&self.patch_features(img)?, &self.params.aggregate)
    }
}

/// A projected scan with its pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub pose: Pose,
    pub image: RivImage,
}

pub fn describe_frames(model: &Model, frames: &[Frame]) -> Result<Vec<Descriptor>> {
    frames.par_iter().map(|f| model.describe(&f.image)).collect()
}

pub fn frame_metas(frames: &[Frame]) -> Vec<DescriptorMeta> {
    frames.iter().map(|f| DescriptorMeta { id: f.id.clone(), pose: f.pose }).collect()
}

pub fn descriptor_db(model: &Model, frames: &[Frame]) -> Result<DescriptorDb> {
    DescriptorDb::new(describe_frames(model, frames)?, frame_metas(frames))
}

/// Renders and projects every scan of a synthetic session.
pub fn synthetic_frames(world: &World, session: &Session, riv: &RivConfig) -> Result<Vec<Frame>> {
    (0..session.len())
        .into_par_iter()
        .map(|k| {
            let scan = world.scan(session, k, riv);
            Ok(Frame { id: scan.id.clone(), pose: session.poses[k], image: project_scan(&scan, riv)? })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Positive,
    Negative,
    Ignored,
}

pub fn label_pair(a: &Pose, b: &Pose, cfg: &TrainConfig) -> PairLabel {
    let d = a.distance(b);
    if d <= cfg.positive_radius {
        PairLabel::Positive
    } else if d > cfg.negative_floor {
        PairLabel::Negative
    } else {
        PairLabel::Ignored
    }
}

/// Indices of frames kept when walking the sequence and keeping a frame once
/// the travelled distance since the last kept one reaches `spacing`.
pub fn spatial_subsample(poses: &[Pose], spacing: f64) -> Vec<usize> {
    let mut kept = Vec::new();
    let mut travelled = 0.0;
    for (i, p) in poses.iter().enumerate() {
        if i > 0 {
            travelled += p.distance(&poses[i - 1]);
        }
        if kept.is_empty() || travelled >= spacing {
            kept.push(i);
            travelled = 0.0;
        }
    }
    kept
}

/// Frames of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Frame indices.
    pub members: Vec<usize>,
    pub labels: TsapLabels,
    /// Positions in `members` of the image pairs used for patch mining.
    pub mined: Vec<(usize, usize)>,
}

/// Draws `batch_size / 2` anchors with one positive partner each, labels
/// every pair by pose distance and subsamples the positive image pairs.
pub fn build_batch(frames: &[Frame], pool: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    if pool.len() < cfg.batch_size {
        return Err(Error::Batch(format!("{} frames available, batch needs {}", pool.len(), cfg.batch_size)));
    }
    let mut order = pool.to_vec();
    order.shuffle(rng);
    let mut members: Vec<usize> = Vec::with_capacity(cfg.batch_size);
    for &a in &order {
        if members.len() + 2 > cfg.batch_size {
            break;
        }
        if members.contains(&a) {
            continue;
        }
        let partners: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&b| b != a && !members.contains(&b))
            .filter(|&b| label_pair(&frames[a].pose, &frames[b].pose, cfg) == PairLabel::Positive)
            .collect();
        if let Some(&b) = partners.choose(rng) {
            members.push(a);
            members.push(b);
        }
    }
    if members.is_empty() {
        return Err(Error::Batch("no frame has a positive partner".into()));
    }
    for &a in &order {
        if members.len() == cfg.batch_size {
            break;
        }
        if !members.contains(&a) {
            members.push(a);
        }
    }

    let n = members.len();
    let mut labels = TsapLabels { positives: vec![Vec::new(); n], ignored: vec![Vec::new(); n] };
    let mut positive_pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            match label_pair(&frames[members[i]].pose, &frames[members[j]].pose, cfg) {
                PairLabel::Positive => {
                    labels.positives[i].push(j);
                    if i < j {
                        positive_pairs.push((i, j));
                    }
                }
                PairLabel::Ignored => labels.ignored[i].push(j),
                PairLabel::Negative => {}
            }
        }
    }
    let keep = ((cfg.pair_subsample * positive_pairs.len() as f64).ceil() as usize).max(1);
    let mut mined: Vec<(usize, usize)> = positive_pairs.choose_multiple(rng, keep).copied().collect();
    mined.sort_unstable();
    Ok(Batch { members, labels, mined })
}

/// Losses of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParts {
    pub l_p: f64,
    pub l_tsap: f64,
    pub l_final: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct BatchGrad {
    desc: Array2<f64>,
    patches: Vec<Array2<f64>>,
}

impl Accumulate for BatchGrad {
    fn add_scaled(&mut self, a: f64, other: &Self) {
        self.desc.scaled_add(a, &other.desc);
        for (p, q) in self.patches.iter_mut().zip(&other.patches) {
            p.scaled_add(a, q);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub l_p: f64,
    pub l_tsap: f64,
    pub l_final: f64,
    /// Loss of the fixed monitor batch before this step's update.
    pub monitor_l_final: Option<f64>,
    pub mined_pairs: usize,
}

/// Everything a training run is configured by; echoed into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSetup {
    pub riv: RivConfig,
    pub model: ModelConfig,
    pub mining: MiningConfig,
    pub loss: LossConfig,
    pub augment: AugmentSpec,
    pub train: TrainConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.riv.validate()?;
        if self.riv.width % PATCH != 0 || self.riv.height % PATCH != 0 {
            return Err(Error::Config(format!("riv: width and height must be multiples of the {PATCH}-pixel patch")));
        }
        self.model.validate()?;
        self.mining.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.train.validate()
    }
}

const MONITOR_STREAM: u64 = u64::MAX;

pub struct Trainer<'a> {
    setup: TrainSetup,
    frames: &'a [Frame],
    pool: Vec<usize>,
    model: Model,
    adam: AdamState,
    step: usize,
    total_steps: usize,
    monitor: Batch,
    mined: HashMap<(usize, usize), Option<PatchPairSet>>,
    trace: Vec<TraceRow>,
}

impl<'a> Trainer<'a> {
    pub fn new(setup: TrainSetup, frames: &'a [Frame]) -> Result<Self> {
        let model = Model::new(setup.model)?;
        let n = model.params.num_params();
        Self::assemble(setup, frames, model, AdamState::new(n), 0)
    }

    /// Continues the run recorded in `ckp` on the same frames.
    pub fn resume(ckp: &Checkpoint, frames: &'a [Frame]) -> Result<Self> {
        let model = Model::with_params(ckp.setup.model, ckp.params.clone())?;
        if model.encoder.weight_hash() != ckp.encoder_hash {
            return Err(Error::Config("checkpoint was trained against different frozen weights".into()));
        }
        Self::assemble(ckp.setup, frames, model, ckp.adam.clone(), ckp.step as usize)
    }

    fn assemble(setup: TrainSetup, frames: &'a [Frame], model: Model, adam: AdamState, step: usize) -> Result<Self> {
        setup.validate()?;
        for f in frames {
            if f.image.height() != setup.riv.height || f.image.width() != setup.riv.width {
                return Err(Error::ShapeMismatch(format!("frame {} does not match the configured image size", f.id)));
            }
        }
        let poses: Vec<Pose> = frames.iter().map(|f| f.pose).collect();
        let pool = spatial_subsample(&poses, setup.train.sample_spacing);
        let cfg = &setup.train;
        let per_epoch = pool.len().div_ceil(cfg.batch_size);
        let mut total_steps = cfg.epochs * per_epoch;
        if cfg.max_steps > 0 {
            total_steps = total_steps.min(cfg.max_steps);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(MONITOR_STREAM);
        let monitor = build_batch(frames, &pool, cfg, &mut rng)?;
        Ok(Trainer { setup, frames, pool, model, adam, step, total_steps, monitor, mined: HashMap::new(), trace: Vec::new() })
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn set_params(&mut self, params: ModelParams) -> Result<()> {
        if params.num_params() != self.model.params.num_params() {
            return Err(Error::ShapeMismatch("parameters do not match the model configuration".into()));
        }
        self.model.params = params;
        Ok(())
    }

    pub fn frames(&self) -> &'a [Frame] {
        self.frames
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            setup: self.setup,
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            step: self.step as u64,
            encoder_hash: self.model.encoder.weight_hash(),
        }
    }

    fn pair_seed(&self, a: usize, b: usize) -> u64 {
        self.setup.train.seed ^ ((a as u64) << 32 | b as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }

    fn ensure_mined(&mut self, keys: &[(usize, usize)]) {
        let missing: Vec<(usize, usize)> = keys.iter().copied().filter(|k| !self.mined.contains_key(k)).collect();
        let setup = &self.setup;
        let frames = self.frames;
        let results: Vec<Option<PatchPairSet>> = missing
            .par_iter()
            .map(|&(a, b)| {
                let (fa, fb) = (&frames[a], &frames[b]);
                let mined = image_to_scan(&fa.image, &setup.riv, fa.id.clone(), fa.pose.timestamp)
                    .and_then(|sa| {
                        let sb = image_to_scan(&fb.image, &setup.riv, fb.id.clone(), fb.pose.timestamp)?;
                        let mut cfg = setup.mining;
                        cfg.positive_radius = cfg.positive_radius.max(setup.train.positive_radius);
                        mine_pair(&sa, &sb, &fa.pose, &fb.pose, &setup.riv, &cfg, self.pair_seed(a, b))
                    });
                match mined {
                    Ok(set) if !set.is_empty() => Some(set),
                    Ok(_) => None,
                    Err(e) => {
                        log::warn!("mining {} / {} failed: {e}", fa.id, fb.id);
                        None
                    }
                }
            })
            .collect();
        self.mined.extend(missing.into_iter().zip(results));
    }

    /// Forward pass over `batch`, with augmentation when `aug_seed` is set,
    /// and the parameter gradient of `L_final` when `want_grad`.
    fn run_batch(&mut self, batch: &Batch, aug_seed: Option<u64>, want_grad: bool) -> Result<(LossParts, Option<ModelParams>)> {
        let width = self.setup.riv.width;
        let cols = width / PATCH;
        let mut specs = vec![(0usize, AugmentSpec::identity()); batch.members.len()];
        if let Some(seed) = aug_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for spec in specs.iter_mut() {
                let s = if self.setup.train.random_yaw { rng.gen_range(0..width) } else { 0 };
                *spec = (s, AugmentSpec { yaw_shift: s, rng_seed: rng.gen(), ..self.setup.augment });
            }
        }

        let keys: Vec<(usize, usize)> = batch
            .mined
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (batch.members[i], batch.members[j]);
                (a.min(b), a.max(b))
            })
            .collect();
        self.ensure_mined(&keys);

        let model = &self.model;
        let frames = self.frames;
        let forward: Vec<_> = batch
            .members
            .par_iter()
            .zip(&specs)
            .map(|(&fi, (_, spec))| {
                let img = augment(&frames[fi].image, spec)?;
                let stack = model.encoder.encode(&img)?;
                let (grid, atape) = adapter_forward_taped(&stack, &model.params.adapter)?;
                let (desc, gtape) = aggregate_taped(&grid, &model.params.aggregate)?;
                Ok((grid, atape, desc, gtape))
            })
            .collect::<Result<Vec<_>>>()?;

        let n = batch.members.len();
        let dim = model.descriptor_dim();
        let mut descs = Array2::zeros((n, dim));
        for (i, (_, _, d, _)) in forward.iter().enumerate() {
            if !d.is_valid() {
                return Err(Error::Batch(format!("frame {} produced an invalid descriptor", frames[batch.members[i]].id)));
            }
            descs.row_mut(i).assign(&Array1::from(d.values().to_vec()));
        }
        let loss_cfg = self.setup.loss;
        let t = tsap(&descs, &batch.labels, loss_cfg.tau_g, loss_cfg.truncation)?;
        let zero_patches: Vec<Array2<f64>> = forward.iter().map(|(g, ..)| Array2::zeros(g.patches.dim())).collect();
        let lt = LossValue { value: t.value, grad: BatchGrad { desc: t.grad, patches: zero_patches.clone() } };

        let mut lp = LossValue { value: 0.0, grad: BatchGrad { desc: Array2::zeros((n, dim)), patches: zero_patches } };
        let usable: Vec<(usize, usize, PatchPairSet)> = batch
            .mined
            .iter()
            .zip(&keys)
            .filter_map(|(&(i, j), key)| {
                let set = self.mined.get(key)?.as_ref()?;
                let set = if batch.members[i] == key.0 { set.clone() } else { set.swapped() };
                let shift = |fi: usize| (specs[fi].0 as f64 / PATCH as f64).round() as usize % cols;
                let set = drop_unopposed(shift_pairs(&set, shift(i), shift(j)));
                (!set.is_empty()).then_some((i, j, set))
            })
            .collect();
        for (i, j, set) in &usable {
            let v = patch_infonce(&forward[*i].0.patches, &forward[*j].0.patches, set, loss_cfg.tau_l)?;
            let w = 1.0 / usable.len() as f64;
            lp.value += w * v.value;
            lp.grad.patches[*i].scaled_add(w, &v.grad.0);
            lp.grad.patches[*j].scaled_add(w, &v.grad.1);
        }

        let total = combined_loss(&lp, &lt, loss_cfg.lambda_mix);
        let parts = LossParts { l_p: lp.value, l_tsap: lt.value, l_final: total.value };
        if !parts.l_final.is_finite() {
            return Err(Error::Diverged { step: self.step, loss: parts.l_final });
        }
        if !want_grad {
            return Ok((parts, None));
        }

        let params = &model.params;
        let grads: Vec<ModelParams> = forward
            .par_iter()
            .enumerate()
            .map(|(i, (_, atape, _, gtape))| {
                let mut g = params.zeros_like();
                let g_desc: Vec<f64> = total.grad.desc.row(i).to_vec();
                let mut g_f = aggregate_backward(&params.aggregate, gtape, &g_desc, &mut g.aggregate);
                g_f += &total.grad.patches[i];
                adapter_backward(&params.adapter, atape, &g_f, &mut g.adapter);
                g
            })
            .collect();
        let mut sum = params.zeros_like();
        for g in &grads {
            sum.axpy(1.0, g);
        }
        Ok((parts, Some(sum)))
    }

    /// Loss of the fixed, unaugmented monitor batch.
    pub fn monitor_loss(&mut self) -> Result<LossParts> {
        let monitor = self.monitor.clone();
        self.run_batch(&monitor, None, false).map(|(p, _)| p)
    }

    /// Loss and parameter gradient of an arbitrary batch, unaugmented.
    pub fn batch_gradient(&mut self, batch: &Batch) -> Result<(LossParts, ModelParams)> {
        let (p, g) = self.run_batch(batch, None, true)?;
        Ok((p, g.expect("gradient requested")))
    }

    pub fn step(&mut self) -> Result<TraceRow> {
        let cfg = self.setup.train;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(self.step as u64);
        let batch = build_batch(self.frames, &self.pool, &cfg, &mut rng)?;
        let aug_seed: u64 = rng.gen();
        let monitor = if self.step % cfg.monitor_every == 0 { Some(self.monitor_loss()?.l_final) } else { None };
        let (parts, grad) = self.run_batch(&batch, Some(aug_seed), true)?;
        let grad = grad.expect("gradient requested");
        if !grad.is_finite() {
            return Err(Error::Diverged { step: self.step, loss: f64::NAN });
        }
        let lr = learning_rate(self.step, self.total_steps, cfg.learning_rate, cfg.warmup_fraction);
        let mut theta = self.model.params.to_flat();
        self.adam.update(&mut theta, &grad.to_flat(), lr, &cfg.adamw());
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: self.step, loss: parts.l_final });
        }
        self.model.params.load_flat(&theta);
        let row = TraceRow {
            step: self.step,
            lr,
            l_p: parts.l_p,
            l_tsap: parts.l_tsap,
            l_final: parts.l_final,
            monitor_l_final: monitor,
            mined_pairs: batch.mined.len(),
        };
        log::debug!("step {} lr {lr:.3e} L_P {:.4} L_TSAP {:.4} L {:.4}", row.step, row.l_p, row.l_tsap, row.l_final);
        self.step += 1;
        self.trace.push(row);
        Ok(row)
    }

    /// Runs to the end of the schedule and returns the final monitor loss.
    pub fn run(&mut self) -> Result<LossParts> {
        let hash = self.model.encoder.weight_hash();
        while self.step < self.total_steps {
            self.step()?;
        }
        if self.model.encoder.weight_hash() != hash {
            return Err(Error::Protocol("frozen encoder weights changed".into()));
        }
        self.monitor_loss()
    }

    /// `step,lr,l_p,l_tsap,l_final,monitor_l_final,mined_pairs`
    pub fn trace_csv(&self) -> String {
        trace_csv(&self.trace)
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("step,lr,l_p,l_tsap,l_final,monitor_l_final,mined_pairs\n");
    for r in rows {
        let m = r.monitor_l_final.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.step, r.lr, r.l_p, r.l_tsap, r.l_final, m, r.mined_pairs);
    }
    s
}

/// Pairs re-indexed for images cyclically shifted by `sa` and `sb` patch columns.
pub fn shift_pairs(set: &PatchPairSet, sa: usize, sb: usize) -> PatchPairSet {
    let cols = set.cols;
    let move_by = |p: usize, s: usize| (p / cols) * cols + (p % cols + s) % cols;
    PatchPairSet {
        positives: set.positives.iter().map(|&(a, b)| (move_by(a, sa), move_by(b, sb))).collect(),
        negatives_a: set.negatives_a.iter().map(|l| l.iter().map(|&p| move_by(p, sa)).collect()).collect(),
        negatives_b: set.negatives_b.iter().map(|l| l.iter().map(|&p| move_by(p, sb)).collect()).collect(),
        ..set.clone()
    }
}

/// Removes positives that have no negative on either side.
fn drop_unopposed(mut set: PatchPairSet) -> PatchPairSet {
    let keep: Vec<bool> = (0..set.positives.len())
        .map(|k| !(set.negatives_a[k].is_empty() && set.negatives_b[k].is_empty()))
        .collect();
    let mut it = keep.iter();
    set.positives.retain(|_| *it.next().unwrap());
    let mut it = keep.iter();
    set.negatives_a.retain(|_| *it.next().unwrap());
    let mut it = keep.iter();
    set.negatives_b.retain(|_| *it.next().unwrap());
    set
}

/// Trains to completion and returns the checkpoint and the trace.
pub fn train(setup: TrainSetup, frames: &[Frame]) -> Result<(Checkpoint, Vec<TraceRow>)> {
    let mut t = Trainer::new(setup, frames)?;
    t.run()?;
    Ok((t.checkpoint(), t.trace.clone()))
}

#[cfg(test)]
mod tests;
