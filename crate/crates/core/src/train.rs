//! Mini-batch SGD with momentum, step learning-rate decay and patch-space
//! augmentation, plus independently trained ensembles of basic networks.
//!
//! Every random decision is drawn from a stream keyed by the training seed
//! and a counter (iteration, or draw index within the run), so a run can be
//! stopped and resumed from its [`TrainState`] without changing the result.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, Variant};
use crate::params::{Gradients, ParamSet};
use crate::preprocess::{self, AugmentRanges, CropResult, HandAnnotation};
use crate::rng::{self, Rng};
use crate::tensor::{Real, Tensor};

const SHUFFLE_SALT: u64 = 1;
const AUGMENT_SALT: u64 = 2;
const DROPOUT_SALT: u64 = 3;
const INIT_SALT: u64 = 4;
const MEMBER_SALT: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_drop_every: usize,
    pub lr_factor: f64,
    pub max_iters: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    /// `None` trains on the unaugmented crops.
    pub augment: Option<AugmentRanges>,
    pub snapshot_every: usize,
    pub keep_snapshots: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr0: 0.005,
            lr_drop_every: 50_000,
            lr_factor: 10.0,
            max_iters: 200_000,
            weight_decay: 0.0005,
            momentum: 0.9,
            seed: 0,
            augment: Some(AugmentRanges::default()),
            snapshot_every: 10_000,
            keep_snapshots: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("train config: {what}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.lr_drop_every == 0 {
            return bad("lr_drop_every must be positive");
        }
        if !(self.lr_factor > 1.0) {
            return bad("lr_factor must exceed 1");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("weight_decay must be >= 0 and momentum in [0, 1)");
        }
        if self.snapshot_every == 0 {
            return bad("snapshot_every must be positive");
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// Step decay: `lr0 / lr_factor^floor(iter / lr_drop_every)`.
pub fn lr_schedule(iter: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 / cfg.lr_factor.powi((iter / cfg.lr_drop_every) as i32)
}

/// Classical momentum with weight decay folded into the gradient:
/// `v = m v + lr (g + wd w)`, `w -= v`. Parameters without a gradient are
/// treated as having a zero gradient.
pub fn sgd_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    velocity: &mut [Vec<T>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if velocity.len() != params.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} momentum buffers for {} parameters", velocity.len(), params.len()),
        ));
    }
    let (m, lr, wd) = (T::from_f64(momentum), T::from_f64(lr), T::from_f64(weight_decay));
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name_for_error = params.name(id).to_string();
        let w = params.get_mut(id).data_mut();
        let v = &mut velocity[id.0];
        if v.len() != w.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("momentum buffer {} has the wrong length", id.0),
            ));
        }
        let g = grads.get(id);
        for i in 0..w.len() {
            let gi = g.map_or(T::ZERO, |g| g[i]);
            v[i] = m * v[i] + lr * (gi + wd * w[i]);
            w[i] -= v[i];
            if !w[i].is_finite() {
                return Err(Error::NonFinite(format!("update of {name_for_error}")));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed iterations.
    pub iteration: usize,
    pub velocity: Vec<Vec<f32>>,
    pub log: Vec<LossRecord>,
    /// Exponential moving average of the loss.
    pub running_loss: Option<f64>,
}

impl TrainState {
    pub fn new(model: &Model) -> Self {
        TrainState {
            iteration: 0,
            velocity: model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            log: Vec::new(),
            running_loss: None,
        }
    }
}

/// Optional hooks for a training run.
#[derive(Default)]
pub struct TrainControl<'a> {
    /// Checked before every iteration; training stops cleanly when set.
    pub stop: Option<&'a AtomicBool>,
    /// Where periodic and diagnostic snapshots go.
    pub snapshot_dir: Option<&'a Path>,
    pub on_iteration: Option<&'a mut dyn FnMut(&LossRecord)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Finished,
    Interrupted,
}

/// Stacks crop patches into an `N x 1 x S x S` batch.
pub fn patch_batch(crops: &[&CropResult]) -> Result<Tensor<f32>> {
    let size = crops.first().map_or(0, |c| c.size);
    let mut data = Vec::with_capacity(crops.len() * size * size);
    for c in crops {
        if c.size != size {
            return Err(Error::shape(
                "patch_batch",
                format!("patch sizes {size} and {}", c.size),
            ));
        }
        data.extend_from_slice(&c.patch);
    }
    Tensor::new([crops.len(), 1, size, size], data)
}

/// Sample indices visited by a run: an independent shuffle per epoch.
struct Order {
    n: usize,
    seed: u64,
    epoch: Option<usize>,
    perm: Vec<usize>,
}

impl Order {
    fn new(n: usize, seed: u64) -> Self {
        Order {
            n,
            seed: rng::derive_seed(seed, SHUFFLE_SALT),
            epoch: None,
            perm: Vec::new(),
        }
    }

    fn index(&mut self, draw: usize) -> usize {
        use rand::seq::SliceRandom;
        let epoch = draw / self.n;
        if self.epoch != Some(epoch) {
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut rng::stream(self.seed, epoch as u64));
            self.epoch = Some(epoch);
        }
        self.perm[draw % self.n]
    }
}

fn snapshot_path(dir: &Path, iter: usize) -> PathBuf {
    dir.join(format!("snapshot-{iter:07}.ren"))
}

fn write_snapshot(model: &Model, dir: &Path, iter: usize, keep: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.save(snapshot_path(dir, iter))?;
    let mut old: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("snapshot-") && n.ends_with(".ren"))
        })
        .collect();
    old.sort();
    let excess = old.len().saturating_sub(keep.max(1));
    for p in &old[..excess] {
        std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Builds the (possibly augmented) batch for iteration `iter`.
fn make_batch(
    samples: &[Sample],
    order: &mut Order,
    iter: usize,
    cfg: &TrainConfig,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let b = cfg.batch_size;
    let aug_seed = rng::derive_seed(cfg.seed, AUGMENT_SALT);
    let mut crops = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b * samples[0].labels.len());
    for k in 0..b {
        let draw = iter * b + k;
        let s = &samples[order.index(draw)];
        match &cfg.augment {
            Some(ranges) => {
                let labels: Vec<f64> = s.labels.iter().map(|&v| v as f64).collect();
                let mut r = rng::stream(aug_seed, draw as u64);
                let (crop, labels) = preprocess::augment_random(&s.crop, &labels, ranges, &mut r)?;
                targets.extend(labels.into_iter().map(|v| v as f32));
                crops.push(crop);
            }
            None => {
                targets.extend_from_slice(&s.labels);
                crops.push(s.crop.clone());
            }
        }
    }
    let refs: Vec<&CropResult> = crops.iter().collect();
    let x = patch_batch(&refs)?;
    let t = Tensor::new([b, samples[0].labels.len()], targets)?;
    Ok((x, t))
}

fn check_dataset(model: &Model, samples: &[Sample]) -> Result<()> {
    let Some(first) = samples.first() else {
        return Err(Error::InvalidArgument("training set is empty".into()));
    };
    let spec = model.spec();
    if first.labels.len() != spec.output_dim() {
        return Err(Error::shape(
            "train",
            format!(
                "samples have {} label values, model predicts {}",
                first.labels.len(),
                spec.output_dim()
            ),
        ));
    }
    if let Some(s) = samples
        .iter()
        .find(|s| s.crop.size != spec.input_size || s.labels.len() != first.labels.len())
    {
        return Err(Error::shape(
            "train",
            format!("inconsistent sample (patch size {})", s.crop.size),
        ));
    }
    Ok(())
}

/// Runs iterations until `state.iteration == until` (capped by
/// `cfg.max_iters`) or the stop flag is raised.
pub fn train_until(
    model: &mut Model,
    samples: &[Sample],
    cfg: &TrainConfig,
    state: &mut TrainState,
    until: usize,
    ctl: &mut TrainControl<'_>,
) -> Result<StopReason> {
    cfg.validate()?;
    check_dataset(model, samples)?;
    let until = until.min(cfg.max_iters);
    let dropout_seed = rng::derive_seed(cfg.seed, DROPOUT_SALT);
    let mut order = Order::new(samples.len(), cfg.seed);
    while state.iteration < until {
        if ctl.stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
            return Ok(StopReason::Interrupted);
        }
        let iter = state.iteration;
        let lr = lr_schedule(iter, cfg);
        let (x, t) = make_batch(samples, &mut order, iter, cfg)?;
        let mut r: Rng = rng::stream(dropout_seed, iter as u64);
        let step = model.loss_and_grads(x, t, &mut r).and_then(|(loss, grads)| {
            if !loss.is_finite() {
                return Err(Error::Diverged { iter, loss });
            }
            sgd_step(
                model.params_mut(),
                &grads,
                &mut state.velocity,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            Ok(loss)
        });
        let loss = match step {
            Ok(loss) => loss,
            Err(e @ (Error::NonFinite(_) | Error::Diverged { .. })) => {
                if let Some(dir) = ctl.snapshot_dir {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    model.save(dir.join("diverged.ren"))?;
                }
                let loss = match e {
                    Error::Diverged { loss, .. } => loss,
                    _ => f64::NAN,
                };
                return Err(Error::Diverged { iter, loss });
            }
            Err(e) => return Err(e),
        };
        state.iteration += 1;
        state.running_loss = Some(match state.running_loss {
            Some(r) => 0.98 * r + 0.02 * loss,
            None => loss,
        });
        let record = LossRecord { iter, lr, loss };
        state.log.push(record);
        if let Some(f) = ctl.on_iteration.as_mut() {
            f(&record);
        }
        if let Some(dir) = ctl.snapshot_dir {
            if state.iteration.is_multiple_of(cfg.snapshot_every) {
                write_snapshot(model, dir, state.iteration, cfg.keep_snapshots)?;
            }
        }
    }
    Ok(StopReason::Finished)
}

/// Trains a fresh state for `cfg.max_iters` iterations and returns the
/// per-iteration loss log.
pub fn train(model: &mut Model, samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    let mut state = TrainState::new(model);
    train_until(
        model,
        samples,
        cfg,
        &mut state,
        cfg.max_iters,
        &mut TrainControl::default(),
    )?;
    Ok(state.log)
}

/// Seed used to initialize a model trained with `cfg.seed`.
pub fn init_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, INIT_SALT)
}

pub fn write_loss_csv(path: impl AsRef<Path>, log: &[LossRecord]) -> Result<()> {
    use std::fmt::Write as _;
    let path = path.as_ref();
    let mut s = String::from("iter,lr,loss\n");
    for r in log {
        let _ = writeln!(s, "{},{},{}", r.iter, r.lr, r.loss);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// World-space predictions for a set of crops.
pub trait Predictor {
    fn joints(&self) -> usize;
    fn input_size(&self) -> usize;
    fn predict_world(&self, crops: &[&CropResult]) -> Result<Vec<HandAnnotation>>;
    /// One inference pass over `patches`, for timing.
    fn forward_batch(&self, patches: &Tensor<f32>) -> Result<()>;
}

const PREDICT_CHUNK: usize = 32;

impl Predictor for Model {
    fn joints(&self) -> usize {
        self.spec().joints
    }

    fn input_size(&self) -> usize {
        self.spec().input_size
    }

    fn predict_world(&self, crops: &[&CropResult]) -> Result<Vec<HandAnnotation>> {
        let mut out = Vec::with_capacity(crops.len());
        for chunk in crops.chunks(PREDICT_CHUNK) {
            let pred = self.predict(patch_batch(chunk)?)?;
            let width = self.spec().output_dim();
            for (row, crop) in pred.data().chunks_exact(width).zip(chunk) {
                out.push(preprocess::denormalize_joints(row, crop));
            }
        }
        Ok(out)
    }

    fn forward_batch(&self, patches: &Tensor<f32>) -> Result<()> {
        self.predict(patches.clone()).map(|_| ())
    }
}

/// Independently trained networks whose world-space predictions are
/// averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct BaggingEnsemble {
    pub members: Vec<Model>,
}

impl BaggingEnsemble {
    pub fn new(members: Vec<Model>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
        };
        let (j, s) = (first.spec().joints, first.spec().input_size);
        if members.iter().any(|m| m.spec().joints != j || m.spec().input_size != s) {
            return Err(Error::InvalidArgument(
                "ensemble members disagree on joints or input size".into(),
            ));
        }
        Ok(BaggingEnsemble { members })
    }

    /// Writes `member{k}.ren` files and an `ensemble.txt` descriptor into
    /// `dir`; returns the descriptor path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut desc = format!("{ENSEMBLE_HEADER}\n");
        for (k, m) in self.members.iter().enumerate() {
            let name = format!("member{k}.ren");
            m.save(dir.join(&name))?;
            desc.push_str(&format!("member={name}\n"));
        }
        let path = dir.join("ensemble.txt");
        std::fs::write(&path, desc).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(descriptor: impl AsRef<Path>) -> Result<Self> {
        let path = descriptor.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(ENSEMBLE_HEADER) {
            return Err(Error::Format(format!(
                "{} is not an ensemble descriptor",
                path.display()
            )));
        }
        let base = path.parent().unwrap_or(Path::new(""));
        let mut members = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let file = line.strip_prefix("member=").ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: format!("expected member=<file>, got '{line}'"),
            })?;
            members.push(Model::load(base.join(file.trim()))?);
        }
        BaggingEnsemble::new(members)
    }
}

const ENSEMBLE_HEADER: &str = "ren-ensemble 1";

/// True when `path` starts like an ensemble descriptor.
pub fn is_ensemble_descriptor(path: impl AsRef<Path>) -> bool {
    std::fs::read(path.as_ref()).is_ok_and(|b| b.starts_with(ENSEMBLE_HEADER.as_bytes()))
}

impl Predictor for BaggingEnsemble {
    fn joints(&self) -> usize {
        self.members[0].spec().joints
    }

    fn input_size(&self) -> usize {
        self.members[0].spec().input_size
    }

    fn predict_world(&self, crops: &[&CropResult]) -> Result<Vec<HandAnnotation>> {
        let per_member = self
            .members
            .iter()
            .map(|m| m.predict_world(crops))
            .collect::<Result<Vec<_>>>()?;
        Ok(average_predictions(&per_member))
    }

    fn forward_batch(&self, patches: &Tensor<f32>) -> Result<()> {
        for m in &self.members {
            m.forward_batch(patches)?;
        }
        Ok(())
    }
}

/// Coordinate-wise mean over members, accumulated in `f64`.
pub fn average_predictions(per_member: &[Vec<HandAnnotation>]) -> Vec<HandAnnotation> {
    let k = per_member.len() as f64;
    let frames = per_member.first().map_or(0, Vec::len);
    (0..frames)
        .map(|f| {
            let joints = per_member[0][f].len();
            HandAnnotation {
                joints: (0..joints)
                    .map(|j| {
                        let mut acc = [0.0f64; 3];
                        for m in per_member {
                            for (a, v) in acc.iter_mut().zip(m[f].joints[j]) {
                                *a += v;
                            }
                        }
                        acc.map(|a| a / k)
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Training seeds for the members of a `k`-network ensemble.
pub fn bagging_seeds(seed: u64, k: usize) -> Vec<u64> {
    (0..k as u64).map(|i| rng::derive_seed(seed, MEMBER_SALT + i)).collect()
}

/// Trains one network per seed, each with its own initialization, sample
/// order, augmentation and dropout.
pub fn train_bagging_with_seeds(
    spec: &ModelSpec,
    samples: &[Sample],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<BaggingEnsemble> {
    if spec.variant.uses_regions() {
        return Err(Error::InvalidArgument(format!(
            "bagging members must be basic networks, not {}",
            spec.variant
        )));
    }
    let mut members = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let member_cfg = TrainConfig { seed, ..cfg.clone() };
        let mut model = Model::new(spec.clone(), init_seed(seed))?;
        train(&mut model, samples, &member_cfg)?;
        members.push(model);
    }
    BaggingEnsemble::new(members)
}

/// `k >= 2` basic networks with seeds derived from `cfg.seed`.
pub fn train_bagging(spec: &ModelSpec, samples: &[Sample], cfg: &TrainConfig, k: usize) -> Result<BaggingEnsemble> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "bagging needs at least 2 networks, got {k}"
        )));
    }
    train_bagging_with_seeds(spec, samples, cfg, &bagging_seeds(cfg.seed, k))
}

/// Convenience: a basic-network spec for bagging members.
pub fn basic_member_spec(joints: usize) -> ModelSpec {
    ModelSpec::new(Variant::Basic, joints)
}
