use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use ren::data::{
    self, build_cache, build_samples, synthetic_samples_from, write_synthetic_dataset, DatasetManifest, FramePolicy,
    ManifestEntry, Sample, SampleCache,
};
use ren::eval::{self, EvalReport};
use ren::model::Model;
use ren::preprocess::HandAnnotation;
use ren::train::{
    bagging_seeds, init_seed, is_ensemble_descriptor, train_until, write_loss_csv, BaggingEnsemble, LossRecord,
    Predictor, StopReason, TrainConfig, TrainControl, TrainState,
};

use crate::config::{Method, RunConfig};
use crate::RunArgs;

const INTERRUPTED: u8 = 130;
const ASSERTION_FAILED: u8 = 1;

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Number of frames
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Dataset directory
    #[arg(long)]
    out: PathBuf,
}

pub fn synth(a: &SynthArgs) -> Result<u8> {
    let cfg = a.run.resolve()?;
    let manifest = write_synthetic_dataset(&a.out, &cfg.synth_config(), a.count)?;
    println!(
        "wrote {} frames with {} joints to {}",
        manifest.len(),
        manifest.joints,
        a.out.join("manifest.txt").display()
    );
    Ok(0)
}

#[derive(Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Cache directory
    #[arg(long, default_value = "cache")]
    out: PathBuf,
    /// Skip unreadable or empty frames instead of failing
    #[arg(long)]
    skip_bad: bool,
}

fn cache_name(manifest: &DatasetManifest, path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("cache");
    let name = if manifest.name.is_empty() {
        stem
    } else {
        manifest.name.as_str()
    };
    let name: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{name}.renc")
}

pub fn prepare(a: &PrepareArgs) -> Result<u8> {
    let cfg = a.run.resolve()?;
    let path = cfg
        .manifest
        .clone()
        .ok_or_else(|| anyhow!("prepare needs --manifest"))?;
    let manifest = data::load_manifest(&path).with_context(|| format!("cannot load manifest {}", path.display()))?;
    let out = a.out.join(cache_name(&manifest, &path));
    let policy = if a.skip_bad {
        FramePolicy::Skip
    } else {
        FramePolicy::Fatal
    };
    let report = build_cache(&manifest, &cfg.preprocess, policy, &out)?;
    for (frame, why) in &report.skipped {
        eprintln!("skipped {frame}: {why}");
    }
    if report.unchanged {
        println!("unchanged: {} ({} records)", out.display(), report.written);
    } else {
        println!("wrote {} records to {}", report.written, out.display());
    }
    Ok(0)
}

/// Samples named by the configuration. Generated samples start at index
/// `first` of the generator's sequence.
fn load_samples(cfg: &RunConfig, first: u64) -> Result<(Vec<Sample>, Vec<String>)> {
    if let Some(n) = cfg.synthetic {
        let samples = synthetic_samples_from(&cfg.synth_config(), first, n, &cfg.preprocess)?;
        let refs = (0..n as u64).map(|i| format!("synthetic:{}", first + i)).collect();
        return Ok((samples, refs));
    }
    if let Some(path) = &cfg.cache {
        let cache = SampleCache::open(path).with_context(|| format!("cannot open cache {}", path.display()))?;
        let refs = (0..cache.len()).map(|i| format!("{i:06}")).collect();
        return Ok((cache.samples()?, refs));
    }
    if let Some(path) = &cfg.manifest {
        let manifest = data::load_manifest(path).with_context(|| format!("cannot load manifest {}", path.display()))?;
        let (samples, _) = build_samples(&manifest, &cfg.preprocess, FramePolicy::Fatal)?;
        let refs = manifest.entries.iter().map(|e| e.frame.clone()).collect();
        return Ok((samples, refs));
    }
    bail!("no data: pass --cache, --manifest or --synthetic N")
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Parent folder of run directories
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print progress every this many iterations (0 picks about 20 lines)
    #[arg(long, default_value_t = 0)]
    log_every: usize,
    /// Print the resolved configuration and exit
    #[arg(long)]
    dry_run: bool,
}

fn stop_flag() -> Result<Arc<AtomicBool>> {
    static FLAG: OnceLock<Arc<AtomicBool>> = OnceLock::new();
    if let Some(f) = FLAG.get() {
        return Ok(f.clone());
    }
    let flag = Arc::new(AtomicBool::new(false));
    let handler_flag = flag.clone();
    ctrlc::set_handler(move || handler_flag.store(true, Ordering::SeqCst)).context("cannot install Ctrl-C handler")?;
    Ok(FLAG.get_or_init(|| flag).clone())
}

struct Progress {
    every: usize,
    label: String,
}

impl Progress {
    fn report(&self, r: &LossRecord) {
        if (r.iter + 1).is_multiple_of(self.every) {
            eprintln!(
                "{}iter {:>7}  lr {:.2e}  loss {:.6}",
                self.label,
                r.iter + 1,
                r.lr,
                r.loss
            );
        }
    }
}

/// Trains one network, leaving its log in `state`.
fn run_member(
    model: &mut Model,
    samples: &[Sample],
    tcfg: &TrainConfig,
    state: &mut TrainState,
    snapshots: &Path,
    stop: &AtomicBool,
    progress: &Progress,
) -> Result<StopReason> {
    let mut hook = |r: &LossRecord| progress.report(r);
    let mut ctl = TrainControl {
        stop: Some(stop),
        snapshot_dir: Some(snapshots),
        on_iteration: Some(&mut hook),
    };
    train_until(model, samples, tcfg, state, tcfg.max_iters, &mut ctl).map_err(anyhow::Error::from)
}

pub fn train(a: &TrainArgs) -> Result<u8> {
    let mut cfg = a.run.resolve()?;
    if let Some(out) = &a.out {
        cfg.out = out.clone();
    }
    if a.dry_run {
        cfg.validate()?;
        print!("{}", cfg.to_text());
        return Ok(0);
    }
    let (samples, _) = load_samples(&cfg, 0)?;
    cfg.joints = samples.first().map_or(cfg.joints, Sample::joints);
    cfg.validate()?;
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let echo = cfg.to_text();
    print!("{echo}");
    std::fs::write(dir.join("config.txt"), &echo)?;

    let spec = cfg.model_spec(cfg.joints);
    let tcfg = cfg.train_config();
    let snapshots = dir.join("snapshots");
    let stop = stop_flag()?;
    let every = if a.log_every > 0 {
        a.log_every
    } else {
        (tcfg.max_iters / 20).max(1)
    };
    let started = Instant::now();

    let (checkpoint, params, logs) = match cfg.variant {
        Method::Single(_) => {
            let mut model = Model::new(spec, init_seed(tcfg.seed))?;
            let mut state = TrainState::new(&model);
            let progress = Progress {
                every,
                label: String::new(),
            };
            let outcome = run_member(&mut model, &samples, &tcfg, &mut state, &snapshots, &stop, &progress);
            write_loss_csv(dir.join("loss.csv"), &state.log)?;
            if let Some(code) = interrupted(outcome, &model, &dir.join("interrupted.ren"), state.iteration)? {
                return Ok(code);
            }
            let path = dir.join("model.ren");
            model.save(&path)?;
            (path, model.param_count().total, vec![state.log])
        }
        Method::BasicBagging => {
            let mut members = Vec::with_capacity(cfg.k);
            let mut logs = Vec::with_capacity(cfg.k);
            for (i, seed) in bagging_seeds(tcfg.seed, cfg.k).into_iter().enumerate() {
                let mcfg = TrainConfig { seed, ..tcfg.clone() };
                let mut model = Model::new(spec.clone(), init_seed(seed))?;
                let mut state = TrainState::new(&model);
                let progress = Progress {
                    every,
                    label: format!("member {i}  "),
                };
                let msnap = snapshots.join(format!("member{i}"));
                let outcome = run_member(&mut model, &samples, &mcfg, &mut state, &msnap, &stop, &progress);
                write_loss_csv(dir.join(format!("loss_member{i}.csv")), &state.log)?;
                let partial = dir.join(format!("interrupted-member{i}.ren"));
                if let Some(code) = interrupted(outcome, &model, &partial, state.iteration)? {
                    return Ok(code);
                }
                members.push(model);
                logs.push(state.log);
            }
            let params = members.iter().map(|m| m.param_count().total).sum();
            let path = BaggingEnsemble::new(members)?.save(dir.join("ensemble"))?;
            (path, params, logs)
        }
    };

    let elapsed = started.elapsed().as_secs_f64();
    let final_loss = |log: &[LossRecord]| {
        let tail = &log[log.len().saturating_sub(100)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
    };
    let mut summary = format!(
        "variant = {}\nsamples = {}\njoints = {}\nparameters = {params}\niterations = {}\nseconds = {elapsed:.1}\ncheckpoint = {}\n",
        cfg.variant,
        samples.len(),
        cfg.joints,
        tcfg.max_iters,
        checkpoint.display()
    );
    for (i, log) in logs.iter().enumerate() {
        summary.push_str(&format!("final_loss_{i} = {:.6}\n", final_loss(log)));
    }
    std::fs::write(dir.join("summary.txt"), &summary)?;
    println!("checkpoint {}", checkpoint.display());
    Ok(0)
}

/// On Ctrl-C saves the partial model and yields the exit code; passes
/// errors through.
fn interrupted(outcome: Result<StopReason>, model: &Model, path: &Path, iter: usize) -> Result<Option<u8>> {
    match outcome {
        Ok(StopReason::Finished) => Ok(None),
        Ok(StopReason::Interrupted) => {
            model.save(path)?;
            eprintln!("interrupted at iteration {iter}; snapshot {}", path.display());
            Ok(Some(INTERRUPTED))
        }
        Err(e) => {
            if let Some(ren::Error::Diverged { .. }) = e.downcast_ref::<ren::Error>() {
                eprintln!(
                    "diagnostic snapshot: {}",
                    path.with_file_name("snapshots").join("diverged.ren").display()
                );
            }
            Err(e)
        }
    }
}

/// A loaded checkpoint or ensemble with its display label.
fn load_predictor(path: &Path) -> Result<(String, Box<dyn Predictor>)> {
    if is_ensemble_descriptor(path) {
        let e = BaggingEnsemble::load(path)?;
        return Ok((Method::BasicBagging.name().to_string(), Box::new(e)));
    }
    let m = Model::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    Ok((m.spec().variant.name().to_string(), Box::new(m)))
}

/// Makes labels unique by numbering repeats.
fn unique_labels(labels: Vec<String>) -> Vec<String> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    labels
        .into_iter()
        .map(|l| {
            let n = seen.entry(l.clone()).or_default();
            *n += 1;
            if *n == 1 {
                l
            } else {
                format!("{l}-{n}")
            }
        })
        .collect()
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint (.ren) or ensemble descriptor; repeat to compare
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// Prediction file written by `predict`; repeat to compare
    #[arg(long = "predictions")]
    predictions: Vec<PathBuf>,
    /// Row labels in order, overriding the automatic ones
    #[arg(long = "label")]
    labels: Vec<String>,
    /// Index of the first generated sample (with --synthetic)
    #[arg(long, default_value_t = 0)]
    first: u64,
    /// Report directory
    #[arg(long, default_value = "report")]
    out: PathBuf,
    /// Also write SVG success curves
    #[arg(long)]
    svg: bool,
}

fn load_prediction_file(path: &Path, frames: usize, joints: usize) -> Result<Vec<HandAnnotation>> {
    let m = data::load_manifest(path).with_context(|| format!("cannot load predictions {}", path.display()))?;
    if m.joints != joints {
        bail!("{} has {} joints, ground truth has {joints}", path.display(), m.joints);
    }
    if m.len() != frames {
        bail!("{} has {} frames, ground truth has {frames}", path.display(), m.len());
    }
    Ok(m.entries.iter().map(ManifestEntry::annotation).collect())
}

pub fn eval(a: &EvalArgs) -> Result<u8> {
    let cfg = a.run.resolve()?;
    if a.checkpoints.is_empty() && a.predictions.is_empty() {
        bail!("eval needs --checkpoint or --predictions");
    }
    let (samples, _) = load_samples(&cfg, a.first)?;
    let joints = samples
        .first()
        .map(Sample::joints)
        .ok_or_else(|| anyhow!("evaluation set is empty"))?;
    let gts: Vec<HandAnnotation> = samples.iter().map(Sample::ground_truth).collect();

    let mut named = Vec::new();
    for path in &a.checkpoints {
        let (label, model) = load_predictor(path)?;
        if model.joints() != joints {
            bail!(
                "{} predicts {} joints but the evaluation set has {joints}",
                path.display(),
                model.joints()
            );
        }
        let (preds, _) = eval::predict_samples(model.as_ref(), &samples)?;
        named.push((label, preds));
    }
    for path in &a.predictions {
        let label = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("predictions")
            .to_string();
        named.push((label, load_prediction_file(path, samples.len(), joints)?));
    }
    let mut labels = unique_labels(named.iter().map(|(l, _)| l.clone()).collect());
    if !a.labels.is_empty() {
        if a.labels.len() != labels.len() {
            bail!("{} labels for {} methods", a.labels.len(), labels.len());
        }
        labels = a.labels.clone();
    }

    let mut reports = Vec::with_capacity(named.len());
    for (label, (_, preds)) in labels.into_iter().zip(named) {
        let report = EvalReport::from_predictions(label, &preds, &gts)?;
        eval::write_report_files(&a.out, &report, a.svg)?;
        reports.push(report);
    }
    let table = eval::compare_report(&reports)?;
    std::fs::write(a.out.join("comparison.txt"), table.to_text())?;
    std::fs::write(a.out.join("comparison.csv"), table.to_csv())?;
    if a.svg {
        std::fs::write(a.out.join("curves.svg"), eval::curves_svg(&reports))?;
    }
    println!("{} frames, {joints} joints", samples.len());
    print!("{}", table.to_text());
    Ok(0)
}

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint or ensemble descriptor; repeatable
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// Time freshly initialized networks of these variants (comma list)
    #[arg(long = "variants", value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Batch size of each timed forward pass
    #[arg(long = "bench-batch", default_value_t = 1)]
    bench_batch: usize,
    /// Require strictly increasing mean time, e.g. basic<region-ensemble<basic-bagging
    #[arg(long)]
    assert_order: Option<String>,
}

fn fresh_predictor(cfg: &RunConfig, method: Method) -> Result<Box<dyn Predictor>> {
    let mut cfg = cfg.clone();
    cfg.variant = method;
    let spec = cfg.model_spec(cfg.joints);
    Ok(match method {
        Method::Single(_) => Box::new(Model::new(spec, init_seed(cfg.seed))?),
        Method::BasicBagging => {
            let members = bagging_seeds(cfg.seed, cfg.k)
                .into_iter()
                .map(|s| Model::new(spec.clone(), init_seed(s)))
                .collect::<ren::Result<Vec<_>>>()?;
            Box::new(BaggingEnsemble::new(members)?)
        }
    })
}

pub fn bench(a: &BenchArgs) -> Result<u8> {
    let cfg = a.run.resolve()?;
    if a.reps < 10 {
        bail!("--reps must be at least 10, got {}", a.reps);
    }
    let mut rows: Vec<(String, Box<dyn Predictor>)> = Vec::new();
    for path in &a.checkpoints {
        rows.push(load_predictor(path)?);
    }
    for v in &a.variants {
        let method: Method = v.parse()?;
        rows.push((method.name().to_string(), fresh_predictor(&cfg, method)?));
    }
    if rows.is_empty() {
        bail!("bench needs --checkpoint or --variants");
    }
    let labels = unique_labels(rows.iter().map(|(l, _)| l.clone()).collect());
    let mut means = HashMap::new();
    println!(
        "{:<18} {:>6} {:>10} {:>10} {:>10}",
        "method", "batch", "mean_ms", "p50_ms", "p95_ms"
    );
    for (label, (_, model)) in labels.iter().zip(&rows) {
        let t = eval::benchmark_forward(model.as_ref(), a.bench_batch, a.warmup, a.reps)?;
        println!(
            "{label:<18} {:>6} {:>10.3} {:>10.3} {:>10.3}",
            t.batch, t.mean_ms, t.p50_ms, t.p95_ms
        );
        means.insert(label.clone(), t.mean_ms);
    }
    if let Some(order) = &a.assert_order {
        let names: Vec<&str> = order.split('<').map(str::trim).collect();
        let times = names
            .iter()
            .map(|n| {
                means
                    .get(*n)
                    .copied()
                    .ok_or_else(|| anyhow!("--assert-order names unknown method '{n}'"))
            })
            .collect::<Result<Vec<f64>>>()?;
        if times.windows(2).all(|w| w[0] < w[1]) {
            println!("order {order}: ok");
        } else {
            println!("order {order}: VIOLATED");
            return Ok(ASSERTION_FAILED);
        }
    }
    Ok(0)
}

#[derive(Args)]
pub struct PredictArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Index of the first generated sample (with --synthetic)
    #[arg(long, default_value_t = 0)]
    first: u64,
    /// Output file (manifest format, world millimeters)
    #[arg(long)]
    out: PathBuf,
}

pub fn predict(a: &PredictArgs) -> Result<u8> {
    let cfg = a.run.resolve()?;
    let (label, model) = load_predictor(&a.checkpoint)?;
    let (samples, refs) = load_samples(&cfg, a.first)?;
    let (preds, _) = eval::predict_samples(model.as_ref(), &samples)?;
    let manifest = DatasetManifest {
        name: format!("{label}-predictions"),
        joints: model.joints(),
        intrinsics: cfg.intrinsics,
        split: None,
        exclude: Vec::new(),
        entries: refs
            .into_iter()
            .zip(&preds)
            .map(|(frame, p)| ManifestEntry {
                frame,
                joints: p.flat(),
            })
            .collect(),
        base_dir: PathBuf::new(),
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    manifest.save(&a.out)?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(0)
}
