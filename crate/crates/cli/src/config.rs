//! Plain-text run configuration: one `key = value` per line, `#` starts a
//! comment. Every key has a default, unknown keys are rejected, and
//! command-line flags are applied on top of the file.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use ren::data::SynthConfig;
use ren::model::{ModelSpec, Variant};
use ren::preprocess::{AugmentRanges, CameraIntrinsics, PreprocessConfig};
use ren::train::TrainConfig;

/// What `train` produces: one network of a given variant, or an average of
/// independently trained basic networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Single(Variant),
    BasicBagging,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Single(v) => v.name(),
            Method::BasicBagging => "basic-bagging",
        }
    }

    /// Architecture of the network (or of each member).
    pub fn variant(self) -> Variant {
        match self {
            Method::Single(v) => v,
            Method::BasicBagging => Variant::Basic,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "basic-bagging" {
            return Ok(Method::BasicBagging);
        }
        s.parse::<Variant>().map(Method::Single).map_err(|_| {
            anyhow!(
                "unknown variant '{s}' (expected basic, basic-large, region-ensemble, region-bagging or basic-bagging)"
            )
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    /// Parent of the run directory.
    pub out: PathBuf,
    pub seed: u64,

    pub variant: Method,
    /// Members of a `basic-bagging` run.
    pub k: usize,
    pub grid_n: usize,
    pub fc_dim: usize,
    /// `None` picks the variant's own default.
    pub fc2_dim: Option<usize>,
    pub channels: [usize; 3],
    pub dropout: f64,

    pub train: TrainConfig,
    pub augment: bool,
    pub ranges: AugmentRanges,

    pub preprocess: PreprocessConfig,

    pub manifest: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    /// Use this many generated samples instead of a cache.
    pub synthetic: Option<usize>,
    pub joints: usize,
    pub intrinsics: CameraIntrinsics,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = ModelSpec::new(Variant::RegionEnsemble, 16);
        let train = TrainConfig::default();
        let synth = SynthConfig::default();
        RunConfig {
            name: "run".into(),
            out: PathBuf::from("runs"),
            seed: train.seed,
            variant: Method::Single(spec.variant),
            k: 4,
            grid_n: spec.grid_n,
            fc_dim: spec.fc_dim,
            fc2_dim: None,
            channels: spec.channels,
            dropout: spec.dropout,
            augment: train.augment.is_some(),
            ranges: train.augment.unwrap_or_default(),
            train,
            preprocess: PreprocessConfig::default(),
            manifest: None,
            cache: None,
            synthetic: None,
            joints: synth.joints,
            intrinsics: synth.intrinsics,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| anyhow!("{key}: cannot parse '{value}': {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("{key}: expected true or false, got '{value}'"),
    }
}

fn parse_channels(value: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| parse("channels", p.trim()))
        .collect::<Result<_>>()?;
    <[usize; 3]>::try_from(parts).map_err(|_| anyhow!("channels: expected three comma-separated widths, got '{value}'"))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "name" => self.name = value.to_string(),
            "out" => self.out = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            "k" => self.k = parse(key, value)?,
            "grid_n" => self.grid_n = parse(key, value)?,
            "fc_dim" => self.fc_dim = parse(key, value)?,
            "fc2_dim" => {
                self.fc2_dim = if value == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "channels" => self.channels = parse_channels(value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr0" => t.lr0 = parse(key, value)?,
            "lr_drop_every" => t.lr_drop_every = parse(key, value)?,
            "lr_factor" => t.lr_factor = parse(key, value)?,
            "max_iters" => t.max_iters = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "snapshot_every" => t.snapshot_every = parse(key, value)?,
            "keep_snapshots" => t.keep_snapshots = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "translate_mm" => self.ranges.translate_mm = parse(key, value)?,
            "scale_min" => self.ranges.scale_min = parse(key, value)?,
            "scale_max" => self.ranges.scale_max = parse(key, value)?,
            "rotate_deg" => self.ranges.rotate_deg = parse(key, value)?,
            "near_mm" => self.preprocess.near_mm = parse(key, value)?,
            "far_mm" => self.preprocess.far_mm = parse(key, value)?,
            "cube_size" => self.preprocess.cube_size = parse(key, value)?,
            "largest_component" => self.preprocess.largest_component = parse_bool(key, value)?,
            "patch_size" => self.preprocess.patch_size = parse(key, value)?,
            "manifest" => self.manifest = optional_path(value),
            "cache" => self.cache = optional_path(value),
            "synthetic" => {
                self.synthetic = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "joints" => self.joints = parse(key, value)?,
            "fx" => self.intrinsics.fx = parse(key, value)?,
            "fy" => self.intrinsics.fy = parse(key, value)?,
            "cx" => self.intrinsics.cx = parse(key, value)?,
            "cy" => self.intrinsics.cy = parse(key, value)?,
            _ => bail!("unknown key '{key}'"),
        }
        Ok(())
    }

    pub fn parse_text(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key = value", origin.display(), i + 1))?;
            cfg.set(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", origin.display(), i + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse_text(&text, path)
    }

    pub fn model_spec(&self, joints: usize) -> ModelSpec {
        let mut spec = ModelSpec::new(self.variant.variant(), joints)
            .with_channels(self.channels)
            .with_fc(self.fc_dim, self.fc2_dim.unwrap_or(0));
        if self.fc2_dim.is_none() {
            spec.fc2_dim = ModelSpec::new(spec.variant, joints).fc2_dim;
        }
        spec.grid_n = self.grid_n;
        spec.dropout = self.dropout;
        spec.input_size = self.preprocess.patch_size;
        spec
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            augment: self.augment.then_some(self.ranges),
            ..self.train.clone()
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            joints: self.joints,
            seed: self.seed,
            intrinsics: self.intrinsics,
            ..SynthConfig::default()
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(&self.name)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.model_spec(self.joints).validate()?;
        self.intrinsics.validate()?;
        if self.variant == Method::BasicBagging && self.k < 2 {
            bail!("basic-bagging needs k >= 2, got {}", self.k);
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            bail!("run name '{}' must be a plain directory name", self.name);
        }
        Ok(())
    }

    /// Every key with its resolved value; parsing this text reproduces the
    /// configuration.
    pub fn to_text(&self) -> String {
        let spec = self.model_spec(self.joints);
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("name", self.name.clone());
        kv("out", self.out.display().to_string());
        kv("seed", self.seed.to_string());
        kv("variant", self.variant.to_string());
        kv("k", self.k.to_string());
        kv("grid_n", self.grid_n.to_string());
        kv("fc_dim", self.fc_dim.to_string());
        kv("fc2_dim", spec.fc2_dim.to_string());
        kv("channels", self.channels.map(|c| c.to_string()).join(","));
        kv("dropout", self.dropout.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr0", t.lr0.to_string());
        kv("lr_drop_every", t.lr_drop_every.to_string());
        kv("lr_factor", t.lr_factor.to_string());
        kv("max_iters", t.max_iters.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("momentum", t.momentum.to_string());
        kv("snapshot_every", t.snapshot_every.to_string());
        kv("keep_snapshots", t.keep_snapshots.to_string());
        kv("augment", self.augment.to_string());
        kv("translate_mm", self.ranges.translate_mm.to_string());
        kv("scale_min", self.ranges.scale_min.to_string());
        kv("scale_max", self.ranges.scale_max.to_string());
        kv("rotate_deg", self.ranges.rotate_deg.to_string());
        kv("near_mm", self.preprocess.near_mm.to_string());
        kv("far_mm", self.preprocess.far_mm.to_string());
        kv("cube_size", self.preprocess.cube_size.to_string());
        kv("largest_component", self.preprocess.largest_component.to_string());
        kv("patch_size", self.preprocess.patch_size.to_string());
        kv("manifest", path(&self.manifest));
        kv("cache", path(&self.cache));
        kv("synthetic", self.synthetic.map_or("none".into(), |n| n.to_string()));
        kv("joints", self.joints.to_string());
        kv("fx", self.intrinsics.fx.to_string());
        kv("fy", self.intrinsics.fy.to_string());
        kv("cx", self.intrinsics.cx.to_string());
        kv("cy", self.intrinsics.cy.to_string());
        s
    }
}
