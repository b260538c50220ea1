//! Region ensemble network and the baseline variants it is compared with.
//!
//! All variants share the same convolutional trunk: three stages of two
//! 3x3 convolutions with ReLU followed by 2x2 max pooling, with 1x1
//! convolution bypasses across stages two and three. A 96x96 patch becomes a
//! 12x12x64 feature map. The variants differ only in the regression head:
//!
//! | variant           | head                                                        |
//! |-------------------|-------------------------------------------------------------|
//! | `Basic`           | full map -> FC -> FC -> pose                                 |
//! | `BasicLarge`      | as `Basic` with a wider second FC                            |
//! | `RegionEnsemble`  | n x n tiles -> FC -> FC each, concatenated -> pose           |
//! | `RegionBagging`   | n x n tiles -> FC -> FC -> pose each, predictions averaged   |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Gradients, ParamSet};
use crate::rng::{self, Rng};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Basic,
    BasicLarge,
    RegionEnsemble,
    RegionBagging,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Basic,
        Variant::BasicLarge,
        Variant::RegionEnsemble,
        Variant::RegionBagging,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::BasicLarge => "basic-large",
            Variant::RegionEnsemble => "region-ensemble",
            Variant::RegionBagging => "region-bagging",
        }
    }

    pub fn uses_regions(self) -> bool {
        matches!(self, Variant::RegionEnsemble | Variant::RegionBagging)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// Architecture description. Every size that differs between the variants
/// or between full-size and desk-scale models lives here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Regions per side of the feature-map grid.
    pub grid_n: usize,
    pub fc_dim: usize,
    pub fc2_dim: usize,
    pub joints: usize,
    /// Convolution width of each of the three trunk stages.
    pub channels: [usize; 3],
    pub input_size: usize,
    pub dropout: f64,
}

impl ModelSpec {
    pub fn new(variant: Variant, joints: usize) -> Self {
        ModelSpec {
            variant,
            grid_n: 2,
            fc_dim: 2048,
            fc2_dim: if variant == Variant::BasicLarge { 8192 } else { 2048 },
            joints,
            channels: [16, 32, 64],
            input_size: 96,
            dropout: 0.5,
        }
    }

    pub fn with_channels(mut self, channels: [usize; 3]) -> Self {
        self.channels = channels;
        self
    }

    pub fn with_fc(mut self, fc_dim: usize, fc2_dim: usize) -> Self {
        self.fc_dim = fc_dim;
        self.fc2_dim = fc2_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.channels.contains(&0) {
            return bad(format!("invalid channel plan {:?}", self.channels));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(8) {
            return bad(format!(
                "input size {} is not a positive multiple of 8",
                self.input_size
            ));
        }
        if self.grid_n == 0 || !self.trunk_size().is_multiple_of(self.grid_n) {
            return bad(format!(
                "grid {} does not divide feature map extent {}",
                self.grid_n,
                self.trunk_size()
            ));
        }
        if self.joints == 0 || self.fc_dim == 0 || self.fc2_dim == 0 {
            return bad("joint count and FC widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Spatial extent of the trunk output.
    pub fn trunk_size(&self) -> usize {
        self.input_size / 8
    }

    pub fn trunk_channels(&self) -> usize {
        self.channels[2]
    }

    pub fn region_size(&self) -> usize {
        self.trunk_size() / self.grid_n
    }

    pub fn region_count(&self) -> usize {
        if self.variant.uses_regions() {
            self.grid_n * self.grid_n
        } else {
            1
        }
    }

    /// Flattened width fed to the first FC layer of one branch.
    pub fn branch_input_dim(&self) -> usize {
        let side = if self.variant.uses_regions() {
            self.region_size()
        } else {
            self.trunk_size()
        };
        side * side * self.trunk_channels()
    }

    pub fn output_dim(&self) -> usize {
        3 * self.joints
    }

    /// Main-path layers of the trunk, in order, for receptive-field
    /// arithmetic. The 1x1 bypasses see a subset of the main path's field.
    pub fn trunk_layers(&self) -> Vec<LayerGeometry> {
        let conv = LayerGeometry {
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let pool = LayerGeometry {
            kernel: 2,
            stride: 2,
            pad: 0,
        };
        [conv, conv, pool].repeat(3)
    }

    pub fn to_header(&self) -> String {
        format!(
            "variant={}\ngrid_n={}\nfc_dim={}\nfc2_dim={}\njoints={}\nchannels={},{},{}\ninput_size={}\ndropout={}\n",
            self.variant,
            self.grid_n,
            self.fc_dim,
            self.fc2_dim,
            self.joints,
            self.channels[0],
            self.channels[1],
            self.channels[2],
            self.input_size,
            self.dropout
        )
    }

    pub fn from_header(text: &str) -> Result<Self> {
        let mut spec = ModelSpec::new(Variant::Basic, 0);
        let mut seen_variant = false;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad model header line {line:?}")))?;
            let num = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Format(format!("bad value for {key}: {v:?}")))
            };
            match key {
                "variant" => {
                    spec.variant = value.parse()?;
                    seen_variant = true;
                }
                "grid_n" => spec.grid_n = num(value)?,
                "fc_dim" => spec.fc_dim = num(value)?,
                "fc2_dim" => spec.fc2_dim = num(value)?,
                "joints" => spec.joints = num(value)?,
                "input_size" => spec.input_size = num(value)?,
                "dropout" => {
                    spec.dropout = value
                        .parse()
                        .map_err(|_| Error::Format(format!("bad dropout {value:?}")))?
                }
                "channels" => {
                    let parts = value.split(',').map(num).collect::<Result<Vec<_>>>()?;
                    spec.channels = parts
                        .try_into()
                        .map_err(|_| Error::Format(format!("channels needs three widths, got {value:?}")))?;
                }
                other => return Err(Error::Format(format!("unknown model header key {other:?}"))),
            }
        }
        if !seen_variant {
            return Err(Error::Format("model header has no variant".into()));
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Kernel, stride and padding of one layer along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Inclusive pixel rectangle `[top, bottom] x [left, right]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl PixelRect {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..=self.bottom).contains(&y) && (self.left..=self.right).contains(&x)
    }
}

/// Input-image rectangle that can influence the output cells
/// `rows x cols` (half-open ranges) after `layers`, clipped to an
/// `input_size` square.
pub fn receptive_field(
    layers: &[LayerGeometry],
    input_size: usize,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> PixelRect {
    let mut jump = 1i64;
    let mut size = 1i64;
    let mut offset = 0i64;
    for l in layers {
        offset -= l.pad as i64 * jump;
        size += (l.kernel as i64 - 1) * jump;
        jump *= l.stride as i64;
    }
    let span = |r: &std::ops::Range<usize>| {
        let lo = offset + r.start as i64 * jump;
        let hi = offset + (r.end as i64 - 1) * jump + size - 1;
        (lo.max(0) as usize, hi.min(input_size as i64 - 1) as usize)
    };
    let (top, bottom) = span(&rows);
    let (left, right) = span(&cols);
    PixelRect {
        top,
        left,
        bottom,
        right,
    }
}

/// Parameter totals grouped by the first component of each name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub parts: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCount {
    pub fn part(&self, name: &str) -> usize {
        self.parts.iter().find(|(n, _)| n == name).map_or(0, |(_, c)| *c)
    }

    /// Everything outside the trunk.
    pub fn head(&self) -> usize {
        self.total - self.part("trunk")
    }
}

/// Named nodes of one forward pass, for inspection and tests.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub features: NodeId,
    pub regions: Vec<NodeId>,
    /// Per-branch poses (`RegionBagging` only).
    pub branch_poses: Vec<NodeId>,
    /// Concatenated branch features (`RegionEnsemble` only).
    pub fused: Option<NodeId>,
    pub pose: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    spec: ModelSpec,
    params: ParamSet<T>,
}

/// Variance gain of the regression layers, one hundredth of the plain
/// fan-in rule: initial poses start near the cube center instead of
/// amplifying the unnormalized trunk activations.
const OUTPUT_INIT_GAIN: f64 = 0.03;

fn uniform_tensor<T: Real>(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
}

impl<T: Real> Model<T> {
    /// Fresh model with fan-in scaled uniform weights and zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::seeded(seed);
        let mut params = ParamSet::new();
        let mut conv = |params: &mut ParamSet<T>, name: &str, out_c: usize, in_c: usize, k: usize| -> Result<()> {
            let bound = (6.0 / (in_c * k * k) as f64).sqrt();
            params.add(
                format!("{name}.weight"),
                uniform_tensor(&[out_c, in_c, k, k], bound, &mut rng),
            )?;
            params.add(format!("{name}.bias"), Tensor::zeros([out_c]))?;
            Ok(())
        };
        let [c1, c2, c3] = spec.channels;
        conv(&mut params, "trunk.conv1", c1, 1, 3)?;
        conv(&mut params, "trunk.conv2", c1, c1, 3)?;
        conv(&mut params, "trunk.conv3", c2, c1, 3)?;
        conv(&mut params, "trunk.conv4", c2, c2, 3)?;
        conv(&mut params, "trunk.res2", c2, c1, 1)?;
        conv(&mut params, "trunk.conv5", c3, c2, 3)?;
        conv(&mut params, "trunk.conv6", c3, c3, 3)?;
        conv(&mut params, "trunk.res3", c3, c2, 1)?;

        let mut fc = |params: &mut ParamSet<T>, name: &str, d: usize, k: usize, gain: f64| -> Result<()> {
            let bound = (gain / d as f64).sqrt();
            params.add(format!("{name}.weight"), uniform_tensor(&[d, k], bound, &mut rng))?;
            params.add(format!("{name}.bias"), Tensor::zeros([k]))?;
            Ok(())
        };
        let d_in = spec.branch_input_dim();
        let out = spec.output_dim();
        match spec.variant {
            Variant::Basic | Variant::BasicLarge => {
                fc(&mut params, "head.fc1", d_in, spec.fc_dim, 6.0)?;
                fc(&mut params, "head.fc2", spec.fc_dim, spec.fc2_dim, 6.0)?;
                fc(&mut params, "head.out", spec.fc2_dim, out, OUTPUT_INIT_GAIN)?;
            }
            Variant::RegionEnsemble => {
                for r in 0..spec.region_count() {
                    fc(&mut params, &format!("region{r}.fc1"), d_in, spec.fc_dim, 6.0)?;
                    fc(&mut params, &format!("region{r}.fc2"), spec.fc_dim, spec.fc2_dim, 6.0)?;
                }
                fc(
                    &mut params,
                    "fusion.out",
                    spec.region_count() * spec.fc2_dim,
                    out,
                    OUTPUT_INIT_GAIN,
                )?;
            }
            Variant::RegionBagging => {
                for r in 0..spec.region_count() {
                    fc(&mut params, &format!("region{r}.fc1"), d_in, spec.fc_dim, 6.0)?;
                    fc(&mut params, &format!("region{r}.fc2"), spec.fc_dim, spec.fc2_dim, 6.0)?;
                    fc(
                        &mut params,
                        &format!("region{r}.out"),
                        spec.fc2_dim,
                        out,
                        OUTPUT_INIT_GAIN,
                    )?;
                }
            }
        }
        Ok(Model { spec, params })
    }

    /// Wraps an existing parameter set, checking it has exactly the tensors
    /// a fresh model of `spec` would have.
    pub fn from_params(spec: ModelSpec, params: ParamSet<T>) -> Result<Self> {
        let template = Model::<T>::new(spec.clone(), 0)?;
        let names_match = template.params.len() == params.len()
            && template
                .params
                .iter()
                .zip(params.iter())
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape());
        if !names_match {
            return Err(Error::Format(format!(
                "parameters do not match a {} model",
                spec.variant
            )));
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }

    pub fn param_count(&self) -> ParamCount {
        let mut parts: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.params.iter() {
            let group = name.split('.').next().unwrap_or(name);
            match parts.iter_mut().find(|(n, _)| n == group) {
                Some((_, c)) => *c += t.numel(),
                None => parts.push((group.to_string(), t.numel())),
            }
        }
        ParamCount {
            total: parts.iter().map(|(_, c)| c).sum(),
            parts,
        }
    }

    /// Graph over this model's parameters.
    pub fn graph(&self, training: bool) -> Graph<'_, T> {
        Graph::with_params(&self.params, training)
    }

    fn conv_relu<'p>(&self, g: &mut Graph<'p, T>, x: NodeId, name: &str) -> Result<NodeId> {
        let w = g.param_named(&format!("{name}.weight"))?;
        let b = g.param_named(&format!("{name}.bias"))?;
        let y = g.conv2d(x, w, b, 1, 1)?;
        g.relu(y)
    }

    /// Convolutional feature extractor: `N x 1 x S x S` to
    /// `N x C x S/8 x S/8`.
    pub fn trunk<'p>(&self, g: &mut Graph<'p, T>, input: NodeId) -> Result<NodeId> {
        let s = self.spec.input_size;
        if g.shape(input) != [g.shape(input).first().copied().unwrap_or(0), 1, s, s] {
            return Err(Error::shape(
                "trunk",
                format!("expected N x 1 x {s} x {s}, got {:?}", g.shape(input)),
            ));
        }
        let mut x = input;
        for (stage, convs) in [
            (1, ["conv1", "conv2"]),
            (2, ["conv3", "conv4"]),
            (3, ["conv5", "conv6"]),
        ] {
            let mut h = self.conv_relu(g, x, &format!("trunk.{}", convs[0]))?;
            h = self.conv_relu(g, h, &format!("trunk.{}", convs[1]))?;
            if stage > 1 {
                let w = g.param_named(&format!("trunk.res{stage}.weight"))?;
                let b = g.param_named(&format!("trunk.res{stage}.bias"))?;
                let bypass = g.conv2d(x, w, b, 1, 0)?;
                h = g.add(h, bypass)?;
            }
            x = g.maxpool2(h)?;
        }
        Ok(x)
    }

    fn fc<'p>(&self, g: &mut Graph<'p, T>, x: NodeId, name: &str) -> Result<NodeId> {
        let w = g.param_named(&format!("{name}.weight"))?;
        let b = g.param_named(&format!("{name}.bias"))?;
        g.linear(x, w, b)
    }

    /// FC -> ReLU -> dropout, twice.
    fn branch<'p>(&self, g: &mut Graph<'p, T>, x: NodeId, prefix: &str, rng: &mut Rng) -> Result<NodeId> {
        let mut h = g.flatten(x)?;
        for layer in ["fc1", "fc2"] {
            h = self.fc(g, h, &format!("{prefix}.{layer}"))?;
            h = g.relu(h)?;
            h = g.dropout(h, self.spec.dropout, rng)?;
        }
        Ok(h)
    }

    pub fn forward_nodes<'p>(&self, g: &mut Graph<'p, T>, input: NodeId, rng: &mut Rng) -> Result<ForwardNodes> {
        let features = self.trunk(g, input)?;
        let mut nodes = ForwardNodes {
            features,
            regions: Vec::new(),
            branch_poses: Vec::new(),
            fused: None,
            pose: features,
        };
        match self.spec.variant {
            Variant::Basic | Variant::BasicLarge => {
                let h = self.branch(g, features, "head", rng)?;
                nodes.pose = self.fc(g, h, "head.out")?;
            }
            Variant::RegionEnsemble => {
                nodes.regions = partition_regions(g, features, self.spec.grid_n)?;
                let mut branches = Vec::with_capacity(nodes.regions.len());
                for (r, &region) in nodes.regions.iter().enumerate() {
                    branches.push(self.branch(g, region, &format!("region{r}"), rng)?);
                }
                let fused = g.concat(&branches)?;
                nodes.fused = Some(fused);
                nodes.pose = self.fc(g, fused, "fusion.out")?;
            }
            Variant::RegionBagging => {
                nodes.regions = partition_regions(g, features, self.spec.grid_n)?;
                for (r, &region) in nodes.regions.iter().enumerate() {
                    let h = self.branch(g, region, &format!("region{r}"), rng)?;
                    let pose = self.fc(g, h, &format!("region{r}.out"))?;
                    nodes.branch_poses.push(pose);
                }
                nodes.pose = g.mean(&nodes.branch_poses)?;
            }
        }
        Ok(nodes)
    }

    /// Pose output `N x 3J` for a batch of patches.
    pub fn forward<'p>(&self, g: &mut Graph<'p, T>, input: NodeId, rng: &mut Rng) -> Result<NodeId> {
        Ok(self.forward_nodes(g, input, rng)?.pose)
    }

    /// Inference-mode predictions for `N x 1 x S x S` patches.
    pub fn predict(&self, patches: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.graph(false);
        let x = g.input(patches)?;
        // inference never draws from the generator
        let mut rng = rng::seeded(0);
        let pose = self.forward(&mut g, x, &mut rng)?;
        Ok(g.value(pose).clone())
    }

    /// Mean squared error of one batch and its parameter gradients.
    pub fn loss_and_grads(&self, patches: Tensor<T>, targets: Tensor<T>, rng: &mut Rng) -> Result<(f64, Gradients<T>)> {
        let mut g = self.graph(true);
        let x = g.input(patches)?;
        let t = g.input(targets)?;
        let pose = self.forward(&mut g, x, rng)?;
        let loss = g.mse_loss(pose, t)?;
        let value = g.value(loss).data()[0].to_f64();
        let grads = g.backward(loss)?;
        Ok((value, grads))
    }
}

impl Model<f32> {
    /// Writes the plain-text spec header followed by the parameter blob.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = format!("{MODEL_HEADER}\n{}{HEADER_END}\n", self.spec.to_header()).into_bytes();
        checkpoint::write_params(&mut buf, &self.params).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let start = MODEL_HEADER.len() + 1;
        if !bytes.starts_with(MODEL_HEADER.as_bytes()) {
            return Err(Error::Format(format!("{} is not a model checkpoint", path.display())));
        }
        let marker = format!("{HEADER_END}\n");
        let end = bytes[start..]
            .windows(marker.len())
            .position(|w| w == marker.as_bytes())
            .ok_or_else(|| Error::Format("model header is not terminated".into()))?
            + start;
        let header = std::str::from_utf8(&bytes[start..end]).map_err(|e| Error::Format(e.to_string()))?;
        let spec = ModelSpec::from_header(header)?;
        let params = checkpoint::read_params(&bytes[end + marker.len()..])?;
        Model::from_params(spec, params)
    }
}

const MODEL_HEADER: &str = "ren-model 1";
const HEADER_END: &str = "---";

/// Splits an `N x C x H x W` feature map into `n x n` non-overlapping tiles
/// in row-major order.
pub fn partition_regions<T: Real>(g: &mut Graph<'_, T>, features: NodeId, n: usize) -> Result<Vec<NodeId>> {
    let &[_, _, h, w] = g.shape(features) else {
        return Err(Error::shape(
            "partition_regions",
            format!("expected NCHW, got {:?}", g.shape(features)),
        ));
    };
    if n == 0 || h % n != 0 || w % n != 0 {
        return Err(Error::shape(
            "partition_regions",
            format!("grid {n} does not divide {h}x{w}"),
        ));
    }
    let (th, tw) = (h / n, w / n);
    let mut tiles = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            tiles.push(g.tile(features, row * th, col * tw, th, tw)?);
        }
    }
    Ok(tiles)
}
