//! Depth frame to network input: foreground segmentation, hand centroid,
//! metric cube crop, depth normalization and the matching joint-label
//! transforms, plus patch-space augmentation.
//!
//! A crop is described by its centroid `c` (camera frame, mm), the cube
//! half-extent `e = cube_size * scale` and an in-plane rotation `theta`.
//! A world point `p` has normalized coordinates `R(theta) (p - c) / e`, where
//! `R` rotates about the optical axis. Patch pixels span `[-1, 1]` in the
//! normalized x and y axes and hold normalized depth.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Real;

pub type Point3 = [f64; 3];

/// Value written for missing or background depth.
pub const BACKGROUND: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = CameraIntrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Pinhole projection to `(u, v, depth)`.
    pub fn world_to_image(&self, p: Point3) -> Result<Point3> {
        if p[2] <= 0.0 {
            return Err(Error::Degenerate(format!("point {p:?} is not in front of the camera")));
        }
        Ok([p[0] * self.fx / p[2] + self.cx, p[1] * self.fy / p[2] + self.cy, p[2]])
    }

    pub fn image_to_world(&self, u: f64, v: f64, depth: f64) -> Result<Point3> {
        if depth <= 0.0 {
            return Err(Error::Degenerate(format!("depth {depth} is not positive")));
        }
        Ok([(u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth])
    }
}

/// Depth image in millimeters; 0 marks a missing measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
    pub intrinsics: CameraIntrinsics,
}

impl DepthFrame {
    pub fn new(width: usize, height: usize, depth: Vec<f32>, intrinsics: CameraIntrinsics) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::shape(
                "depth_frame",
                format!("{width}x{height} frame with {} depth values", depth.len()),
            ));
        }
        if let Some(bad) = depth.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::InvalidArgument(format!("invalid depth value {bad}")));
        }
        intrinsics.validate()?;
        Ok(DepthFrame {
            width,
            height,
            depth,
            intrinsics,
        })
    }

    pub fn empty(width: usize, height: usize, intrinsics: CameraIntrinsics) -> Self {
        DepthFrame {
            width,
            height,
            depth: vec![0.0; width * height],
            intrinsics,
        }
    }

    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.depth[v * self.width + u]
    }

    /// Bilinear depth at a fractional pixel position, ignoring missing
    /// neighbours. `None` when no valid neighbour contributes.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        if !(u > -1.0 && v > -1.0 && u < self.width as f64 && v < self.height as f64) {
            return None;
        }
        let (u0, v0) = (u.floor(), v.floor());
        let (fu, fv) = (u - u0, v - v0);
        // Accumulate offsets from the first valid value so a constant
        // neighbourhood reproduces that value exactly.
        let mut base = None;
        let mut acc = 0.0;
        let mut weight = 0.0;
        for (dy, wy) in [(0, 1.0 - fv), (1, fv)] {
            for (dx, wx) in [(0, 1.0 - fu), (1, fu)] {
                let (x, y) = (u0 as i64 + dx, v0 as i64 + dy);
                let w = wx * wy;
                if w <= 0.0 || x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
                    continue;
                }
                let d = self.at(x as usize, y as usize);
                if d > 0.0 {
                    let b = *base.get_or_insert(d as f64);
                    acc += w * (d as f64 - b);
                    weight += w;
                }
            }
        }
        base.filter(|_| weight > 1e-9).map(|b| b + acc / weight)
    }
}

/// Per-pixel foreground flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u]
    }
}

/// Pixels with a valid depth inside the inclusive band `[near, far]`.
pub fn segment_foreground(frame: &DepthFrame, near: f64, far: f64) -> Result<Mask> {
    if !(near < far) {
        return Err(Error::InvalidArgument(format!("depth band [{near}, {far}] is empty")));
    }
    let bits = frame
        .depth
        .iter()
        .map(|&d| d > 0.0 && (near..=far).contains(&(d as f64)))
        .collect();
    Ok(Mask {
        width: frame.width,
        height: frame.height,
        bits,
    })
}

/// Keeps only the largest 4-connected component. Ties go to the component
/// found first in row-major order.
pub fn largest_component(mask: &Mask) -> Mask {
    let mut label = vec![0u32; mask.bits.len()];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.bits.len() {
        if !mask.bits[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % mask.width, i / mask.width);
            let mut visit = |j: usize| {
                if mask.bits[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < mask.width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - mask.width);
            }
            if y + 1 < mask.height {
                visit(i + mask.width);
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    Mask {
        width: mask.width,
        height: mask.height,
        bits: label.iter().map(|&l| l != 0 && l == best.1).collect(),
    }
}

/// Mean of the back-projected 3-D points under the mask.
pub fn compute_centroid(frame: &DepthFrame, mask: &Mask) -> Result<Point3> {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for v in 0..frame.height {
        for u in 0..frame.width {
            let d = frame.at(u, v);
            if mask.get(u, v) && d > 0.0 {
                let p = frame.intrinsics.image_to_world(u as f64, v as f64, d as f64)?;
                sum.iter_mut().zip(p).for_each(|(s, c)| *s += c);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum.map(|s| s / n as f64))
}

/// Normalized depth patch and the crop it was taken with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropResult {
    /// Row-major `size x size` values in `[-1, 1]`.
    pub patch: Vec<f32>,
    pub size: usize,
    pub centroid: Point3,
    /// Half-extent of the cube before scaling, mm.
    pub cube_size: f64,
    /// In-plane rotation applied by augmentation, degrees.
    pub rotation_deg: f64,
    pub scale: f64,
}

impl CropResult {
    /// Half-extent of the cube actually covered by the patch.
    pub fn half_extent(&self) -> f64 {
        self.cube_size * self.scale
    }

    /// Depth in mm represented by a patch value.
    pub fn denormalize_depth(&self, value: f32) -> f64 {
        self.centroid[2] + value as f64 * self.half_extent()
    }

    pub fn to_world(&self, normalized: Point3) -> Point3 {
        let e = self.half_extent();
        let [x, y] = rotate(normalized[0], normalized[1], -self.rotation_deg);
        [
            self.centroid[0] + x * e,
            self.centroid[1] + y * e,
            self.centroid[2] + normalized[2] * e,
        ]
    }

    pub fn to_normalized(&self, p: Point3) -> Point3 {
        let e = self.half_extent();
        let [x, y] = rotate(
            (p[0] - self.centroid[0]) / e,
            (p[1] - self.centroid[1]) / e,
            self.rotation_deg,
        );
        [x, y, (p[2] - self.centroid[2]) / e]
    }
}

fn rotate(x: f64, y: f64, deg: f64) -> [f64; 2] {
    let (s, c) = deg.to_radians().sin_cos();
    [c * x - s * y, s * x + c * y]
}

/// Normalized coordinate of the center of patch pixel `i`.
fn pixel_to_unit(i: usize, size: usize) -> f64 {
    (i as f64 + 0.5) / size as f64 * 2.0 - 1.0
}

fn unit_to_pixel(x: f64, size: usize) -> f64 {
    (x + 1.0) / 2.0 * size as f64 - 0.5
}

/// Crops the cube of half-extent `cube_size` around `centroid` and resamples
/// it to a `size x size` patch with depth mapped linearly from
/// `[z - cube_size, z + cube_size]` to `[-1, 1]`. Missing depth becomes +1.
pub fn crop_cube(frame: &DepthFrame, centroid: Point3, cube_size: f64, size: usize) -> Result<CropResult> {
    if !(cube_size > 0.0) || size == 0 {
        return Err(Error::InvalidArgument(format!("cube {cube_size} / patch size {size}")));
    }
    let k = &frame.intrinsics;
    let [uc, vc, z] = k.world_to_image(centroid)?;
    let (ru, rv) = (cube_size * k.fx / z, cube_size * k.fy / z);
    let mut patch = Vec::with_capacity(size * size);
    for i in 0..size {
        let v = vc + pixel_to_unit(i, size) * rv;
        for j in 0..size {
            let u = uc + pixel_to_unit(j, size) * ru;
            let value = match frame.sample(u, v) {
                Some(d) => ((d.clamp(z - cube_size, z + cube_size) - z) / cube_size) as f32,
                None => BACKGROUND,
            };
            patch.push(value.clamp(-1.0, 1.0));
        }
    }
    Ok(CropResult {
        patch,
        size,
        centroid,
        cube_size,
        rotation_deg: 0.0,
        scale: 1.0,
    })
}

/// 3-D joint positions, camera frame, mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandAnnotation {
    pub joints: Vec<Point3>,
}

impl HandAnnotation {
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if !values.len().is_multiple_of(3) {
            return Err(Error::shape(
                "annotation",
                format!("{} values is not a multiple of 3", values.len()),
            ));
        }
        Ok(HandAnnotation {
            joints: values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }
}

/// Joint labels in crop coordinates, flattened `x1, y1, z1, x2, ...`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedJoints {
    pub values: Vec<f64>,
    /// Joints farther than two half-extents from the centroid on some axis.
    pub out_of_cube: Vec<usize>,
}

pub fn normalize_joints(ann: &HandAnnotation, crop: &CropResult) -> NormalizedJoints {
    let mut values = Vec::with_capacity(3 * ann.len());
    let mut out_of_cube = Vec::new();
    for (j, &p) in ann.joints.iter().enumerate() {
        let n = crop.to_normalized(p);
        if n.iter().any(|c| c.abs() > 2.0) {
            out_of_cube.push(j);
        }
        values.extend(n);
    }
    NormalizedJoints { values, out_of_cube }
}

/// Inverse of [`normalize_joints`].
pub fn denormalize_joints<T: Real>(pred: &[T], crop: &CropResult) -> HandAnnotation {
    HandAnnotation {
        joints: pred
            .chunks_exact(3)
            .map(|c| crop.to_world([c[0].to_f64(), c[1].to_f64(), c[2].to_f64()]))
            .collect(),
    }
}

/// One concrete augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Centroid shift, camera frame, mm.
    pub translate: Point3,
    /// Cube size multiplier.
    pub scale: f64,
    /// In-plane rotation about the patch center, degrees.
    pub rotate_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        translate: [0.0; 3],
        scale: 1.0,
        rotate_deg: 0.0,
    };
}

/// Uniform sampling ranges for augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    /// Maximum absolute shift per axis, mm.
    pub translate_mm: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum absolute rotation, degrees.
    pub rotate_deg: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            translate_mm: 10.0,
            scale_min: 0.9,
            scale_max: 1.1,
            rotate_deg: 180.0,
        }
    }
}

impl AugmentRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.translate_mm >= 0.0
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && self.rotate_deg >= 0.0
            && self.rotate_deg <= 180.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid augmentation ranges {self:?}")));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> AugmentParams {
        let mut sym = |r: f64| {
            if r > 0.0 {
                rng.random_range(-r..=r)
            } else {
                0.0
            }
        };
        let translate = [sym(self.translate_mm), sym(self.translate_mm), sym(self.translate_mm)];
        let rotate_deg = sym(self.rotate_deg);
        let scale = if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        AugmentParams {
            translate,
            scale,
            rotate_deg,
        }
    }
}

/// Bilinear read of a patch at fractional pixel coordinates; outside reads
/// return background.
fn sample_patch(patch: &[f32], size: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let w = wx * wy;
            if w == 0.0 {
                continue;
            }
            let (px, py) = (x0 as i64 + dx, y0 as i64 + dy);
            let v = if px < 0 || py < 0 || px >= size as i64 || py >= size as i64 {
                BACKGROUND as f64
            } else {
                patch[py as usize * size + px as usize] as f64
            };
            acc += w * v;
        }
    }
    acc
}

/// Moves the crop by `params` and resamples the patch accordingly. The
/// scene is unchanged, so `denormalize_joints(labels', crop')` still gives
/// the original world joints. The patch is transformed in its own plane
/// (orthographic approximation of the re-crop).
pub fn augment(crop: &CropResult, labels: &[f64], params: &AugmentParams) -> Result<(CropResult, Vec<f64>)> {
    if !(params.scale > 0.0) || !labels.len().is_multiple_of(3) {
        return Err(Error::InvalidArgument(format!(
            "augmentation {params:?} on {} labels",
            labels.len()
        )));
    }
    let e = crop.half_extent();
    let s = params.scale;
    // Translation expressed in the current normalized frame.
    let [tx, ty] = rotate(params.translate[0] / e, params.translate[1] / e, crop.rotation_deg);
    let tz = params.translate[2] / e;

    let mut new_labels = Vec::with_capacity(labels.len());
    for c in labels.chunks_exact(3) {
        let [x, y] = rotate(c[0] - tx, c[1] - ty, params.rotate_deg);
        new_labels.extend([x / s, y / s, (c[2] - tz) / s]);
    }

    let n = crop.size;
    let mut patch = Vec::with_capacity(n * n);
    for i in 0..n {
        let yp = pixel_to_unit(i, n);
        for j in 0..n {
            let xp = pixel_to_unit(j, n);
            let [rx, ry] = rotate(xp, yp, -params.rotate_deg);
            let (x, y) = (tx + s * rx, ty + s * ry);
            let old = sample_patch(&crop.patch, n, unit_to_pixel(x, n), unit_to_pixel(y, n));
            let value = if old >= BACKGROUND as f64 {
                BACKGROUND
            } else {
                (((old - tz) / s).clamp(-1.0, 1.0)) as f32
            };
            patch.push(value);
        }
    }

    let centroid = [
        crop.centroid[0] + params.translate[0],
        crop.centroid[1] + params.translate[1],
        crop.centroid[2] + params.translate[2],
    ];
    Ok((
        CropResult {
            patch,
            size: n,
            centroid,
            cube_size: crop.cube_size,
            rotation_deg: crop.rotation_deg + params.rotate_deg,
            scale: crop.scale * s,
        },
        new_labels,
    ))
}

/// Draws parameters from `ranges` and applies them.
pub fn augment_random(
    crop: &CropResult,
    labels: &[f64],
    ranges: &AugmentRanges,
    rng: &mut Rng,
) -> Result<(CropResult, Vec<f64>)> {
    augment(crop, labels, &ranges.sample(rng))
}

/// Settings for turning a raw frame into a crop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub near_mm: f64,
    pub far_mm: f64,
    pub largest_component: bool,
    pub cube_size: f64,
    pub patch_size: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            near_mm: 100.0,
            far_mm: 800.0,
            largest_component: true,
            cube_size: 150.0,
            patch_size: 96,
        }
    }
}

/// Segment, locate and crop the hand in one frame.
pub fn preprocess_frame(frame: &DepthFrame, cfg: &PreprocessConfig) -> Result<CropResult> {
    let mut mask = segment_foreground(frame, cfg.near_mm, cfg.far_mm)?;
    if cfg.largest_component {
        mask = largest_component(&mask);
    }
    let centroid = compute_centroid(frame, &mask)?;
    crop_cube(frame, centroid, cfg.cube_size, cfg.patch_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 160.0, 120.0).unwrap()
    }

    #[test]
    fn projection_cases() {
        let k = k();
        assert_eq!(k.world_to_image([0.0, 0.0, 500.0]).unwrap(), [160.0, 120.0, 500.0]);
        assert_eq!(k.world_to_image([100.0, 0.0, 500.0]).unwrap()[0], 260.0);
        assert!(k.world_to_image([0.0, 0.0, 0.0]).is_err());
        let p = [12.5, -40.25, 432.0];
        let [u, v, z] = k.world_to_image(p).unwrap();
        let q = k.image_to_world(u, v, z).unwrap();
        for (a, b) in p.iter().zip(q) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn segmentation_cases() {
        let empty = DepthFrame::empty(8, 6, k());
        assert!(segment_foreground(&empty, 200.0, 600.0).unwrap().is_empty());
        let mut one = empty.clone();
        one.depth[13] = 400.0;
        let m = segment_foreground(&one, 200.0, 600.0).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.bits[13]);
        assert!(segment_foreground(&one, 600.0, 200.0).is_err());
    }

    #[test]
    fn largest_component_keeps_biggest_blob() {
        let mut f = DepthFrame::empty(6, 3, k());
        for i in [0, 1, 6, 4, 5, 10, 11, 16, 17] {
            f.depth[i] = 300.0;
        }
        let m = largest_component(&segment_foreground(&f, 100.0, 500.0).unwrap());
        assert_eq!(m.count(), 6);
        assert!(!m.bits[0]);
    }

    #[test]
    fn centroid_cases() {
        let mut f = DepthFrame::empty(320, 240, k());
        f.depth[120 * 320 + 160] = 400.0;
        let m = segment_foreground(&f, 100.0, 800.0).unwrap();
        assert_eq!(compute_centroid(&f, &m).unwrap(), [0.0, 0.0, 400.0]);

        let mut f = DepthFrame::empty(320, 240, k());
        f.depth[120 * 320 + 150] = 400.0;
        f.depth[120 * 320 + 170] = 400.0;
        let m = segment_foreground(&f, 100.0, 800.0).unwrap();
        let c = compute_centroid(&f, &m).unwrap();
        assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12);

        let empty = DepthFrame::empty(4, 4, k());
        let m = segment_foreground(&empty, 100.0, 800.0).unwrap();
        assert!(matches!(compute_centroid(&empty, &m), Err(Error::EmptyMask)));
    }

    /// Short focal length so a 150mm cube at 400mm fits inside 320x240.
    fn wide() -> CameraIntrinsics {
        CameraIntrinsics::new(250.0, 250.0, 160.0, 120.0).unwrap()
    }

    #[test]
    fn crop_value_conventions() {
        let empty = DepthFrame::empty(320, 240, wide());
        let c = crop_cube(&empty, [0.0, 0.0, 400.0], 150.0, 96).unwrap();
        assert!(c.patch.iter().all(|&v| v == 1.0));

        let flat = DepthFrame::new(320, 240, vec![400.0; 320 * 240], wide()).unwrap();
        let c = crop_cube(&flat, [0.0, 0.0, 400.0], 150.0, 96).unwrap();
        assert!(c.patch.iter().all(|&v| v == 0.0));
        assert!(crop_cube(&flat, [0.0, 0.0, -5.0], 150.0, 96).is_err());

        let far = DepthFrame::new(320, 240, vec![1000.0; 320 * 240], wide()).unwrap();
        let c = crop_cube(&far, [0.0, 0.0, 400.0], 150.0, 96).unwrap();
        assert!(c.patch.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn depth_round_trip() {
        let flat = DepthFrame::new(320, 240, vec![437.3; 320 * 240], wide()).unwrap();
        let c = crop_cube(&flat, [0.0, 0.0, 400.0], 150.0, 96).unwrap();
        assert!((c.denormalize_depth(c.patch[0]) - 437.3).abs() < 0.5);
    }

    #[test]
    fn joint_normalization_cases() {
        let crop = CropResult {
            patch: vec![],
            size: 0,
            centroid: [10.0, -20.0, 400.0],
            cube_size: 150.0,
            rotation_deg: 0.0,
            scale: 1.0,
        };
        let ann = HandAnnotation {
            joints: vec![[10.0, -20.0, 400.0], [160.0, -20.0, 400.0], [10.0, -20.0, 800.0]],
        };
        let n = normalize_joints(&ann, &crop);
        assert_eq!(&n.values[..6], &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(n.out_of_cube, vec![2]);
    }

    #[test]
    fn identity_augmentation() {
        let crop = CropResult {
            patch: (0..16).map(|i| i as f32 / 16.0 - 0.5).collect(),
            size: 4,
            centroid: [0.0, 0.0, 400.0],
            cube_size: 150.0,
            rotation_deg: 0.0,
            scale: 1.0,
        };
        let labels = vec![0.1, -0.2, 0.3];
        let (c2, l2) = augment(&crop, &labels, &AugmentParams::IDENTITY).unwrap();
        assert_eq!(c2, crop);
        assert_eq!(l2, labels);
    }

    #[test]
    fn translation_shifts_labels() {
        let crop = CropResult {
            patch: vec![1.0; 16],
            size: 4,
            centroid: [0.0, 0.0, 400.0],
            cube_size: 150.0,
            rotation_deg: 0.0,
            scale: 1.0,
        };
        let params = AugmentParams {
            translate: [10.0, 0.0, 0.0],
            ..AugmentParams::IDENTITY
        };
        let (_, l) = augment(&crop, &[0.2, 0.1, 0.0], &params).unwrap();
        assert!((l[0] - (0.2 - 10.0 / 150.0)).abs() < 1e-12);
        assert!((l[1] - 0.1).abs() < 1e-12);
    }
}
