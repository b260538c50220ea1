//! Procedural depth hands: a palm ellipsoid and five two-segment capsule
//! fingers, posed at random and ray-cast through a pinhole camera.
//!
//! The 16 annotated joints are the palm center plus base, middle and tip
//! of each finger. Poses in which any joint is hidden behind another part
//! of the hand are rejected and redrawn, so the depth at every joint's
//! projected pixel lies within one primitive radius of the joint.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{CameraIntrinsics, DepthFrame, HandAnnotation, Point3};
use crate::rng::{self, Rng};

/// Largest distance between a visible joint's depth and the surface depth
/// rendered at its pixel.
pub const SURFACE_OFFSET_BOUND_MM: f64 = 25.0;

pub const MAX_JOINTS: usize = 16;
pub const MIN_JOINTS: usize = 5;

/// Palm center, then thumb, index, middle, ring, pinky as (base, mid, tip).
pub const JOINT_NAMES: [&str; MAX_JOINTS] = [
    "palm", "thumb1", "thumb2", "thumb3", "index1", "index2", "index3", "middle1", "middle2", "middle3", "ring1",
    "ring2", "ring3", "pinky1", "pinky2", "pinky3",
];

/// Order in which joints are kept when fewer than 16 are requested.
const JOINT_PRIORITY: [usize; MAX_JOINTS] = [0, 3, 6, 9, 12, 15, 1, 4, 7, 10, 13, 2, 5, 8, 11, 14];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub joints: usize,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    /// Range of the hand center distance from the camera, mm.
    pub depth_range: (f64, f64),
    /// Amplitude of uniform per-pixel depth jitter, mm.
    pub noise_mm: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            joints: 16,
            seed: 0,
            intrinsics: CameraIntrinsics {
                fx: 241.42,
                fy: 241.42,
                cx: 160.0,
                cy: 120.0,
            },
            width: 320,
            height: 240,
            depth_range: (350.0, 450.0),
            noise_mm: 1.0,
        }
    }
}

/// One rendered scene and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub frame: DepthFrame,
    pub annotation: HandAnnotation,
    /// Center of the palm ellipsoid (always the palm joint).
    pub hand_center: Point3,
}

type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

type Mat3 = [[f64; 3]; 3];

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose(m: &Mat3) -> Mat3 {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

#[derive(Clone, Debug)]
enum Primitive {
    Capsule {
        a: Vec3,
        b: Vec3,
        radius: f64,
    },
    /// Ellipsoid with rotation `axes` (rows are the local axes in camera frame).
    Ellipsoid {
        center: Vec3,
        axes: Mat3,
        radii: Vec3,
    },
}

impl Primitive {
    /// Smallest ray parameter `t > 0` with `origin = 0` and unit `dir`.
    fn intersect(&self, dir: Vec3) -> Option<f64> {
        match self {
            Primitive::Capsule { a, b, radius } => capsule_hit(*a, *b, *radius, dir),
            Primitive::Ellipsoid { center, axes, radii } => {
                let o = mat_vec(axes, scale(*center, -1.0));
                let d = mat_vec(axes, dir);
                let o = [o[0] / radii[0], o[1] / radii[1], o[2] / radii[2]];
                let d = [d[0] / radii[0], d[1] / radii[1], d[2] / radii[2]];
                let qa = dot(d, d);
                let qb = dot(o, d);
                let qc = dot(o, o) - 1.0;
                let disc = qb * qb - qa * qc;
                if disc < 0.0 {
                    return None;
                }
                let t = (-qb - disc.sqrt()) / qa;
                (t > 0.0).then_some(t)
            }
        }
    }

    fn translated(&self, offset: Vec3) -> Primitive {
        match self {
            Primitive::Capsule { a, b, radius } => Primitive::Capsule {
                a: add(*a, offset),
                b: add(*b, offset),
                radius: *radius,
            },
            Primitive::Ellipsoid { center, axes, radii } => Primitive::Ellipsoid {
                center: add(*center, offset),
                axes: *axes,
                radii: *radii,
            },
        }
    }

    fn bound_points(&self) -> Vec<(Vec3, f64)> {
        match self {
            Primitive::Capsule { a, b, radius } => vec![(*a, *radius), (*b, *radius)],
            Primitive::Ellipsoid { center, radii, .. } => {
                vec![(*center, radii[0].max(radii[1]).max(radii[2]))]
            }
        }
    }
}

/// Ray (origin 0, unit direction) against a capsule.
fn capsule_hit(a: Vec3, b: Vec3, r: f64, rd: Vec3) -> Option<f64> {
    let ro = [0.0; 3];
    let ba = sub(b, a);
    let oa = sub(ro, a);
    let baba = dot(ba, ba);
    let bard = dot(ba, rd);
    let baoa = dot(ba, oa);
    let rdoa = dot(rd, oa);
    let oaoa = dot(oa, oa);
    let qa = baba - bard * bard;
    let qb = baba * rdoa - baoa * bard;
    let qc = baba * oaoa - baoa * baoa - r * r * baba;
    let h = qb * qb - qa * qc;
    if h >= 0.0 && qa.abs() > 1e-12 {
        let t = (-qb - h.sqrt()) / qa;
        let y = baoa + t * bard;
        if y > 0.0 && y < baba && t > 0.0 {
            return Some(t);
        }
    }
    // end caps
    let sphere = |c: Vec3| -> Option<f64> {
        let oc = sub(ro, c);
        let b = dot(oc, rd);
        let c2 = dot(oc, oc) - r * r;
        let h = b * b - c2;
        if h < 0.0 {
            return None;
        }
        let t = -b - h.sqrt();
        (t > 0.0).then_some(t)
    };
    match (sphere(a), sphere(b)) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    }
}

struct Finger {
    base: Vec3,
    lengths: [f64; 2],
    radius: f64,
    /// Resting direction in the palm plane, radians from -y toward +x.
    heading: f64,
}

fn fingers() -> [Finger; 5] {
    [
        Finger {
            base: [30.0, 10.0, 0.0],
            lengths: [38.0, 34.0],
            radius: 10.0,
            heading: 0.9,
        },
        Finger {
            base: [24.0, -38.0, 0.0],
            lengths: [42.0, 42.0],
            radius: 9.0,
            heading: 0.08,
        },
        Finger {
            base: [7.0, -42.0, 0.0],
            lengths: [46.0, 46.0],
            radius: 9.0,
            heading: 0.0,
        },
        Finger {
            base: [-10.0, -40.0, 0.0],
            lengths: [43.0, 42.0],
            radius: 8.5,
            heading: -0.08,
        },
        Finger {
            base: [-26.0, -34.0, 0.0],
            lengths: [34.0, 32.0],
            radius: 7.5,
            heading: -0.18,
        },
    ]
}

struct Pose {
    joints: Vec<Vec3>,
    primitives: Vec<Primitive>,
}

fn sample_pose(cfg: &SynthConfig, rng: &mut Rng) -> Pose {
    let size = rng.random_range(0.9..1.1);
    let global = mat_mul(
        &rot_z(rng.random_range(-1.0..1.0) * std::f64::consts::PI),
        &mat_mul(&rot_x(rng.random_range(-0.5..0.5)), &rot_y(rng.random_range(-0.5..0.5))),
    );
    let z = rng.random_range(cfg.depth_range.0..=cfg.depth_range.1);
    let k = &cfg.intrinsics;
    // keep the hand center well inside the image
    let u = k.cx + rng.random_range(-0.15..0.15) * cfg.width as f64;
    let v = k.cy + rng.random_range(-0.15..0.15) * cfg.height as f64;
    let center = [(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z];
    let place = |p: Vec3| add(center, mat_vec(&global, scale(p, size)));

    let mut joints = vec![center];
    let mut primitives = vec![Primitive::Ellipsoid {
        center,
        axes: transpose(&global),
        radii: [38.0 * size, 44.0 * size, 14.0 * size],
    }];
    for f in fingers() {
        let spread = rng.random_range(-0.2..0.2);
        let heading = f.heading + spread;
        // flexion curls the finger toward the camera (palm side)
        let flex1 = rng.random_range(0.0..1.0_f64);
        let flex2 = rng.random_range(0.0..1.2_f64);
        let dir = |flex: f64| -> Vec3 {
            let planar = [heading.sin(), -heading.cos(), 0.0];
            [planar[0] * flex.cos(), planar[1] * flex.cos(), -flex.sin()]
        };
        let base = f.base;
        let mid = add(base, scale(dir(flex1), f.lengths[0]));
        let tip = add(mid, scale(dir(flex1 + flex2), f.lengths[1]));
        let (base, mid, tip) = (place(base), place(mid), place(tip));
        joints.extend([base, mid, tip]);
        primitives.push(Primitive::Capsule {
            a: base,
            b: mid,
            radius: f.radius * size,
        });
        primitives.push(Primitive::Capsule {
            a: mid,
            b: tip,
            radius: f.radius * 0.9 * size,
        });
    }
    Pose { joints, primitives }
}

fn render(cfg: &SynthConfig, pose: &Pose, rng: &mut Rng) -> DepthFrame {
    let k = &cfg.intrinsics;
    let mut frame = DepthFrame::empty(cfg.width, cfg.height, *k);
    let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for prim in &pose.primitives {
        for (p, r) in prim.bound_points() {
            let z = (p[2] - r).max(1.0);
            let (pu, pv) = (p[0] * k.fx / p[2] + k.cx, p[1] * k.fy / p[2] + k.cy);
            let (ru, rv) = (r * k.fx / z * 1.5, r * k.fy / z * 1.5);
            u0 = u0.min(pu - ru);
            u1 = u1.max(pu + ru);
            v0 = v0.min(pv - rv);
            v1 = v1.max(pv + rv);
        }
    }
    let clamp = |x: f64, hi: usize| x.floor().clamp(0.0, hi as f64 - 1.0) as usize;
    let (u0, u1, v0, v1) = (
        clamp(u0, cfg.width),
        clamp(u1, cfg.width),
        clamp(v0, cfg.height),
        clamp(v1, cfg.height),
    );
    for v in v0..=v1 {
        for u in u0..=u1 {
            let ray = [(u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0];
            let norm = dot(ray, ray).sqrt();
            let dir = scale(ray, 1.0 / norm);
            let hit = pose
                .primitives
                .iter()
                .filter_map(|p| p.intersect(dir))
                .fold(f64::INFINITY, f64::min);
            if hit.is_finite() {
                let mut depth = hit * dir[2];
                if cfg.noise_mm > 0.0 {
                    depth += rng.random_range(-cfg.noise_mm..=cfg.noise_mm);
                }
                frame.depth[v * cfg.width + u] = depth.max(1.0) as f32;
            }
        }
    }
    frame
}

/// True when every joint projects inside the frame onto a surface no more
/// than [`SURFACE_OFFSET_BOUND_MM`] in front of it.
fn joints_visible(frame: &DepthFrame, joints: &[Vec3]) -> bool {
    joints.iter().all(|&j| {
        let Ok([u, v, z]) = frame.intrinsics.world_to_image(j) else {
            return false;
        };
        let (u, v) = (u.round(), v.round());
        if u < 0.0 || v < 0.0 || u >= frame.width as f64 || v >= frame.height as f64 {
            return false;
        }
        let d = frame.at(u as usize, v as usize) as f64;
        d > 0.0 && (z - d).abs() <= SURFACE_OFFSET_BOUND_MM
    })
}

/// Indices into the 16-joint skeleton kept for a `joints`-joint profile,
/// in skeleton order.
pub fn joint_subset(joints: usize) -> Result<Vec<usize>> {
    if !(MIN_JOINTS..=MAX_JOINTS).contains(&joints) {
        return Err(Error::InvalidArgument(format!(
            "synthetic hands have {MIN_JOINTS}..={MAX_JOINTS} joints, {joints} requested"
        )));
    }
    let mut keep = JOINT_PRIORITY[..joints].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Renders sample `index` of the stream selected by `cfg.seed`. Samples
/// are independent of each other, so any subset can be regenerated.
pub fn synth_sample(cfg: &SynthConfig, index: u64) -> Result<SynthSample> {
    let keep = joint_subset(cfg.joints)?;
    cfg.intrinsics.validate()?;
    let mut rng = rng::stream(cfg.seed, index);
    loop {
        let pose = sample_pose(cfg, &mut rng);
        let frame = render(cfg, &pose, &mut rng);
        if joints_visible(&frame, &pose.joints) {
            return Ok(SynthSample {
                frame,
                hand_center: pose.joints[0],
                annotation: HandAnnotation {
                    joints: keep.iter().map(|&i| pose.joints[i]).collect(),
                },
            });
        }
    }
}

/// `count` consecutive samples starting at stream index 0.
pub fn synth_generate(cfg: &SynthConfig, count: usize) -> Result<Vec<SynthSample>> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "synthetic sample count must be at least 1".into(),
        ));
    }
    (0..count as u64).map(|i| synth_sample(cfg, i)).collect()
}

/// Sample `index` with the whole hand moved by `offset` in camera space.
/// The pose is the one [`synth_sample`] draws for the same index.
pub fn synth_sample_shifted(cfg: &SynthConfig, index: u64, offset: Point3) -> Result<SynthSample> {
    let keep = joint_subset(cfg.joints)?;
    cfg.intrinsics.validate()?;
    let mut rng = rng::stream(cfg.seed, index);
    loop {
        let pose = sample_pose(cfg, &mut rng);
        let frame = render(cfg, &pose, &mut rng);
        if !joints_visible(&frame, &pose.joints) {
            continue;
        }
        let shifted = Pose {
            joints: pose.joints.iter().map(|&j| add(j, offset)).collect(),
            primitives: pose.primitives.iter().map(|p| p.translated(offset)).collect(),
        };
        let frame = render(cfg, &shifted, &mut rng);
        return Ok(SynthSample {
            frame,
            hand_center: shifted.joints[0],
            annotation: HandAnnotation {
                joints: keep.iter().map(|&i| shifted.joints[i]).collect(),
            },
        });
    }
}

/// A lone axis-aligned ellipsoid, rendered without noise. Returns the frame
/// and the number of pixels it covers.
pub fn synth_blob(cfg: &SynthConfig, center: Point3, radii: Point3) -> Result<(DepthFrame, usize)> {
    cfg.intrinsics.validate()?;
    if radii.iter().any(|r| !(*r > 0.0)) || center[2] - radii[2] <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "blob at {center:?} with radii {radii:?}"
        )));
    }
    let pose = Pose {
        joints: vec![center],
        primitives: vec![Primitive::Ellipsoid {
            center,
            axes: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            radii,
        }],
    };
    let quiet = SynthConfig {
        noise_mm: 0.0,
        ..cfg.clone()
    };
    let frame = render(&quiet, &pose, &mut rng::seeded(0));
    let area = frame.depth.iter().filter(|d| **d > 0.0).count();
    Ok((frame, area))
}
