//! Preprocessed sample cache.
//!
//! ```text
//! "RENC"  u32 version  u64 record count
//! per record: 96*96 f32 patch, 3J f32 labels,
//!             7 f32 transform (centroid x y z, cube size, rotation, scale, reserved)
//! ```
//!
//! Little-endian throughout. The joint count is not stored; it follows from
//! the file length and the record count.

use std::path::Path;

use crate::error::{Error, Result};
use crate::preprocess::{CropResult, PreprocessConfig};

use super::{load_depth_png, DatasetManifest, Sample};

pub const CACHE_MAGIC: &[u8; 4] = b"RENC";
pub const CACHE_VERSION: u32 = 1;
pub const CACHE_PATCH: usize = 96;
const HEADER_BYTES: usize = 16;
const TRANSFORM_FLOATS: usize = 7;

/// What to do with a frame that cannot be read or preprocessed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FramePolicy {
    #[default]
    Fatal,
    Skip,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuildReport {
    pub written: usize,
    /// Frame reference and reason for every skipped entry.
    pub skipped: Vec<(String, String)>,
    /// The output file already held exactly these bytes.
    pub unchanged: bool,
}

fn record_floats(joints: usize) -> usize {
    CACHE_PATCH * CACHE_PATCH + 3 * joints + TRANSFORM_FLOATS
}

/// Loads and preprocesses every manifest entry.
pub fn build_samples(
    manifest: &DatasetManifest,
    cfg: &PreprocessConfig,
    policy: FramePolicy,
) -> Result<(Vec<Sample>, BuildReport)> {
    let mut samples = Vec::with_capacity(manifest.len());
    let mut report = BuildReport::default();
    for entry in &manifest.entries {
        let path = manifest.frame_path(entry);
        let sample = load_depth_png(&path, manifest.intrinsics)
            .and_then(|frame| Sample::from_frame(&frame, &entry.annotation(), cfg));
        match (sample, policy) {
            (Ok(s), _) => samples.push(s),
            (Err(e), FramePolicy::Skip) => report.skipped.push((entry.frame.clone(), e.to_string())),
            (Err(e), FramePolicy::Fatal) => {
                return Err(Error::InvalidArgument(format!("frame {}: {e}", path.display())));
            }
        }
    }
    report.written = samples.len();
    Ok((samples, report))
}

pub fn encode_cache(samples: &[Sample]) -> Result<Vec<u8>> {
    let joints = samples.first().map_or(0, Sample::joints);
    let mut out = Vec::with_capacity(HEADER_BYTES + samples.len() * record_floats(joints) * 4);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        if s.crop.size != CACHE_PATCH || s.crop.patch.len() != CACHE_PATCH * CACHE_PATCH {
            return Err(Error::InvalidArgument(format!(
                "cache records hold {CACHE_PATCH}x{CACHE_PATCH} patches, got size {}",
                s.crop.size
            )));
        }
        if s.labels.len() != 3 * joints {
            return Err(Error::shape(
                "encode_cache",
                format!("{} labels, expected {}", s.labels.len(), 3 * joints),
            ));
        }
        let c = &s.crop;
        let transform = [
            c.centroid[0] as f32,
            c.centroid[1] as f32,
            c.centroid[2] as f32,
            c.cube_size as f32,
            c.rotation_deg as f32,
            c.scale as f32,
            0.0,
        ];
        for v in c.patch.iter().chain(&s.labels).chain(&transform) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Preprocesses the manifest into a cache file at `out`.
pub fn build_cache(
    manifest: &DatasetManifest,
    cfg: &PreprocessConfig,
    policy: FramePolicy,
    out: impl AsRef<Path>,
) -> Result<BuildReport> {
    let out = out.as_ref();
    if cfg.patch_size != CACHE_PATCH {
        return Err(Error::InvalidArgument(format!(
            "cache patch size is fixed at {CACHE_PATCH}"
        )));
    }
    let (samples, mut report) = build_samples(manifest, cfg, policy)?;
    let bytes = encode_cache(&samples)?;
    report.unchanged = std::fs::read(out).is_ok_and(|old| old == bytes);
    if !report.unchanged {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(out, &bytes).map_err(|e| Error::io(out, e))?;
    }
    Ok(report)
}

/// Read-only view of a cache file. Records are decoded on demand, so
/// concurrent readers can share one instance.
#[derive(Clone, Debug)]
pub struct SampleCache {
    bytes: Vec<u8>,
    count: usize,
    joints: usize,
}

impl SampleCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < HEADER_BYTES || &bytes[..4] != CACHE_MAGIC {
            return Err(Error::Format("not a sample cache".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(Error::Format(format!("unsupported cache version {version}")));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.len() - HEADER_BYTES;
        let joints = match body.checked_div(count) {
            None if body != 0 => return Err(Error::Format("empty cache with trailing bytes".into())),
            None => 0,
            Some(per) => {
                let fixed = (CACHE_PATCH * CACHE_PATCH + TRANSFORM_FLOATS) * 4;
                if !body.is_multiple_of(count) || per < fixed || !(per - fixed).is_multiple_of(12) || per == fixed {
                    return Err(Error::Format(format!("{body} body bytes do not form {count} records")));
                }
                (per - fixed) / 12
            }
        };
        Ok(SampleCache { bytes, count, joints })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn get(&self, index: usize) -> Result<Sample> {
        if index >= self.count {
            return Err(Error::InvalidArgument(format!("record {index} of {}", self.count)));
        }
        let floats = record_floats(self.joints);
        let start = HEADER_BYTES + index * floats * 4;
        let values: Vec<f32> = self.bytes[start..start + floats * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let np = CACHE_PATCH * CACHE_PATCH;
        let t = &values[np + 3 * self.joints..];
        Ok(Sample {
            crop: CropResult {
                patch: values[..np].to_vec(),
                size: CACHE_PATCH,
                centroid: [t[0] as f64, t[1] as f64, t[2] as f64],
                cube_size: t[3] as f64,
                rotation_deg: t[4] as f64,
                scale: t[5] as f64,
            },
            labels: values[np..np + 3 * self.joints].to_vec(),
        })
    }

    pub fn samples(&self) -> Result<Vec<Sample>> {
        (0..self.count).map(|i| self.get(i)).collect()
    }
}
