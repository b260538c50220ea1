//! Dataset ingestion: text manifests, depth frame files, the preprocessed
//! sample cache and a procedural hand generator.
//!
//! A manifest is UTF-8 text with `#key=value` header lines followed by one
//! sample per line, `<frame-ref> <3J floats>`:
//!
//! ```text
//! #name=icvl-test
//! #joints=16
//! #fx=241.42
//! #fy=241.42
//! #cx=160
//! #cy=120
//! #split=test
//! #coords=world
//! #exclude=frames/000013.png
//! frames/000000.png -12.1 30.5 402.0 ...
//! ```
//!
//! Frame references are resolved against the manifest's directory. Labels
//! are camera-frame millimeters; `coords=image` declares `(u, v, depth)`
//! triples instead, which are back-projected while loading.

mod cache;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::preprocess::{self, CameraIntrinsics, CropResult, DepthFrame, HandAnnotation, PreprocessConfig};
use crate::rng;

pub use cache::{
    build_cache, build_samples, encode_cache, BuildReport, FramePolicy, SampleCache, CACHE_MAGIC, CACHE_VERSION,
};
pub use synth::{
    joint_subset, synth_blob, synth_generate, synth_sample, synth_sample_shifted, SynthConfig, SynthSample,
    JOINT_NAMES, MAX_JOINTS, MIN_JOINTS, SURFACE_OFFSET_BOUND_MM,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!(
                "unknown split '{s}', expected train or test"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub frame: String,
    /// World coordinates, mm, `x1 y1 z1 x2 ...`.
    pub joints: Vec<f64>,
}

impl ManifestEntry {
    pub fn annotation(&self) -> HandAnnotation {
        HandAnnotation::from_flat(&self.joints).expect("entries hold 3J values")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub joints: usize,
    pub intrinsics: CameraIntrinsics,
    pub split: Option<Split>,
    /// Frame references dropped while loading.
    pub exclude: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative frame references are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frame_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.frame)
    }

    /// Serializes with world-coordinate labels. Loading the result gives
    /// back an equal manifest (up to `base_dir`).
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let k = &self.intrinsics;
        let mut s = String::new();
        let _ = writeln!(s, "#name={}", self.name);
        let _ = writeln!(s, "#joints={}", self.joints);
        let _ = writeln!(s, "#fx={}\n#fy={}\n#cx={}\n#cy={}", k.fx, k.fy, k.cx, k.cy);
        if let Some(split) = self.split {
            let _ = writeln!(s, "#split={split}");
        }
        let _ = writeln!(s, "#coords=world");
        for e in &self.exclude {
            let _ = writeln!(s, "#exclude={e}");
        }
        for e in &self.entries {
            s.push_str(&e.frame);
            for v in &e.joints {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Coords {
    World,
    Image,
}

struct Header {
    name: Option<String>,
    joints: Option<usize>,
    fx: Option<f64>,
    fy: Option<f64>,
    cx: Option<f64>,
    cy: Option<f64>,
    split: Option<Split>,
    coords: Coords,
    exclude: Vec<String>,
}

impl Header {
    fn empty() -> Self {
        Header {
            name: None,
            joints: None,
            fx: None,
            fy: None,
            cx: None,
            cy: None,
            split: None,
            coords: Coords::World,
            exclude: Vec::new(),
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_manifest_text(text: &str, path: &Path, mut header: Header) -> Result<DatasetManifest> {
    let mut rows: Vec<(usize, String, Vec<f64>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(kv) = line.strip_prefix('#') {
            let Some((key, value)) = kv.split_once('=') else {
                // plain comment
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| parse_err(path, line_no, format!("'{key}' needs a number, got '{v}'")))
            };
            match key {
                "name" => header.name = Some(value.to_string()),
                "joints" => {
                    header.joints =
                        Some(value.parse().map_err(|_| {
                            parse_err(path, line_no, format!("joint count '{value}' is not an integer"))
                        })?)
                }
                "fx" => header.fx = Some(num(value)?),
                "fy" => header.fy = Some(num(value)?),
                "cx" => header.cx = Some(num(value)?),
                "cy" => header.cy = Some(num(value)?),
                "split" => {
                    header.split = Some(
                        value
                            .parse()
                            .map_err(|e: Error| parse_err(path, line_no, e.to_string()))?,
                    )
                }
                "coords" => {
                    header.coords = match value {
                        "world" => Coords::World,
                        "image" => Coords::Image,
                        _ => {
                            return Err(parse_err(
                                path,
                                line_no,
                                format!("coords must be world or image, got '{value}'"),
                            ))
                        }
                    }
                }
                "exclude" => header.exclude.extend(
                    value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from),
                ),
                _ => return Err(parse_err(path, line_no, format!("unknown header key '{key}'"))),
            }
            continue;
        }
        let mut fields = line.split_whitespace();
        let frame = fields.next().expect("line is not blank").to_string();
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| parse_err(path, line_no, format!("'{f}' is not a finite number")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((line_no, frame, values));
    }

    if rows.is_empty() {
        return Err(parse_err(path, 0, "manifest has no samples"));
    }
    let joints = match header.joints {
        Some(j) => j,
        None => {
            let n = rows[0].2.len();
            if !n.is_multiple_of(3) {
                return Err(parse_err(
                    path,
                    rows[0].0,
                    format!("{n} label values is not a multiple of 3"),
                ));
            }
            n / 3
        }
    };
    if joints == 0 {
        return Err(parse_err(path, 0, "joint count must be positive"));
    }
    let missing = |k: &str| parse_err(path, 0, format!("missing header '#{k}='"));
    let intrinsics = CameraIntrinsics {
        fx: header.fx.ok_or_else(|| missing("fx"))?,
        fy: header.fy.ok_or_else(|| missing("fy"))?,
        cx: header.cx.ok_or_else(|| missing("cx"))?,
        cy: header.cy.ok_or_else(|| missing("cy"))?,
    };
    intrinsics.validate().map_err(|e| parse_err(path, 0, e.to_string()))?;

    let excluded: HashSet<&str> = header.exclude.iter().map(String::as_str).collect();
    let mut entries = Vec::with_capacity(rows.len());
    for (line_no, frame, mut values) in rows {
        if values.len() != 3 * joints {
            return Err(parse_err(
                path,
                line_no,
                format!(
                    "expected {} label values for {joints} joints, found {}",
                    3 * joints,
                    values.len()
                ),
            ));
        }
        if excluded.contains(frame.as_str()) {
            continue;
        }
        if header.coords == Coords::Image {
            for c in values.chunks_exact_mut(3) {
                let p = intrinsics
                    .image_to_world(c[0], c[1], c[2])
                    .map_err(|e| parse_err(path, line_no, e.to_string()))?;
                c.copy_from_slice(&p);
            }
        }
        entries.push(ManifestEntry { frame, joints: values });
    }
    if entries.is_empty() {
        return Err(parse_err(path, 0, "every sample is excluded"));
    }

    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = header.name.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    Ok(DatasetManifest {
        name,
        joints,
        intrinsics,
        split: header.split,
        exclude: header.exclude,
        entries,
        base_dir,
    })
}

pub fn parse_manifest(text: &str, path: impl AsRef<Path>) -> Result<DatasetManifest> {
    parse_manifest_text(text, path.as_ref(), Header::empty())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

/// Reads an ICVL-style label file: one `<image path> <u v d ...>` line per
/// frame, labels in image coordinates, no header. Intrinsics come from the
/// caller because the format does not carry them.
pub fn load_icvl_labels(path: impl AsRef<Path>, intrinsics: CameraIntrinsics) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = Header {
        fx: Some(intrinsics.fx),
        fy: Some(intrinsics.fy),
        cx: Some(intrinsics.cx),
        cy: Some(intrinsics.cy),
        coords: Coords::Image,
        ..Header::empty()
    };
    parse_manifest_text(&text, path, header)
}

/// Shuffles the entries with `seed` and cuts them into consecutive parts of
/// the given fractions. The first part is tagged `train`, the others `test`.
pub fn split(manifest: &DatasetManifest, fractions: &[f64], seed: u64) -> Result<Vec<DatasetManifest>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let n = manifest.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    let mut cum = 0.0;
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() {
            n
        } else {
            ((cum * n as f64).round() as usize).clamp(start, n)
        };
        parts.push(DatasetManifest {
            split: Some(if i == 0 { Split::Train } else { Split::Test }),
            entries: order[start..end].iter().map(|&k| manifest.entries[k].clone()).collect(),
            ..manifest.clone()
        });
        start = end;
    }
    Ok(parts)
}

/// Reads a 16-bit grayscale PNG holding depth in millimeters.
pub fn load_depth_png(path: impl AsRef<Path>, intrinsics: CameraIntrinsics) -> Result<DepthFrame> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(bad(format!(
            "expected 16-bit grayscale depth, found {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let depth = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32)
        .collect();
    DepthFrame::new(info.width as usize, info.height as usize, depth, intrinsics)
}

/// Writes depth rounded to whole millimeters as a 16-bit grayscale PNG.
pub fn save_depth_png(path: impl AsRef<Path>, frame: &DepthFrame) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), frame.width as u32, frame.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let bytes: Vec<u8> = frame
        .depth
        .iter()
        .flat_map(|d| (d.round().clamp(0.0, u16::MAX as f32) as u16).to_be_bytes())
        .collect();
    let to_err = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut w = enc.write_header().map_err(to_err)?;
    w.write_image_data(&bytes).map_err(to_err)?;
    w.finish().map_err(to_err)
}

/// Renders `count` synthetic frames into `dir/frames/` and writes
/// `dir/manifest.txt`.
pub fn write_synthetic_dataset(dir: impl AsRef<Path>, cfg: &SynthConfig, count: usize) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let frames = dir.join("frames");
    std::fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    let mut entries = Vec::with_capacity(count);
    for (i, s) in synth_generate(cfg, count)?.into_iter().enumerate() {
        let frame = format!("frames/{i:06}.png");
        save_depth_png(dir.join(&frame), &s.frame)?;
        entries.push(ManifestEntry {
            frame,
            joints: s.annotation.flat(),
        });
    }
    let manifest = DatasetManifest {
        name: format!("synthetic-{}", cfg.seed),
        joints: cfg.joints,
        intrinsics: cfg.intrinsics,
        split: None,
        exclude: Vec::new(),
        entries,
        base_dir: dir.to_path_buf(),
    };
    manifest.save(dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// A preprocessed training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub crop: CropResult,
    /// Normalized joint coordinates, `3J` values.
    pub labels: Vec<f32>,
}

impl Sample {
    pub fn from_frame(frame: &DepthFrame, annotation: &HandAnnotation, cfg: &PreprocessConfig) -> Result<Self> {
        let crop = preprocess::preprocess_frame(frame, cfg)?;
        let labels = preprocess::normalize_joints(annotation, &crop)
            .values
            .into_iter()
            .map(|v| v as f32)
            .collect();
        Ok(Sample { crop, labels })
    }

    pub fn joints(&self) -> usize {
        self.labels.len() / 3
    }

    /// Labels mapped back to camera-frame millimeters.
    pub fn ground_truth(&self) -> HandAnnotation {
        preprocess::denormalize_joints(&self.labels, &self.crop)
    }
}

/// Renders and preprocesses `count` synthetic samples.
pub fn synthetic_samples(cfg: &SynthConfig, count: usize, pre: &PreprocessConfig) -> Result<Vec<Sample>> {
    synthetic_samples_from(cfg, 0, count, pre)
}

/// Like [`synthetic_samples`] but starting at stream index `first`, so
/// disjoint ranges of one seed give independent train and test sets.
pub fn synthetic_samples_from(
    cfg: &SynthConfig,
    first: u64,
    count: usize,
    pre: &PreprocessConfig,
) -> Result<Vec<Sample>> {
    (first..first + count as u64)
        .map(|i| {
            let s = synth_sample(cfg, i)?;
            Sample::from_frame(&s.frame, &s.annotation, pre)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(j: usize) -> String {
        format!("#name=t\n#joints={j}\n#fx=241.42\n#fy=241.42\n#cx=160\n#cy=120\n")
    }

    fn line(frame: &str, n: usize) -> String {
        let vals: Vec<String> = (0..n).map(|i| format!("{}", i as f64 + 0.5)).collect();
        format!("{frame} {}\n", vals.join(" "))
    }

    #[test]
    fn two_line_manifest() {
        let text = header(16) + &line("a.png", 48) + &line("b.png", 48);
        let m = parse_manifest(&text, "/d/m.txt").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.joints, 16);
        assert_eq!(m.frame_path(&m.entries[1]), PathBuf::from("/d/b.png"));
        let again = parse_manifest(&m.to_text(), "/d/m.txt").unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn malformed_lines_are_located() {
        assert!(matches!(parse_manifest("", "m.txt"), Err(Error::Parse { .. })));
        let text = header(16) + &line("a.png", 48) + &line("b.png", 47);
        match parse_manifest(&text, "m.txt") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 8);
                assert!(msg.contains("48"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let text = header(16) + "a.png 1 2 x\n";
        assert!(matches!(
            parse_manifest(&text, "m.txt"),
            Err(Error::Parse { line: 7, .. })
        ));
        assert!(parse_manifest(&(header(16) + "#colour=red\n" + &line("a", 48)), "m").is_err());
        assert!(parse_manifest(&line("a", 48), "m").is_err(), "intrinsics are required");
    }

    #[test]
    fn inconsistent_joint_count_without_header() {
        let text = "#fx=1\n#fy=1\n#cx=0\n#cy=0\n".to_string() + &line("a", 42) + &line("b", 48);
        assert!(matches!(parse_manifest(&text, "m"), Err(Error::Parse { line: 6, .. })));
    }

    #[test]
    fn exclusion_and_image_coords() {
        let text = header(1) + "#coords=image\n#exclude=b\na 160 120 400\nb 0 0 1\n";
        let m = parse_manifest(&text, "m").unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.entries[0].joints, vec![0.0, 0.0, 400.0]);
        assert_eq!(m.exclude, vec!["b".to_string()]);
    }

    #[test]
    fn split_partitions() {
        let text = header(1) + &(0..100).map(|i| line(&format!("f{i}"), 3)).collect::<String>();
        let m = parse_manifest(&text, "m").unwrap();
        let parts = split(&m, &[0.8, 0.2], 7).unwrap();
        assert_eq!((parts[0].len(), parts[1].len()), (80, 20));
        assert_eq!(parts[0].split, Some(Split::Train));
        let mut all: Vec<_> = parts
            .iter()
            .flat_map(|p| p.entries.iter().map(|e| e.frame.clone()))
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
        assert_eq!(split(&m, &[0.8, 0.2], 7).unwrap(), parts);
        assert_ne!(split(&m, &[0.8, 0.2], 8).unwrap(), parts);
        let whole = split(&m, &[1.0, 0.0], 1).unwrap();
        assert_eq!((whole[0].len(), whole[1].len()), (100, 0));
        assert!(split(&m, &[0.5, 0.4], 1).is_err());
    }
}
