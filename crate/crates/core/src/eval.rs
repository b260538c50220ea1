//! Accuracy metrics, success curves, forward-pass timing and method
//! comparison tables.
//!
//! Mean error is computed per joint first (average distance over frames)
//! and then averaged over joints. A frame counts as a success at threshold
//! `t` when every joint error is strictly below `t`.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::preprocess::{CropResult, HandAnnotation};
use crate::tensor::Tensor;
use crate::train::{patch_batch, Predictor};

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_pairs(preds: &[HandAnnotation], gts: &[HandAnnotation]) -> Result<usize> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "eval",
            format!("{} predictions for {} frames", preds.len(), gts.len()),
        ));
    }
    let j = gts.first().map_or(0, HandAnnotation::len);
    if let Some((k, _)) = preds
        .iter()
        .zip(gts)
        .enumerate()
        .find(|(_, (p, g))| p.len() != j || g.len() != j)
    {
        return Err(Error::shape(
            "eval",
            format!("frame {k} does not have {j} joints in both sets"),
        ));
    }
    Ok(j)
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointErrors {
    /// Mean distance per joint over all frames, mm.
    pub per_joint: Vec<f64>,
    /// Mean of `per_joint`.
    pub mean: f64,
}

pub fn mean_joint_error(preds: &[HandAnnotation], gts: &[HandAnnotation]) -> Result<JointErrors> {
    let j = check_pairs(preds, gts)?;
    if gts.is_empty() || j == 0 {
        return Err(Error::InvalidArgument("no frames to evaluate".into()));
    }
    let mut per_joint = vec![0.0; j];
    for (p, g) in preds.iter().zip(gts) {
        for (acc, (a, b)) in per_joint.iter_mut().zip(p.joints.iter().zip(&g.joints)) {
            *acc += distance(*a, *b);
        }
    }
    let frames = gts.len() as f64;
    per_joint.iter_mut().for_each(|v| *v /= frames);
    let mean = per_joint.iter().sum::<f64>() / j as f64;
    Ok(JointErrors { per_joint, mean })
}

/// Largest joint error of each frame.
pub fn frame_max_errors(preds: &[HandAnnotation], gts: &[HandAnnotation]) -> Result<Vec<f64>> {
    check_pairs(preds, gts)?;
    Ok(preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            p.joints
                .iter()
                .zip(&g.joints)
                .map(|(a, b)| distance(*a, *b))
                .fold(0.0, f64::max)
        })
        .collect())
}

/// A zero threshold is read as its limit from above, so only perfect frames
/// count there.
fn fraction_below(max_errors: &[f64], threshold: f64) -> f64 {
    if max_errors.is_empty() {
        return 0.0;
    }
    let hit = |e: f64| e < threshold || (threshold == 0.0 && e == 0.0);
    max_errors.iter().filter(|&&e| hit(e)).count() as f64 / max_errors.len() as f64
}

/// Fraction of frames whose worst joint error is below `threshold` mm.
pub fn success_rate(preds: &[HandAnnotation], gts: &[HandAnnotation], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} must be positive"
        )));
    }
    Ok(fraction_below(&frame_max_errors(preds, gts)?, threshold))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold_mm: f64,
    pub fraction: f64,
}

/// 0 to 80 mm in 1 mm steps.
pub fn default_thresholds() -> Vec<f64> {
    (0..=80).map(f64::from).collect()
}

pub fn success_curve(preds: &[HandAnnotation], gts: &[HandAnnotation], thresholds: &[f64]) -> Result<Vec<CurvePoint>> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::InvalidArgument("thresholds must be sorted".into()));
    }
    let max_errors = frame_max_errors(preds, gts)?;
    Ok(thresholds
        .iter()
        .map(|&t| CurvePoint {
            threshold_mm: t,
            fraction: fraction_below(&max_errors, t),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub batch: usize,
    pub reps: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

/// Summary of per-repetition wall-clock times in milliseconds.
pub fn timing_stats(batch: usize, samples_ms: &[f64]) -> Result<TimingStats> {
    if samples_ms.is_empty() {
        return Err(Error::InvalidArgument("no timing samples".into()));
    }
    let mut sorted = samples_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    // nearest-rank percentiles
    let rank = |p: f64| sorted[((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
    Ok(TimingStats {
        batch,
        reps: sorted.len(),
        mean_ms: sorted.iter().sum::<f64>() / sorted.len() as f64,
        p50_ms: rank(0.5),
        p95_ms: rank(0.95),
    })
}

/// Times `reps` inference passes over a constant batch after `warmup`
/// untimed ones.
pub fn benchmark_forward(model: &dyn Predictor, batch: usize, warmup: usize, reps: usize) -> Result<TimingStats> {
    if reps < 10 || batch == 0 {
        return Err(Error::InvalidArgument(format!(
            "benchmark needs reps >= 10 and batch >= 1, got {reps}, {batch}"
        )));
    }
    let s = model.input_size();
    let patches = Tensor::from_fn([batch, 1, s, s], |i| (((i * 7919) % 200) as f32 / 100.0) - 1.0);
    for _ in 0..warmup {
        model.forward_batch(&patches)?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        model.forward_batch(&patches)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    timing_stats(batch, &times)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub frame_count: usize,
    pub per_joint_error_mm: Vec<f64>,
    pub mean_error_mm: f64,
    pub success_curve: Vec<CurvePoint>,
    pub timing: Option<TimingStats>,
}

impl EvalReport {
    pub fn from_predictions(
        method: impl Into<String>,
        preds: &[HandAnnotation],
        gts: &[HandAnnotation],
    ) -> Result<Self> {
        let errors = mean_joint_error(preds, gts)?;
        Ok(EvalReport {
            method: method.into(),
            frame_count: gts.len(),
            per_joint_error_mm: errors.per_joint,
            mean_error_mm: errors.mean,
            success_curve: success_curve(preds, gts, &default_thresholds())?,
            timing: None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))
    }

    /// `threshold_mm,fraction` rows.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("threshold_mm,fraction\n");
        for p in &self.success_curve {
            let _ = writeln!(s, "{},{}", p.threshold_mm, p.fraction);
        }
        s
    }
}

/// Predictions for every sample together with the ground truth.
pub fn predict_samples(
    model: &dyn Predictor,
    samples: &[Sample],
) -> Result<(Vec<HandAnnotation>, Vec<HandAnnotation>)> {
    let crops: Vec<&CropResult> = samples.iter().map(|s| &s.crop).collect();
    if let Some(s) = samples.iter().find(|s| s.joints() != model.joints()) {
        return Err(Error::shape(
            "evaluate",
            format!("samples have {} joints, model predicts {}", s.joints(), model.joints()),
        ));
    }
    let preds = model.predict_world(&crops)?;
    Ok((preds, samples.iter().map(Sample::ground_truth).collect()))
}

pub fn evaluate(method: impl Into<String>, model: &dyn Predictor, samples: &[Sample]) -> Result<EvalReport> {
    let (preds, gts) = predict_samples(model, samples)?;
    EvalReport::from_predictions(method, &preds, &gts)
}

/// Percent change of `value` relative to `baseline` (positive when lower),
/// truncated toward zero at two decimals.
pub fn relative_improvement(baseline: f64, value: f64) -> f64 {
    let pct = (baseline - value) / baseline * 100.0;
    // the nudge keeps values like 7.77 from printing as 7.76
    (pct * 100.0 + pct.signum() * 1e-9).trunc() / 100.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub mean_error_mm: f64,
    /// Against the first row; `None` for the first row itself.
    pub improvement_pct: Option<f64>,
    pub timing: Option<TimingStats>,
}

/// Reports in the order given; the first one is the baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

pub fn compare_report(reports: &[EvalReport]) -> Result<ComparisonTable> {
    let Some(base) = reports.first() else {
        return Err(Error::InvalidArgument("nothing to compare".into()));
    };
    Ok(ComparisonTable {
        rows: reports
            .iter()
            .enumerate()
            .map(|(i, r)| ComparisonRow {
                method: r.method.clone(),
                mean_error_mm: r.mean_error_mm,
                improvement_pct: (i > 0).then(|| relative_improvement(base.mean_error_mm, r.mean_error_mm)),
                timing: r.timing,
            })
            .collect(),
    })
}

fn fmt_pct(p: Option<f64>) -> String {
    p.map_or_else(|| "-".into(), |p| format!("{p:.2}%"))
}

fn fmt_ms(t: Option<TimingStats>) -> String {
    t.map_or_else(|| "-".into(), |t| format!("{:.2}", t.mean_ms))
}

impl ComparisonTable {
    /// Plain-text table with aligned columns.
    pub fn to_text(&self) -> String {
        let header = ["method", "mean error (mm)", "improvement", "forward (ms)"];
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    format!("{:.2}", r.mean_error_mm),
                    fmt_pct(r.improvement_pct),
                    fmt_ms(r.timing),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = String::new();
        let line = |s: &mut String, row: [&str; 4]| {
            let _ = writeln!(
                s,
                "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}",
                row[0],
                row[1],
                row[2],
                row[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
        };
        line(&mut s, header);
        for row in &cells {
            line(&mut s, [&row[0], &row[1], &row[2], &row[3]]);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,mean_error_mm,improvement_pct,forward_ms\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.method,
                r.mean_error_mm,
                r.improvement_pct.map_or(String::new(), |p| format!("{p:.2}")),
                r.timing.map_or(String::new(), |t| t.mean_ms.to_string())
            );
        }
        s
    }
}

const SVG_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Success curves as an SVG line chart, threshold 0 to 80 mm against
/// fraction of frames.
pub fn curves_svg(reports: &[EvalReport]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let x = |t: f64| m + t.clamp(0.0, 80.0) / 80.0 * (w - 2.0 * m);
    let y = |f: f64| h - m - f.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    s.push('\n');
    let _ = writeln!(
        s,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#,
        x0 = x(0.0),
        x1 = x(80.0),
        y0 = y(0.0),
        y1 = y(1.0)
    );
    for t in (0..=80).step_by(10) {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{t}</text>"#,
            x(t as f64),
            y(0.0) + 16.0
        );
    }
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{:.0}%</text>"#,
            x(0.0) - 6.0,
            y(f) + 4.0,
            f * 100.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">threshold (mm)</text>"#,
        w / 2.0,
        h - 8.0
    );
    for (i, r) in reports.iter().enumerate() {
        let color = SVG_COLORS[i % SVG_COLORS.len()];
        let points: Vec<String> = r
            .success_curve
            .iter()
            .map(|p| format!("{:.1},{:.1}", x(p.threshold_mm), y(p.fraction)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            x(48.0),
            y(0.3) - 14.0 * i as f64,
            xml_escape(&r.method)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<method>.json`, `<method>_curve.csv` and, when asked, the SVG.
pub fn write_report_files(dir: impl AsRef<Path>, report: &EvalReport, svg: bool) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem: String = report
        .method
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    let write = |name: String, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write(format!("{stem}.json"), report.to_json())?;
    write(format!("{stem}_curve.csv"), report.curve_csv())?;
    if svg {
        write(format!("{stem}_curve.svg"), curves_svg(std::slice::from_ref(report)))?;
    }
    Ok(())
}

/// Patches of `samples` as one inference batch.
pub fn sample_batch(samples: &[Sample]) -> Result<Tensor<f32>> {
    let crops: Vec<&CropResult> = samples.iter().map(|s| &s.crop).collect();
    patch_batch(&crops)
}
