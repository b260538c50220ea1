//! End-to-end acceptance suite. Every criterion runs in one test so the
//! timing measurements do not compete with other tests for the CPU. Each
//! prints a single PASS/FAIL line on stderr.

// the oracles are plain index loops on purpose
#![allow(clippy::needless_range_loop, clippy::type_complexity)]

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ren::data::{
    build_cache, synthetic_samples, synthetic_samples_from, write_synthetic_dataset, FramePolicy, Sample, SynthConfig,
};
use ren::eval::{self, EvalReport};
use ren::gradcheck::{grad_check, GradCheckOptions};
use ren::kernels::{conv2d_backward, conv2d_forward, ConvGeometry};
use ren::model::{receptive_field, Model, ModelSpec, Variant};
use ren::preprocess::{denormalize_joints, normalize_joints, CropResult, HandAnnotation, PreprocessConfig};
use ren::rng::{self, RngExt};
use ren::train::{lr_schedule, train_until, BaggingEnsemble, Predictor, TrainConfig, TrainControl, TrainState};
use ren::{Graph, NodeId, ParamSet, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_tensor(shape: &[usize], r: &mut rng::Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

// ---------------------------------------------------------------- 1

fn layer_check(
    name: &str,
    params: &[(&str, &[usize])],
    seed: u64,
    build: impl Fn(&mut Graph<'_, f64>) -> ren::Result<NodeId>,
) -> (String, f64) {
    let mut r = rng::seeded(seed);
    let mut set = ParamSet::<f64>::new();
    for (n, shape) in params {
        set.add(*n, random_tensor(shape, &mut r)).unwrap();
    }
    let report = grad_check(&set, build, &GradCheckOptions::default()).unwrap();
    (name.to_string(), report.max_rel_error)
}

/// Weighted sum with fixed pseudo-random coefficients, so every output
/// entry gets a distinct upstream gradient.
fn probe_loss(g: &mut Graph<'_, f64>, y: NodeId) -> ren::Result<NodeId> {
    let flat = g.flatten(y)?;
    let d = g.shape(flat)[1];
    let w = g.input(Tensor::from_fn([d, 1], |i| ((i * 37 % 11) as f64 - 5.0) / 7.0))?;
    let b = g.input(Tensor::zeros([1]))?;
    let out = g.linear(flat, w, b)?;
    g.sum(out)
}

fn criterion_1() -> Outcome {
    let p = |g: &mut Graph<'_, f64>, n: &str| g.param_named(n);
    let mut results = vec![
        layer_check("linear", &[("x", &[3, 5]), ("w", &[5, 4]), ("b", &[4])], 1, |g| {
            let (x, w, b) = (p(g, "x")?, p(g, "w")?, p(g, "b")?);
            let y = g.linear(x, w, b)?;
            probe_loss(g, y)
        }),
        layer_check(
            "conv3x3",
            &[("x", &[2, 2, 5, 6]), ("w", &[3, 2, 3, 3]), ("b", &[3])],
            2,
            |g| {
                let (x, w, b) = (p(g, "x")?, p(g, "w")?, p(g, "b")?);
                let y = g.conv2d(x, w, b, 1, 1)?;
                probe_loss(g, y)
            },
        ),
        layer_check(
            "conv1x1",
            &[("x", &[2, 3, 4, 4]), ("w", &[2, 3, 1, 1]), ("b", &[2])],
            3,
            |g| {
                let (x, w, b) = (p(g, "x")?, p(g, "w")?, p(g, "b")?);
                let y = g.conv2d(x, w, b, 1, 0)?;
                probe_loss(g, y)
            },
        ),
        layer_check(
            "conv stride 2",
            &[("x", &[1, 2, 7, 9]), ("w", &[2, 2, 3, 3]), ("b", &[2])],
            4,
            |g| {
                let (x, w, b) = (p(g, "x")?, p(g, "w")?, p(g, "b")?);
                let y = g.conv2d(x, w, b, 2, 0)?;
                probe_loss(g, y)
            },
        ),
        layer_check("maxpool", &[("x", &[2, 2, 4, 6])], 5, |g| {
            let x = p(g, "x")?;
            let y = g.maxpool2(x)?;
            probe_loss(g, y)
        }),
        layer_check("relu", &[("x", &[3, 7])], 6, |g| {
            let x = p(g, "x")?;
            let y = g.relu(x)?;
            probe_loss(g, y)
        }),
        layer_check("add", &[("x", &[2, 5]), ("y", &[2, 5])], 7, |g| {
            let (x, y) = (p(g, "x")?, p(g, "y")?);
            let s = g.add(x, y)?;
            probe_loss(g, s)
        }),
        layer_check("concat", &[("x", &[2, 3]), ("y", &[2, 4])], 8, |g| {
            let (x, y) = (p(g, "x")?, p(g, "y")?);
            let c = g.concat(&[x, y])?;
            probe_loss(g, c)
        }),
        layer_check("mean", &[("x", &[2, 3]), ("y", &[2, 3]), ("z", &[2, 3])], 9, |g| {
            let (x, y, z) = (p(g, "x")?, p(g, "y")?, p(g, "z")?);
            let m = g.mean(&[x, y, z])?;
            probe_loss(g, m)
        }),
        layer_check("tile", &[("x", &[2, 2, 4, 4])], 10, |g| {
            let x = p(g, "x")?;
            let t = g.tile(x, 2, 0, 2, 2)?;
            probe_loss(g, t)
        }),
        layer_check("mse", &[("x", &[3, 4])], 11, |g| {
            let x = p(g, "x")?;
            let t = g.input(Tensor::from_fn([3, 4], |i| i as f64 / 10.0))?;
            g.mse_loss(x, t)
        }),
        layer_check("dropout", &[("x", &[4, 6])], 12, |g| {
            // a fresh generator per evaluation keeps the mask fixed
            let x = p(g, "x")?;
            let mut r = rng::seeded(99);
            let d = g.dropout(x, 0.5, &mut r)?;
            probe_loss(g, d)
        }),
    ];
    // dropout in training mode, checked by hand against central differences
    results.push(("dropout (training)".into(), dropout_training_check()));
    for variant in Variant::ALL {
        let spec = ModelSpec {
            input_size: 16,
            dropout: 0.0,
            ..ModelSpec::new(variant, 2).with_channels([2, 3, 4]).with_fc(5, 6)
        };
        let mut model = Model::<f32>::new(spec, 21).unwrap().cast::<f64>();
        let mut r = rng::seeded(5);
        // zero-initialized biases can put a whole unit exactly on the ReLU corner
        // when every input to it is dead; move the check point off the kinks
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            if model.params().name(id).ends_with("bias") {
                for b in model.params_mut().get_mut(id).data_mut() {
                    *b = r.random_range(0.01..0.1);
                }
            }
        }
        let x = random_tensor(&[2, 1, 16, 16], &mut r);
        let t = random_tensor(&[2, 6], &mut r);
        let report = grad_check(
            model.params(),
            |g| {
                let xi = g.input(x.clone())?;
                let ti = g.input(t.clone())?;
                let mut r = rng::seeded(0);
                let pose = model.forward(g, xi, &mut r)?;
                g.mse_loss(pose, ti)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        results.push((format!("{variant} network"), report.max_rel_error));
    }
    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let linear = results[0].1;
    let summary = results
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        worst < 1e-4 && linear < 1e-6,
        format!("max relative error {worst:.2e} (linear {linear:.2e}); {summary}"),
    )
}

fn dropout_training_check() -> f64 {
    let mut r = rng::seeded(13);
    let x0 = random_tensor(&[3, 5], &mut r);
    let eval = |x: &Tensor<f64>, want_grad: bool| {
        let mut g = Graph::<f64>::new(true);
        let xi = g.leaf(x.clone()).unwrap();
        let mut mask_rng = rng::seeded(77);
        let d = g.dropout(xi, 0.3, &mut mask_rng).unwrap();
        let loss = probe_loss(&mut g, d).unwrap();
        let v = g.value(loss).item().unwrap();
        let grad = if want_grad {
            g.backward(loss).unwrap();
            g.grad(xi).unwrap().to_vec()
        } else {
            Vec::new()
        };
        (v, grad)
    };
    let (_, analytic) = eval(&x0, true);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..x0.numel() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

// ---------------------------------------------------------------- 2

/// Direct summation over the definition of a cross-correlation with zero
/// padding.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    (n, c, h, wd): (usize, usize, usize, usize),
    (oc, k): (usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * oc * oh * ow];
    for ni in 0..n {
        for o in 0..oc {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w[((o * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((ni * oc + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

fn criterion_2() -> Outcome {
    let mut r = rng::seeded(2024);
    let (mut cases, mut worst_fwd, mut worst_bwd) = (0, 0.0f64, 0.0f64);
    while cases < 200 {
        let n = r.random_range(1..=2);
        let c = r.random_range(1..=4);
        let oc = r.random_range(1..=4);
        let k = [1, 2, 3, 5][r.random_range(0..4)];
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=k / 2);
        let h = r.random_range(k.max(2)..=10);
        let wd = r.random_range(k.max(2)..=10);
        let Ok(geom) = ConvGeometry::new(&[n, c, h, wd], &[oc, c, k, k], stride, pad) else {
            continue;
        };
        cases += 1;
        let x: Vec<f64> = (0..n * c * h * wd).map(|_| r.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..oc * c * k * k).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..oc).map(|_| r.random_range(-1.0..1.0)).collect();
        let (want, oh, ow) = naive_conv(&x, &w, &b, (n, c, h, wd), (oc, k), stride, pad);
        assert_eq!([n, oc, oh, ow], geom.output_shape());

        let f32s = |v: &[f64]| v.iter().map(|&a| a as f32).collect::<Vec<f32>>();
        let got = conv2d_forward(&geom, &f32s(&x), &f32s(&w), &f32s(&b));
        for (g, e) in got.iter().zip(&want) {
            worst_fwd = worst_fwd.max((*g as f64 - e).abs());
        }

        // gradients of sum(gy * y) via the same definition
        let gy: Vec<f64> = (0..want.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; b.len()];
        conv2d_backward(&geom, &x, &w, &gy, Some(&mut gx), &mut gw, &mut gb);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            let (y, _, _) = naive_conv(x, w, b, (n, c, h, wd), (oc, k), stride, pad);
            y.iter().zip(&gy).map(|(a, g)| a * g).sum()
        };
        // the loss is linear in each argument, so a unit difference is exact
        let base = loss(&x, &w, &b);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += 1.0;
            worst_bwd = worst_bwd.max((loss(&xp, &w, &b) - base - gx[i]).abs());
        }
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += 1.0;
            worst_bwd = worst_bwd.max((loss(&x, &wp, &b) - base - gw[i]).abs());
        }
        for i in 0..b.len() {
            let mut bp = b.clone();
            bp[i] += 1.0;
            worst_bwd = worst_bwd.max((loss(&x, &w, &bp) - base - gb[i]).abs());
        }
    }
    check(
        worst_fwd < 1e-5 && worst_bwd < 1e-9,
        format!("{cases} cases, forward max abs diff {worst_fwd:.2e}, gradient max abs diff {worst_bwd:.2e}"),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let model = Model::<f32>::new(ModelSpec::new(Variant::RegionEnsemble, 16), 3).unwrap();
    let mut g = model.graph(false);
    let x = g.input(Tensor::zeros([2, 1, 96, 96])).unwrap();
    let nodes = model.forward_nodes(&mut g, x, &mut rng::seeded(0)).unwrap();
    let trunk = g.shape(nodes.features).to_vec();
    let tiles: Vec<Vec<usize>> = nodes.regions.iter().map(|&r| g.shape(r).to_vec()).collect();
    let fused = g.shape(nodes.fused.unwrap()).to_vec();
    let pose = g.shape(nodes.pose).to_vec();
    let ok = trunk == [2, 64, 12, 12]
        && tiles.len() == 4
        && tiles.iter().all(|t| t == &[2, 64, 6, 6])
        && fused == [2, 8192]
        && pose == [2, 48];
    check(
        ok,
        format!(
            "trunk {trunk:?}, {} tiles of {:?}, concat {fused:?}, output {pose:?}",
            tiles.len(),
            tiles[0]
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let spec = ModelSpec::new(Variant::RegionEnsemble, 16);
    let rect = receptive_field(&spec.trunk_layers(), 96, 0..6, 0..6);
    // walk back from a 6-cell span through (conv3, conv3, pool2) x 3:
    // extent e -> (e - 1) * stride + kernel, start s -> s * stride - pad
    let (mut extent, mut start) = (6i64, 0i64);
    for _ in 0..3 {
        for (k, s, p) in [(2, 2, 0), (3, 1, 1), (3, 1, 1)] {
            extent = (extent - 1) * s + k;
            start = start * s - p;
        }
    }
    let (lo, hi) = (start.max(0), (start + extent - 1).min(95));
    let arithmetic_ok =
        rect.height() == 62 && rect.width() == 62 && (lo, hi) == (0, 61) && (rect.top, rect.left) == (0, 0);

    // Positive weights and inputs make every path monotone, so a large bump
    // at a pixel inside the field always reaches the region's features.
    let mut model = Model::<f32>::new(spec, 4).unwrap().cast::<f64>();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let t = model.params_mut().get_mut(id);
        t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.01);
    }
    let region0 = |img: Tensor<f64>| -> Vec<f64> {
        let mut g = model.graph(false);
        let x = g.input(img).unwrap();
        let f = model.trunk(&mut g, x).unwrap();
        let t = g.tile(f, 0, 0, 6, 6).unwrap();
        g.value(t).data().to_vec()
    };
    let base_img = Tensor::full([1, 1, 96, 96], 0.5);
    let base = region0(base_img.clone());
    let mut r = rng::seeded(404);
    let mut probes: Vec<(usize, usize)> = vec![(61, 61), (62, 0), (0, 62), (61, 0)];
    while probes.len() < 28 {
        let inside = probes.len().is_multiple_of(2);
        let (y, x) = if inside {
            (r.random_range(0..62), r.random_range(0..62))
        } else {
            (r.random_range(0..96), r.random_range(62..96))
        };
        probes.push(if r.random_bool(0.5) { (y, x) } else { (x, y) });
    }
    let mut agree = 0;
    for &(y, x) in &probes {
        let mut img = base_img.clone();
        img.data_mut()[y * 96 + x] += 1000.0;
        let changed = region0(img) != base;
        if changed == rect.contains(y, x) {
            agree += 1;
        }
    }
    check(
        arithmetic_ok && agree == probes.len(),
        format!(
            "field rows {}..={} cols {}..={} ({}x{}), independent walk {lo}..={hi}; {agree}/{} perturbation probes agree",
            rect.top,
            rect.bottom,
            rect.left,
            rect.right,
            rect.height(),
            rect.width(),
            probes.len()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
    let fc = |i: usize, o: usize| i * o + o;
    let trunk = conv(1, 16, 3)
        + conv(16, 16, 3)
        + conv(16, 32, 3)
        + conv(32, 32, 3)
        + conv(16, 32, 1)
        + conv(32, 64, 3)
        + conv(64, 64, 3)
        + conv(32, 64, 1);
    let ren_expected = trunk + 4 * (fc(6 * 6 * 64, 2048) + fc(2048, 2048)) + fc(4 * 2048, 48);
    let large_expected = trunk + fc(12 * 12 * 64, 2048) + fc(2048, 8192) + fc(8192, 48);
    let ren = Model::<f32>::new(ModelSpec::new(Variant::RegionEnsemble, 16), 1)
        .unwrap()
        .param_count()
        .total;
    let large = Model::<f32>::new(ModelSpec::new(Variant::BasicLarge, 16), 1)
        .unwrap()
        .param_count()
        .total;
    let gap = (ren as f64 - large as f64).abs() / ren as f64;
    check(
        ren == ren_expected && large == large_expected && gap < 0.05,
        format!("region-ensemble {ren} (closed form {ren_expected}), basic-large {large} (closed form {large_expected}), gap {:.3}%", gap * 100.0),
    )
}

// ---------------------------------------------------------------- 6

fn tiny(variant: Variant) -> ModelSpec {
    ModelSpec::new(variant, 16).with_channels([4, 8, 8]).with_fc(32, 32)
}

fn criterion_6() -> Outcome {
    let model = Model::<f32>::new(tiny(Variant::RegionBagging), 6).unwrap();
    let mut r = rng::seeded(6);
    let x = Tensor::from_fn([3, 1, 96, 96], |_| r.random_range(-1.0f32..1.0));
    let mut g = model.graph(false);
    let xi = g.input(x).unwrap();
    let nodes = model.forward_nodes(&mut g, xi, &mut rng::seeded(0)).unwrap();
    let heads: Vec<&[f32]> = nodes.branch_poses.iter().map(|&b| g.value(b).data()).collect();
    let mut worst_ulps = 0.0f64;
    for (i, &got) in g.value(nodes.pose).data().iter().enumerate() {
        let want = heads.iter().map(|h| h[i] as f64).sum::<f64>() / heads.len() as f64;
        let ulp = (want.abs() as f32).max(f32::MIN_POSITIVE) * f32::EPSILON;
        worst_ulps = worst_ulps.max((got as f64 - want).abs() / ulp as f64);
    }

    let samples = synthetic_samples(&SynthConfig::default(), 5, &PreprocessConfig::default()).unwrap();
    let crops: Vec<&CropResult> = samples.iter().map(|s| &s.crop).collect();
    let members: Vec<Model> = (0..4)
        .map(|k| Model::new(tiny(Variant::Basic), 100 + k).unwrap())
        .collect();
    let per_member: Vec<Vec<HandAnnotation>> = members.iter().map(|m| m.predict_world(&crops).unwrap()).collect();
    let ens = BaggingEnsemble::new(members).unwrap();
    let got = ens.predict_world(&crops).unwrap();
    let mut exact = true;
    for (f, frame) in got.iter().enumerate() {
        for (j, p) in frame.joints.iter().enumerate() {
            for a in 0..3 {
                let mut sum = 0.0f64;
                for m in &per_member {
                    sum += m[f].joints[j][a];
                }
                exact &= p[a] == sum / per_member.len() as f64;
            }
        }
    }
    check(
        worst_ulps <= 1.0 && exact,
        format!("region-bagging output vs head mean: {worst_ulps:.2} ulp; basic-bagging equals member mean exactly: {exact}"),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let cfg = TrainConfig::default();
    let got = [0, 50_000, 199_999].map(|i| lr_schedule(i, &cfg));
    let want = [0.005, 5e-4, 5e-6];
    let ok = got.iter().zip(&want).all(|(g, w)| ((g - w) / w).abs() < 1e-12);
    check(
        ok,
        format!("lr(0) = {}, lr(50000) = {}, lr(199999) = {}", got[0], got[1], got[2]),
    )
}

// ---------------------------------------------------------------- 8

fn mean_error(model: &Model, samples: &[Sample]) -> f64 {
    eval::evaluate("m", model, samples).unwrap().mean_error_mm
}

/// Reduced network and optimizer settings for memorizing a small set.
fn overfit_setup() -> (ModelSpec, TrainConfig) {
    let mut spec = ModelSpec::new(Variant::RegionEnsemble, 16)
        .with_channels([8, 16, 32])
        .with_fc(256, 256);
    spec.dropout = 0.0;
    let cfg = TrainConfig {
        batch_size: 8,
        max_iters: 5000,
        augment: None,
        seed: 8,
        ..TrainConfig::default()
    };
    (spec, cfg)
}

fn criterion_8() -> Outcome {
    let started = Instant::now();
    let samples = synthetic_samples(&SynthConfig::default(), 64, &PreprocessConfig::default()).unwrap();
    let (spec, cfg) = overfit_setup();
    let mut model = Model::new(spec.clone(), ren::train::init_seed(cfg.seed)).unwrap();
    let mut state = TrainState::new(&model);
    let mut err = mean_error(&model, &samples);
    let initial = err;
    while err >= 5.0 && state.iteration < cfg.max_iters {
        let until = state.iteration + 250;
        train_until(
            &mut model,
            &samples,
            &cfg,
            &mut state,
            until,
            &mut TrainControl::default(),
        )
        .unwrap();
        err = mean_error(&model, &samples);
    }
    let iters = state.iteration;

    // a second run from the same seed retraces the first exactly
    let mut again = Model::new(spec, ren::train::init_seed(cfg.seed)).unwrap();
    let mut state2 = TrainState::new(&again);
    train_until(
        &mut again,
        &samples,
        &cfg,
        &mut state2,
        40,
        &mut TrainControl::default(),
    )
    .unwrap();
    let mut replay = Model::new(again.spec().clone(), ren::train::init_seed(cfg.seed)).unwrap();
    let mut state3 = TrainState::new(&replay);
    train_until(
        &mut replay,
        &samples,
        &cfg,
        &mut state3,
        40,
        &mut TrainControl::default(),
    )
    .unwrap();
    let same_log = state2.log == state3.log && state2.log[..] == state.log[..40];
    let same_params = again
        .params()
        .iter()
        .zip(replay.params().iter())
        .all(|((_, a), (_, b))| a.data() == b.data());
    let secs = started.elapsed().as_secs_f64();
    check(
        err < 5.0 && iters <= 5000 && same_log && same_params && secs < 600.0,
        format!(
            "mean error {initial:.1} mm -> {err:.2} mm after {iters} iterations; replay identical: {}; {secs:.0} s",
            same_log && same_params
        ),
    )
}

// ---------------------------------------------------------------- 9

const GENERALIZATION_ITERS: usize = 600;

fn criterion_9() -> Outcome {
    let pre = PreprocessConfig::default();
    let synth = SynthConfig {
        seed: 9,
        ..SynthConfig::default()
    };
    let train_set = synthetic_samples_from(&synth, 0, 2000, &pre).unwrap();
    let test_set = synthetic_samples_from(&synth, 2000, 500, &pre).unwrap();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in [1u64, 2, 3] {
        let mut errs = [0.0; 2];
        for (slot, variant) in [Variant::Basic, Variant::RegionEnsemble].into_iter().enumerate() {
            let (mut spec, mut cfg) = overfit_setup();
            spec.variant = variant;
            cfg.seed = seed;
            cfg.max_iters = GENERALIZATION_ITERS;
            let mut model = Model::new(spec, ren::train::init_seed(seed)).unwrap();
            ren::train::train(&mut model, &train_set, &cfg).unwrap();
            errs[slot] = mean_error(&model, &test_set);
        }
        if errs[1] <= errs[0] {
            wins += 1;
        }
        rows.push(format!(
            "seed {seed}: basic {:.2} mm, region-ensemble {:.2} mm",
            errs[0], errs[1]
        ));
    }
    check(
        wins >= 2,
        format!("region-ensemble no worse on {wins}/3 seeds ({})", rows.join("; ")),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let models: Vec<(&str, Box<dyn Predictor>)> = vec![
        (
            "basic",
            Box::new(Model::new(ModelSpec::new(Variant::Basic, 16), 1).unwrap()),
        ),
        (
            "region-ensemble",
            Box::new(Model::new(ModelSpec::new(Variant::RegionEnsemble, 16), 2).unwrap()),
        ),
        (
            "region-bagging",
            Box::new(Model::new(ModelSpec::new(Variant::RegionBagging, 16), 3).unwrap()),
        ),
        (
            "basic-bagging",
            Box::new(
                BaggingEnsemble::new(
                    (0..4)
                        .map(|k| Model::new(ModelSpec::new(Variant::Basic, 16), 10 + k).unwrap())
                        .collect(),
                )
                .unwrap(),
            ),
        ),
    ];
    // rounds interleave the models so drift in machine load hits all alike
    let mut times: Vec<Vec<f64>> = vec![Vec::new(); models.len()];
    for round in 0..33 {
        for (i, (_, m)) in models.iter().enumerate() {
            let t = eval::benchmark_forward(m.as_ref(), 1, 0, 10).unwrap();
            if round >= 3 {
                times[i].push(t.p50_ms);
            }
        }
    }
    let median: Vec<f64> = times.iter().map(|t| eval::timing_stats(1, t).unwrap().p50_ms).collect();
    let (basic, re, rb, bag) = (median[0], median[1], median[2], median[3]);
    let re_rb = (re - rb).abs() / re;
    check(
        basic < re && re < bag && re_rb < 0.15,
        format!("median ms per forward: basic {basic:.2} < region-ensemble {re:.2} < basic-bagging(4) {bag:.2}; region-bagging {rb:.2} ({:.1}% from region-ensemble)", re_rb * 100.0),
    )
}

// ---------------------------------------------------------------- 11

fn brute_force(preds: &[HandAnnotation], gts: &[HandAnnotation]) -> (Vec<f64>, f64, Vec<f64>) {
    let j = gts[0].joints.len();
    let mut per_joint = vec![0.0; j];
    for k in 0..j {
        for f in 0..gts.len() {
            let (a, b) = (preds[f].joints[k], gts[f].joints[k]);
            per_joint[k] += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        }
        per_joint[k] /= gts.len() as f64;
    }
    let mean = per_joint.iter().sum::<f64>() / j as f64;
    let curve = (0..=80)
        .map(|t| {
            let t = t as f64;
            let hits = (0..gts.len())
                .filter(|&f| {
                    (0..j).all(|k| {
                        let (a, b) = (preds[f].joints[k], gts[f].joints[k]);
                        let e = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                        e < t || (t == 0.0 && e == 0.0)
                    })
                })
                .count();
            hits as f64 / gts.len() as f64
        })
        .collect();
    (per_joint, mean, curve)
}

fn criterion_11() -> Outcome {
    let mut r = rng::seeded(11);
    let mut mismatches = 0;
    let mut monotone = true;
    for _ in 0..50 {
        let frames = r.random_range(1..8);
        let j = r.random_range(1..6);
        let mut point = |scale: f64| -> [f64; 3] { [0, 1, 2].map(|_| r.random_range(-scale..scale)) };
        let gts: Vec<HandAnnotation> = (0..frames)
            .map(|_| HandAnnotation {
                joints: (0..j).map(|_| point(200.0)).collect(),
            })
            .collect();
        let preds: Vec<HandAnnotation> = gts
            .iter()
            .map(|g| HandAnnotation {
                joints: g
                    .joints
                    .iter()
                    .map(|p| {
                        let d = point(40.0);
                        [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
                    })
                    .collect(),
            })
            .collect();
        let (per_joint, mean, curve) = brute_force(&preds, &gts);
        let report = EvalReport::from_predictions("x", &preds, &gts).unwrap();
        let got_curve: Vec<f64> = report.success_curve.iter().map(|p| p.fraction).collect();
        if report.per_joint_error_mm != per_joint || report.mean_error_mm != mean || got_curve != curve {
            mismatches += 1;
        }
        monotone &= got_curve.windows(2).all(|w| w[0] <= w[1]);
    }
    let base = EvalReport {
        method: "lsn".into(),
        frame_count: 1,
        per_joint_error_mm: vec![8.10],
        mean_error_mm: 8.10,
        success_curve: Vec::new(),
        timing: None,
    };
    let ours = EvalReport {
        method: "ren".into(),
        mean_error_mm: 7.47,
        per_joint_error_mm: vec![7.47],
        ..base.clone()
    };
    let table = eval::compare_report(&[base, ours]).unwrap().to_text();
    let shows = table.lines().nth(2).is_some_and(|l| l.contains("7.77%"));
    check(
        mismatches == 0 && monotone && shows,
        format!("50 random sets, {mismatches} mismatches against brute force; curves monotone: {monotone}; 8.10 -> 7.47 reads 7.77%: {shows}"),
    )
}

// ---------------------------------------------------------------- 12

fn criterion_12() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::<f32>::new(tiny(Variant::RegionEnsemble), 12).unwrap();
    let path = dir.path().join("m.ren");
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    let bits = |m: &Model| -> Vec<u32> {
        m.params()
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let same_spec = loaded.spec() == model.spec();
    let same_bits = bits(&loaded) == bits(&model);
    loaded.save(dir.path().join("again.ren")).unwrap();
    let same_file = std::fs::read(&path).unwrap() == std::fs::read(dir.path().join("again.ren")).unwrap();

    let samples = synthetic_samples(&SynthConfig::default(), 20, &PreprocessConfig::default()).unwrap();
    let synth = SynthConfig::default();
    let mut worst_mm = 0.0f64;
    for (i, s) in samples.iter().enumerate() {
        let truth = ren::data::synth_sample(&synth, i as u64).unwrap().annotation;
        let normalized = normalize_joints(&truth, &s.crop);
        let back = denormalize_joints(&normalized.values, &s.crop);
        for (a, b) in back.joints.iter().zip(&truth.joints) {
            worst_mm = worst_mm.max((0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max));
        }
    }

    let data = dir.path().join("data");
    let manifest = write_synthetic_dataset(&data, &synth, 6).unwrap();
    let pre = PreprocessConfig::default();
    let (c1, c2) = (dir.path().join("a.renc"), dir.path().join("b.renc"));
    build_cache(&manifest, &pre, FramePolicy::Fatal, &c1).unwrap();
    build_cache(&manifest, &pre, FramePolicy::Fatal, &c2).unwrap();
    let rebuilt = build_cache(&manifest, &pre, FramePolicy::Fatal, &c1).unwrap();
    let cache_same = std::fs::read(&c1).unwrap() == std::fs::read(&c2).unwrap() && rebuilt.unchanged;
    check(
        same_spec && same_bits && same_file && worst_mm < 1e-3 && cache_same,
        format!(
            "checkpoint bit-exact: {}; joint round trip max {worst_mm:.2e} mm; cache rebuild identical: {cache_same}",
            same_spec && same_bits && same_file
        ),
    )
}

// ----------------------------------------------------------------

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome, bool); 12] = [
        ("gradient correctness", criterion_1, true),
        ("convolution oracle", criterion_2, true),
        ("architecture shapes", criterion_3, true),
        ("receptive field", criterion_4, true),
        ("parameter parity", criterion_5, true),
        ("ensemble identities", criterion_6, true),
        ("learning-rate schedule", criterion_7, true),
        ("overfit run", criterion_8, true),
        (
            "generalization ordering (statistical, not enforced)",
            criterion_9,
            false,
        ),
        ("timing ordering", criterion_10, true),
        ("metric oracles", criterion_11, true),
        ("round trips", criterion_12, true),
    ];
    let mut failed = Vec::new();
    let mut err = std::io::stderr();
    for (i, (name, run, enforced)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        // written directly so the line shows up without --nocapture
        let _ = writeln!(err, "criterion {:>2} {status}: {name}: {detail} [{secs:.1} s]", i + 1);
        if outcome.is_err() && enforced {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
