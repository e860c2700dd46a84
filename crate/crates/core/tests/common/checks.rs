//! Criterion checks shared by the integration tests and the acceptance
//! runner. Each returns an [`Outcome`] instead of panicking so the runner
//! can report every criterion.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::Arc;

use textdet::alignment::{align_loss, SATURATING_BIAS};
use textdet::evaluator::{evaluate_items, EvalConfig, EvalItem};
use textdet::inference::{detections_json, encode_png, InferenceResponse};
use textdet::model::Model;
use textdet::service::{router, AppState};
use textdet::shapegen::SceneExample;
use textdet::trainer::{save_checkpoint, CheckpointMetadata};
use textdet::backbone::FeatureMap;
use textdet::geometry::{decode_box, encode_box, iou, nms, AnchorGrid, BoxCXCYWH, BoxXYXY};
use textdet::nn::{ParamSet, Session};
use textdet::proposal_encoder::roi_pool;
use textdet::rpn::{assign_anchor_labels, rpn_loss, AnchorLabel, RpnLossConfig, RpnPrediction};
use textdet::tensor::Tensor;
use textdet::trainer::step_lr;

use super::oracles::{ref_adaptive_pool, ref_anchor_labels, ref_encode, ref_nms, ref_roi_pool, raster_iou, RefLabel};

#[derive(Clone, Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }

    /// All of `parts` must pass; details are joined.
    pub fn all(parts: Vec<Outcome>) -> Self {
        Outcome {
            pass: parts.iter().all(|p| p.pass),
            detail: parts.iter().map(|p| p.detail.as_str()).collect::<Vec<_>>().join("; "),
        }
    }
}

fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BoxCXCYWH {
    BoxCXCYWH::new(
        rng.random_range(0.0..extent),
        rng.random_range(0.0..extent),
        rng.random_range(0.5..extent / 2.0),
        rng.random_range(0.5..extent / 2.0),
    )
}

pub fn box_roundtrip(trials: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut oracle_worst: f64 = 0.0;
    for _ in 0..trials {
        let (g, a) = (random_box(&mut rng, 128.0), random_box(&mut rng, 128.0));
        let t = encode_box(&g, &a).expect("positive sizes");
        let back = decode_box(&t, &a);
        for (x, y) in [(back.cx, g.cx), (back.cy, g.cy), (back.w, g.w), (back.h, g.h)] {
            worst = worst.max((x - y).abs());
        }
        let r = ref_encode(&g.to_xyxy(), &a.to_xyxy());
        for (x, y) in t.to_array().into_iter().zip(r.to_array()) {
            oracle_worst = oracle_worst.max((x - y).abs());
        }
    }
    Outcome::new(
        worst <= 1e-6 && oracle_worst <= 1e-9,
        format!("roundtrip max err {worst:.1e} over {trials} pairs, encode vs corner formula {oracle_worst:.1e}"),
    )
}

pub fn nms_vs_bruteforce(instances: usize, boxes_per: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mismatches = 0;
    for n in 0..instances {
        let boxes: Vec<BoxXYXY> = (0..boxes_per)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
                BoxXYXY::new(x, y, x + rng.random_range(2.0..20.0), y + rng.random_range(2.0..20.0))
            })
            .collect();
        // coarse scores force ties on some instances
        let levels = if n % 2 == 0 { 5.0 } else { 1e6 };
        let scores: Vec<f64> = (0..boxes_per).map(|_| (rng.random::<f64>() * levels).floor() / levels).collect();
        let thr = rng.random_range(0.1..0.9);
        if nms(&boxes, &scores, thr) != ref_nms(&boxes, &scores, thr) {
            mismatches += 1;
        }
    }
    Outcome::new(
        mismatches == 0,
        format!("nms {mismatches} mismatches on {instances} instances of {boxes_per} boxes"),
    )
}

pub fn iou_vs_raster(trials: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut b = || {
            let (x, y) = (rng.random_range(0..40) as f64, rng.random_range(0..40) as f64);
            BoxXYXY::new(x, y, x + rng.random_range(1..24) as f64, y + rng.random_range(1..24) as f64)
        };
        let (a, c) = (b(), b());
        worst = worst.max((iou(&a, &c) - raster_iou(&a, &c)).abs());
    }
    Outcome::new(worst <= 2e-2, format!("iou vs raster max diff {worst:.1e} over {trials} pairs"))
}

fn distinct_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 - n as f64 / 2.0).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    v
}

/// Every map up to 8x8 against every output size up to 8x8.
pub fn adaptive_pool_exhaustive() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let params = ParamSet::<f64>::new();
    let (mut cases, mut bad) = (0, 0);
    for h in 1..=8 {
        for w in 1..=8 {
            for oh in 1..=8 {
                for ow in 1..=8 {
                    let c = 2;
                    let data = distinct_values(&mut rng, c * h * w);
                    let mut s = Session::new(&params, false);
                    let x = s.input(Tensor::new(vec![c, h, w], data.clone()).unwrap());
                    let y = s.graph.adaptive_max_pool2d(x, oh, ow).unwrap();
                    cases += 1;
                    if s.graph.data(y) != ref_adaptive_pool(&data, c, h, w, oh, ow).as_slice() {
                        bad += 1;
                    }
                }
            }
        }
    }
    Outcome::new(bad == 0, format!("adaptive pool {bad} mismatches over {cases} shapes"))
}

pub fn roi_pool_vs_oracle(boxes_per_shape: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let params = ParamSet::<f64>::new();
    let stride = 4;
    let (mut cases, mut bad) = (0, 0);
    for n in 1..=8 {
        for out in 1..=4 {
            for _ in 0..boxes_per_shape {
                let c = 2;
                let data = distinct_values(&mut rng, c * n * n);
                let extent = (n * stride) as f64;
                let (x1, y1) = (rng.random_range(0.0..extent - 0.5), rng.random_range(0.0..extent - 0.5));
                let b = BoxXYXY::new(
                    x1,
                    y1,
                    rng.random_range(x1 + 0.25..=extent),
                    rng.random_range(y1 + 0.25..=extent),
                );
                let mut s = Session::new(&params, false);
                let var = s.input(Tensor::new(vec![c, n, n], data.clone()).unwrap());
                let fm = FeatureMap {
                    var,
                    channels: c,
                    size: n,
                    stride,
                };
                let y = roi_pool(&mut s, &fm, &[b], out).unwrap();
                cases += 1;
                if s.graph.data(y) != ref_roi_pool(&data, c, n, stride, &b, out).as_slice() {
                    bad += 1;
                }
            }
        }
    }
    Outcome::new(bad == 0, format!("roi pool {bad} mismatches over {cases} boxes"))
}

pub fn geometry_oracles() -> Outcome {
    Outcome::all(vec![
        box_roundtrip(1000),
        nms_vs_bruteforce(200, 20),
        iou_vs_raster(1000),
        adaptive_pool_exhaustive(),
        roi_pool_vs_oracle(25),
    ])
}

/// Random labeling problem on a small integer lattice, where ties and
/// the best-anchor fallback are common.
fn labeling_instance(rng: &mut ChaCha8Rng) -> (AnchorGrid, Vec<BoxXYXY>) {
    let anchors: Vec<BoxCXCYWH> = (0..rng.random_range(1..=20))
        .map(|_| {
            let s = rng.random_range(2..8) as f64;
            BoxCXCYWH::new(rng.random_range(0..24) as f64, rng.random_range(0..24) as f64, s, s)
        })
        .collect();
    let gts = (0..rng.random_range(0..=5))
        .map(|_| {
            let (x, y) = (rng.random_range(-2..22) as f64, rng.random_range(-2..22) as f64);
            BoxXYXY::new(x, y, x + rng.random_range(1..10) as f64, y + rng.random_range(1..10) as f64)
        })
        .collect();
    let grid = AnchorGrid {
        anchors,
        feature_stride: 1,
        anchor_size: 0.0,
        cells: 0,
    };
    (grid, gts)
}

pub fn anchor_labels_vs_rules(instances: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let cfg = RpnLossConfig::default();
    let (mut bad, mut fallback, mut ties) = (0, 0, 0);
    for _ in 0..instances {
        let (grid, gts) = labeling_instance(&mut rng);
        let got = assign_anchor_labels(&grid, &gts, &cfg).unwrap();
        let anchors = grid.boxes_xyxy();
        let want = ref_anchor_labels(&anchors, &gts, cfg.iou_pos, cfg.iou_neg);
        let mut ok = got.len() == want.len();
        for (i, (g, w)) in got.iter().zip(&want).enumerate() {
            ok &= match (g, w) {
                (AnchorLabel::Positive { gt, target }, RefLabel::Positive { gt: wg }) => {
                    let r = ref_encode(&gts[*wg], &anchors[i]);
                    gt == wg && target.to_array().iter().zip(r.to_array()).all(|(a, b)| (a - b).abs() < 1e-9)
                }
                (AnchorLabel::Negative, RefLabel::Negative) | (AnchorLabel::Ignore, RefLabel::Ignore) => true,
                _ => false,
            };
            if let RefLabel::Positive { gt } = w {
                if iou(&anchors[i], &gts[*gt]) <= cfg.iou_pos {
                    fallback += 1;
                }
            }
        }
        for g in &gts {
            let v: Vec<f64> = anchors.iter().map(|a| iou(a, g)).collect();
            let best = v.iter().copied().fold(0.0, f64::max);
            if best > 0.0 && v.iter().filter(|&&x| x == best).count() > 1 {
                ties += 1;
            }
        }
        bad += !ok as usize;
    }
    Outcome::new(
        bad == 0 && fallback > 0 && ties > 0,
        format!(
            "{bad} mismatching instances of {instances}; {fallback} positives came only from the best-anchor rule, {ties} GTs had tied best anchors"
        ),
    )
}

pub fn analytic_values() -> Outcome {
    let params = ParamSet::<f64>::new();
    let ln2 = std::f64::consts::LN_2;
    let mut parts = Vec::new();

    let mut s = Session::new(&params, false);
    let n = 8;
    let labels: Vec<AnchorLabel> = (0..n)
        .map(|i| {
            if i % 2 == 0 {
                AnchorLabel::Positive {
                    gt: 0,
                    target: textdet::geometry::RegressionTarget::ZERO,
                }
            } else {
                AnchorLabel::Negative
            }
        })
        .collect();
    let pred = RpnPrediction {
        objectness: s.input(Tensor::full(vec![n], 0.5)),
        regression: s.input(Tensor::zeros(vec![n, 4])),
    };
    let sampled: Vec<usize> = (0..n).collect();
    let loss = rpn_loss(&mut s, &pred, &labels, &sampled, &RpnLossConfig::default()).unwrap();
    let cls = s.graph.data(loss.classification)[0];
    parts.push(Outcome::new((cls - ln2).abs() <= 1e-6, format!("rpn cls at p=0.5 {cls:.9}")));

    let p = s.input(Tensor::full(vec![5], 0.5));
    let a = align_loss(&mut s, p, &[true, false, true, true, false]).unwrap();
    let a = s.graph.data(a)[0];
    parts.push(Outcome::new((a - ln2).abs() <= 1e-6, format!("align at 0.5 {a:.9}")));

    let d = s.input(Tensor::full(vec![1], 0.5));
    let l1 = s.graph.smooth_l1_sum(d, &[0.0]).unwrap();
    let l1 = s.graph.data(l1)[0];
    parts.push(Outcome::new(l1 == 0.125, format!("smoothL1(0.5) {l1}")));

    let (l3, l9) = (step_lr(3, 1e-2, 3, 0.9), step_lr(9, 1e-2, 3, 0.9));
    parts.push(Outcome::new(
        l3 == 9e-3 && l9 == 7.29e-3,
        format!("step_lr(3) {l3:e}, step_lr(9) {l9:e}"),
    ));
    Outcome::all(parts)
}

/// With the alignment head pinned to one, the aligned group at threshold
/// zero must reproduce the all-proposals group exactly when every object
/// counts as aligned.
pub fn stub_alignment_consistency(model: &Model<f32>, scenes: &[SceneExample]) -> Outcome {
    let mut stub = model.clone();
    stub.alignment.set_constant(&mut stub.params, SATURATING_BIAS);
    let mut cfg = EvalConfig::default();
    cfg.detection.score_threshold = 0.0;
    cfg.detection.top_k = model.config.rpn.proposals.max_proposals;
    let gts: Vec<Vec<BoxXYXY>> = scenes.iter().map(|s| s.gt_boxes()).collect();
    let all_aligned: Vec<Vec<bool>> = gts.iter().map(|g| vec![true; g.len()]).collect();
    let queries: Vec<String> = scenes.iter().map(|s| s.query.text.clone()).collect();
    let items = scenes.iter().enumerate().map(|(i, s)| EvalItem {
        id: i.to_string(),
        image: &s.image,
        gt: &gts[i],
        aligned: &all_aligned[i],
        query: &queries[i],
    });
    let report = match evaluate_items(&stub, items, &cfg) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("evaluation failed: {e}")),
    };
    let (g1, g2) = (&report.all_proposals, &report.aligned);
    let detections: usize = g1.per_image.iter().map(|m| m.tp + m.fp).sum();
    Outcome::new(
        g1 == g2 && detections > 0,
        format!(
            "{} images, {detections} detections, {} matches; groups {}",
            scenes.len(),
            g1.matched_pairs,
            if g1 == g2 { "identical" } else { "differ" }
        ),
    )
}

/// Run `infer` through the CLI and through `POST /infer` on the same
/// checkpoint and image and compare the detection lists byte for byte.
pub fn cli_matches_service(model: &Model<f32>, image: &image::RgbImage, query: &str, dir: &Path) -> Outcome {
    use base64::Engine;
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    let ckpt = dir.join("model.tdck");
    let png = dir.join("scene.png");
    let metadata = CheckpointMetadata::default();
    if let Err(e) = save_checkpoint(&ckpt, model, &metadata) {
        return Outcome::new(false, format!("checkpoint: {e}"));
    }
    let bytes = encode_png(image).expect("png encodes");
    std::fs::write(&png, &bytes).expect("temp dir is writable");

    let (threshold, top_k) = ("0.1", 50);
    let mut out = Vec::new();
    let argv = [
        "textdet", "infer", "--ckpt", ckpt.to_str().unwrap(), "--image", png.to_str().unwrap(), "--query", query,
        "--threshold", threshold, "--top-k", &top_k.to_string(),
    ];
    if let Err(e) = textdet::cli::run(argv, &mut out) {
        return Outcome::new(false, format!("cli: {e}"));
    }
    let cli: InferenceResponse = serde_json::from_slice(&out).expect("cli prints a response");

    let (served, _) = textdet::trainer::load_checkpoint(&ckpt).expect("checkpoint loads");
    let app = router(Arc::new(AppState {
        model: served,
        metadata,
        dataset: None,
    }));
    let body = serde_json::json!({
        "image": base64::engine::general_purpose::STANDARD.encode(&bytes),
        "query": query,
        "score_threshold": 0.1,
        "top_k": top_k,
    });
    let request = axum::http::Request::post("/infer")
        .header("content-type", "application/json")
        .body(axum::body::Body::from(body.to_string()))
        .unwrap();
    let rt = tokio::runtime::Runtime::new().expect("runtime");
    let (status, raw) = rt.block_on(async {
        let resp = app.oneshot(request).await.unwrap();
        (resp.status(), resp.into_body().collect().await.unwrap().to_bytes())
    });
    if !status.is_success() {
        return Outcome::new(false, format!("/infer answered {status}: {}", String::from_utf8_lossy(&raw)));
    }
    let http: InferenceResponse = serde_json::from_slice(&raw).expect("service returns a response");
    let (a, b) = (detections_json(&cli.detections), detections_json(&http.detections));
    Outcome::new(
        a == b && !cli.detections.is_empty(),
        format!(
            "{} detections from the CLI, {} from /infer, {}",
            cli.detections.len(),
            http.detections.len(),
            if a == b { "byte-equal" } else { "different" }
        ),
    )
}

/// Everything one generate/train/evaluate run leaves behind.
pub struct Run {
    pub model: Model<f32>,
    pub log: textdet::trainer::LossLog,
    pub report: textdet::evaluator::EvaluationReport,
    pub checkpoint: Vec<u8>,
    pub loss_csv: String,
    pub report_json: String,
    pub train_secs: f64,
    pub eval_secs: f64,
}

/// Generate a dataset under `dir`, train on it and evaluate the test split.
pub fn full_run(
    dir: &Path,
    seed: u64,
    counts: textdet::shapegen::SplitCounts,
    epochs: usize,
) -> textdet::Result<Run> {
    use std::time::Instant;
    use textdet::model::{ModelConfig, Preset};
    use textdet::trainer::{TrainConfig, TrainOutputs};

    let manifest = textdet::shapegen::generate_dataset(
        seed,
        counts,
        &textdet::shapegen::GenerationConfig::desk(),
        dir.join("data"),
    )?;
    let mut cfg = TrainConfig::preset(Preset::Desk, seed);
    cfg.epochs = epochs;
    let outputs = TrainOutputs {
        checkpoint: Some(dir.join("model.tdck")),
        loss_log: Some(dir.join("model.losses.csv")),
    };
    let start = Instant::now();
    let (model, log) = textdet::trainer::train(&manifest, &ModelConfig::preset(Preset::Desk), &cfg, &outputs)?;
    let train_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let report = textdet::evaluator::evaluate_testset(&model, &manifest, &EvalConfig::default())?;
    let eval_secs = start.elapsed().as_secs_f64();
    let report_path = dir.join("report.json");
    textdet::evaluator::write_report(&report, &report_path)?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| textdet::Error::io(p, e));
    Ok(Run {
        model,
        log,
        report,
        checkpoint: read(&dir.join("model.tdck"))?,
        loss_csv: String::from_utf8(read(&dir.join("model.losses.csv"))?).expect("csv is utf-8"),
        report_json: String::from_utf8(read(&report_path)?).expect("report is utf-8"),
        train_secs,
        eval_secs,
    })
}

pub fn same_artifacts(a: &Run, b: &Run) -> Outcome {
    let ckpt = a.checkpoint == b.checkpoint;
    let log = a.loss_csv == b.loss_csv;
    let report = a.report_json == b.report_json;
    Outcome::new(
        ckpt && log && report,
        format!(
            "checkpoint ({} bytes) {}, loss log {}, report {}",
            a.checkpoint.len(),
            if ckpt { "identical" } else { "differs" },
            if log { "identical" } else { "differs" },
            if report { "identical" } else { "differs" }
        ),
    )
}

/// Render a list of outcomes as one line each.
pub fn summary(named: &[(&str, &Outcome)]) -> String {
    let mut out = String::new();
    for (name, o) in named {
        let _ = writeln!(out, "{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    out
}
