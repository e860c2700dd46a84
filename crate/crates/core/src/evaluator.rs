//! Test-split evaluation in two groups: every extracted proposal against
//! every object, and query-scored detections against the aligned objects
//! only.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{select_topk, InferenceConfig};
use crate::error::{Error, Result};
use crate::geometry::{iou, order_by_score, BoxXYXY};
use crate::model::{detections_of, Model};
use crate::shapegen::{DatasetManifest, Split};

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub prediction: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub pairs: Vec<MatchedPair>,
}

impl MatchResult {
    /// 1 with no predictions and no objects; 0 with objects but no
    /// predictions.
    pub fn precision(&self) -> f64 {
        match self.tp + self.fp {
            0 if self.fn_ == 0 => 1.0,
            0 => 0.0,
            n => self.tp as f64 / n as f64,
        }
    }

    /// 1 when there are no objects.
    pub fn recall(&self) -> f64 {
        match self.tp + self.fn_ {
            0 => 1.0,
            n => self.tp as f64 / n as f64,
        }
    }
}

/// Greedy one-to-one matching: predictions in descending score order each
/// take the still-unmatched object of highest IoU (lowest index on ties)
/// when that IoU reaches `iou_threshold`.
pub fn match_detections(preds: &[BoxXYXY], scores: &[f64], gts: &[BoxXYXY], iou_threshold: f64) -> MatchResult {
    assert_eq!(preds.len(), scores.len());
    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for p in order_by_score(scores) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&preds[p], gt);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) if v >= iou_threshold => {
                taken[g] = true;
                out.tp += 1;
                out.pairs.push(MatchedPair {
                    prediction: p,
                    gt: g,
                    iou: v,
                });
            }
            _ => out.fp += 1,
        }
    }
    out.fn_ = gts.len() - out.tp;
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub mean_precision: f64,
    pub mean_recall: f64,
    /// Mean over all matched pairs pooled across images; 0 if none.
    pub mean_iou: f64,
}

pub fn detection_metrics(results: &[MatchResult]) -> DetectionMetrics {
    let n = results.len().max(1) as f64;
    let ious: Vec<f64> = results.iter().flat_map(|r| r.pairs.iter().map(|p| p.iou)).collect();
    DetectionMetrics {
        mean_precision: results.iter().map(MatchResult::precision).sum::<f64>() / n,
        mean_recall: results.iter().map(MatchResult::recall).sum::<f64>() / n,
        mean_iou: if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        },
    }
}

/// Fraction of items whose `score > threshold` agrees with the label.
pub fn alignment_accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "alignment accuracy needs equal non-empty inputs, got {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| (s > threshold) == y)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouHistogram {
    /// `bins + 1` uniform edges on `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl IouHistogram {
    pub fn new(values: impl IntoIterator<Item = f64>, bins: usize) -> Self {
        let mut counts = vec![0; bins];
        for v in values {
            let b = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        IouHistogram {
            edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
            counts,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{c}\n", self.edges[i], self.edges[i + 1]));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_iou: f64,
    pub matched_pairs: usize,
    pub iou_histogram: IouHistogram,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricsReport {
    pub fn from_matches(images: &[String], results: &[MatchResult]) -> Self {
        let m = detection_metrics(results);
        let ious: Vec<f64> = results.iter().flat_map(|r| r.pairs.iter().map(|p| p.iou)).collect();
        MetricsReport {
            mean_precision: m.mean_precision,
            mean_recall: m.mean_recall,
            mean_iou: m.mean_iou,
            matched_pairs: ious.len(),
            iou_histogram: IouHistogram::new(ious, HISTOGRAM_BINS),
            per_image: images
                .iter()
                .zip(results)
                .map(|(id, r)| ImageMetrics {
                    image: id.clone(),
                    tp: r.tp,
                    fp: r.fp,
                    fn_: r.fn_,
                    precision: r.precision(),
                    recall: r.recall(),
                })
                .collect(),
        }
    }

    /// Same numbers, ignoring the per-image identifiers.
    pub fn metrics(&self) -> DetectionMetrics {
        DetectionMetrics {
            mean_precision: self.mean_precision,
            mean_recall: self.mean_recall,
            mean_iou: self.mean_iou,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Score threshold and ranking depth of the aligned group.
    pub detection: InferenceConfig,
    pub alignment_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            detection: InferenceConfig {
                score_threshold: 0.5,
                top_k: 100,
            },
            alignment_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub images: usize,
    pub all_proposals: MetricsReport,
    pub aligned: MetricsReport,
    /// `None` when no proposal overlapped an object closely enough.
    pub alignment_accuracy: Option<f64>,
    pub alignment_samples: usize,
}

/// One evaluation item: an image with its objects, flags and query.
pub struct EvalItem<'a> {
    pub id: String,
    pub image: &'a image::RgbImage,
    pub gt: &'a [BoxXYXY],
    pub aligned: &'a [bool],
    pub query: &'a str,
}

pub fn evaluate_items<'a>(
    model: &Model<f32>,
    items: impl IntoIterator<Item = EvalItem<'a>>,
    cfg: &EvalConfig,
) -> Result<EvaluationReport> {
    cfg.detection.validate()?;
    let mut ids = Vec::new();
    let mut all = Vec::new();
    let mut aligned = Vec::new();
    let mut align_scores = Vec::new();
    let mut align_labels = Vec::new();
    for item in items {
        let scored = model.score_proposals(item.image, item.query)?;
        let boxes: Vec<BoxXYXY> = scored.iter().map(|p| p.bbox).collect();
        let conf: Vec<f64> = scored.iter().map(|p| p.confidence).collect();
        all.push(match_detections(&boxes, &conf, item.gt, cfg.iou_threshold));

        for p in &scored {
            let best = item
                .gt
                .iter()
                .enumerate()
                .map(|(g, b)| (g, iou(&p.bbox, b)))
                .fold(None, |acc: Option<(usize, f64)>, (g, v)| match acc {
                    Some((_, b)) if b >= v => acc,
                    _ => Some((g, v)),
                });
            if let Some((g, _)) = best.filter(|&(_, v)| v >= cfg.iou_threshold) {
                align_scores.push(p.alignment);
                align_labels.push(item.aligned[g]);
            }
        }

        let dets = select_topk(&detections_of(&scored), &cfg.detection);
        let det_boxes: Vec<BoxXYXY> = dets.iter().map(|d| d.bbox).collect();
        let det_scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        let target: Vec<BoxXYXY> = item
            .gt
            .iter()
            .zip(item.aligned)
            .filter(|(_, &a)| a)
            .map(|(b, _)| *b)
            .collect();
        aligned.push(match_detections(&det_boxes, &det_scores, &target, cfg.iou_threshold));
        ids.push(item.id);
    }
    if ids.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    let accuracy = if align_scores.is_empty() {
        None
    } else {
        Some(alignment_accuracy(&align_scores, &align_labels, cfg.alignment_threshold)?)
    };
    Ok(EvaluationReport {
        images: ids.len(),
        all_proposals: MetricsReport::from_matches(&ids, &all),
        aligned: MetricsReport::from_matches(&ids, &aligned),
        alignment_accuracy: accuracy,
        alignment_samples: align_scores.len(),
    })
}

/// Evaluate on the manifest's test split.
pub fn evaluate_testset(model: &Model<f32>, manifest: &DatasetManifest, cfg: &EvalConfig) -> Result<EvaluationReport> {
    let mut loaded = Vec::new();
    for (i, rec) in manifest.split(Split::Test) {
        let image = manifest.load_image(rec)?;
        let gt: Vec<BoxXYXY> = rec.objects.iter().map(|o| o.bbox).collect();
        loaded.push((i.to_string(), image, gt, rec));
    }
    evaluate_items(
        model,
        loaded.iter().map(|(id, image, gt, rec)| EvalItem {
            id: id.clone(),
            image,
            gt,
            aligned: &rec.aligned,
            query: &rec.query,
        }),
        cfg,
    )
}

/// Paths of the histogram CSVs written next to a report.
pub fn histogram_paths(report: &Path) -> (PathBuf, PathBuf) {
    (
        report.with_extension("all_proposals.hist.csv"),
        report.with_extension("aligned.hist.csv"),
    )
}

/// Write the JSON report and one histogram CSV per group.
pub fn write_report(report: &EvaluationReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    let (all, aligned) = histogram_paths(path);
    fs::write(&all, report.all_proposals.iou_histogram.to_csv()).map_err(|e| Error::io(&all, e))?;
    fs::write(&aligned, report.aligned.iou_histogram.to_csv()).map_err(|e| Error::io(&aligned, e))
}
