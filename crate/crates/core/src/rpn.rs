//! Region proposal network: objectness and box-regression heads over the
//! feature map, anchor labeling, balanced sampling, the multi-task loss, and
//! proposal extraction.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::{clip_box, decode_box, encode_box, iou, nms, AnchorGrid, BoxXYXY, RegressionTarget};
use crate::nn::{he_normal, ParamId, ParamSet, Session};
use crate::tensor::{Element, Tensor, Var};

/// Upper bound on predicted log-scale offsets before `exp`.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpnLossConfig {
    /// Regression weight.
    pub lambda: f64,
    /// Anchors whose best IoU exceeds this are positive.
    pub iou_pos: f64,
    /// Anchors whose best IoU is below this are negative.
    pub iou_neg: f64,
}

impl Default for RpnLossConfig {
    fn default() -> Self {
        RpnLossConfig {
            lambda: 1.0,
            iou_pos: 0.6,
            iou_neg: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub max_proposals: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            conf_threshold: 0.5,
            nms_iou: 0.5,
            max_proposals: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpnConfig {
    pub hidden_channels: usize,
    pub anchor_size: f64,
    pub loss: RpnLossConfig,
    pub proposals: ProposalConfig,
}

impl RpnConfig {
    pub fn with_anchor_size(anchor_size: f64) -> Self {
        RpnConfig {
            hidden_channels: 256,
            anchor_size,
            loss: RpnLossConfig::default(),
            proposals: ProposalConfig::default(),
        }
    }
}

/// Per-anchor outputs: objectness probabilities `[A]` and regression
/// coefficients `[A,4]`, both in the anchor grid's row-major order.
#[derive(Clone, Copy, Debug)]
pub struct RpnPrediction {
    pub objectness: Var,
    pub regression: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnchorLabel {
    Positive { gt: usize, target: RegressionTarget },
    Negative,
    Ignore,
}

impl AnchorLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorLabel::Positive { .. })
    }

    pub fn is_negative(&self) -> bool {
        matches!(self, AnchorLabel::Negative)
    }
}

/// A decoded, clipped candidate region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BoxXYXY,
    pub confidence: f64,
    pub source_anchor: usize,
}

#[derive(Clone, Debug)]
pub struct Rpn {
    cfg: RpnConfig,
    conv: (ParamId, ParamId),
    cls: (ParamId, ParamId),
    reg: (ParamId, ParamId),
}

impl Rpn {
    pub fn new<T: Element, R: Rng + ?Sized>(
        cfg: &RpnConfig,
        in_channels: usize,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Self {
        let h = cfg.hidden_channels;
        let conv = (
            params.add("rpn.conv.weight", he_normal(rng, &[h, in_channels, 3, 3], in_channels * 9), true),
            params.add("rpn.conv.bias", Tensor::zeros(vec![h]), false),
        );
        let cls = (
            params.add("rpn.cls.weight", he_normal(rng, &[1, h, 1, 1], h), true),
            params.add("rpn.cls.bias", Tensor::zeros(vec![1]), false),
        );
        let reg = (
            params.add("rpn.reg.weight", he_normal(rng, &[4, h, 1, 1], h), true),
            params.add("rpn.reg.bias", Tensor::zeros(vec![4]), false),
        );
        Rpn {
            cfg: cfg.clone(),
            conv,
            cls,
            reg,
        }
    }

    pub fn config(&self) -> &RpnConfig {
        &self.cfg
    }

    pub fn forward<T: Element>(
        &self,
        s: &mut Session<'_, T>,
        fm: &FeatureMap,
        grid: &AnchorGrid,
    ) -> Result<RpnPrediction> {
        if grid.cells != fm.size || grid.feature_stride != fm.stride {
            return Err(Error::Shape(format!(
                "feature map {0}x{0} (stride {1}) does not match anchor grid {2}x{2} (stride {3})",
                fm.size, fm.stride, grid.cells, grid.feature_stride
            )));
        }
        let a = fm.size * fm.size;
        let x = s.graph.reshape(fm.var, vec![1, fm.channels, fm.size, fm.size])?;
        let (w, b) = (s.param(self.conv.0), s.param(self.conv.1));
        let hidden = s.graph.conv2d(x, w, b, 1, 1)?;
        let hidden = s.graph.relu(hidden);

        let (w, b) = (s.param(self.cls.0), s.param(self.cls.1));
        let logits = s.graph.conv2d(hidden, w, b, 1, 0)?;
        let probs = s.graph.sigmoid(logits);
        let objectness = s.graph.reshape(probs, vec![a])?;

        let (w, b) = (s.param(self.reg.0), s.param(self.reg.1));
        let reg = s.graph.conv2d(hidden, w, b, 1, 0)?;
        let reg = s.graph.reshape(reg, vec![4, a])?;
        let regression = s.graph.transpose2d(reg)?;
        Ok(RpnPrediction {
            objectness,
            regression,
        })
    }

    /// Zero every head parameter so objectness is exactly 0.5 and
    /// regression exactly 0.
    pub fn zero_heads<T: Element>(&self, params: &mut ParamSet<T>) {
        for id in [self.conv.0, self.conv.1, self.cls.0, self.cls.1, self.reg.0, self.reg.1] {
            params.tensor_mut(id).data_mut().fill(T::zero());
        }
    }
}

/// Label anchors against ground truth.
///
/// An anchor is positive if it attains some GT's highest IoU (ties
/// included, IoU > 0) or if its best IoU over all GTs exceeds `iou_pos`;
/// negative if its best IoU is below `iou_neg`; ignored otherwise. Positives
/// are matched to their own best-IoU GT (lowest index on ties).
pub fn assign_anchor_labels(grid: &AnchorGrid, gt: &[BoxXYXY], cfg: &RpnLossConfig) -> Result<Vec<AnchorLabel>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("anchor grid is empty".into()));
    }
    if gt.is_empty() {
        return Ok(vec![AnchorLabel::Negative; grid.len()]);
    }
    let anchors = grid.boxes_xyxy();
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gt.iter().map(|g| iou(a, g)).collect())
        .collect();
    let mut best_gt = Vec::with_capacity(anchors.len());
    for row in &ious {
        let mut bi = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[bi] {
                bi = j;
            }
        }
        best_gt.push((bi, row[bi]));
    }
    let mut positive: Vec<bool> = best_gt.iter().map(|&(_, v)| v > cfg.iou_pos).collect();
    for j in 0..gt.len() {
        let best = ious.iter().map(|r| r[j]).fold(0.0, f64::max);
        if best > 0.0 {
            for (i, row) in ious.iter().enumerate() {
                if row[j] == best {
                    positive[i] = true;
                }
            }
        }
    }
    anchors
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let (g, best) = best_gt[i];
            Ok(if positive[i] {
                AnchorLabel::Positive {
                    gt: g,
                    target: encode_box(&gt[g].to_cxcywh(), &grid.anchors[i])?,
                }
            } else if best < cfg.iou_neg {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            })
        })
        .collect()
}

/// Keep every positive and an equal number of uniformly drawn negatives
/// (capped by availability). Returns ascending positive indices followed by
/// ascending negative indices.
pub fn sample_minibatch(labels: &[AnchorLabel], seed: u64) -> Vec<usize> {
    let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_positive()).collect();
    let negatives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_negative()).collect();
    let take = positives.len().min(negatives.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, negatives.len(), take)
        .into_iter()
        .map(|k| negatives[k])
        .collect();
    picked.sort_unstable();
    let mut out = positives;
    out.extend(picked);
    out
}

/// Loss terms of one image.
#[derive(Clone, Copy, Debug)]
pub struct RpnLoss {
    pub total: Var,
    pub classification: Var,
    pub regression: Option<Var>,
}

/// `(1/N_cls) Σ BCE + λ (1/N_reg) Σ_{positives} smoothL1`, with `N_cls` the
/// sampled count and `N_reg` the positive count.
pub fn rpn_loss<T: Element>(
    s: &mut Session<'_, T>,
    pred: &RpnPrediction,
    labels: &[AnchorLabel],
    sampled: &[usize],
    cfg: &RpnLossConfig,
) -> Result<RpnLoss> {
    if sampled.is_empty() {
        return Err(Error::InvalidArgument("rpn_loss needs at least one sampled anchor".into()));
    }
    let a = s.graph.shape(pred.objectness)[0];
    if labels.len() != a {
        return Err(Error::Shape(format!("{} labels for {a} anchors", labels.len())));
    }
    let mut cls_targets = Vec::with_capacity(sampled.len());
    let mut pos_idx = Vec::new();
    let mut reg_targets = Vec::new();
    for &i in sampled {
        match labels.get(i) {
            Some(AnchorLabel::Positive { target, .. }) => {
                cls_targets.push(1.0);
                pos_idx.push(i);
                reg_targets.extend_from_slice(&target.to_array());
            }
            Some(AnchorLabel::Negative) => cls_targets.push(0.0),
            Some(AnchorLabel::Ignore) => {
                return Err(Error::InvalidArgument(format!("anchor {i} is ignored but was sampled")))
            }
            None => return Err(Error::InvalidArgument(format!("sampled anchor {i} out of range"))),
        }
    }
    let obj = s.graph.reshape(pred.objectness, vec![a, 1])?;
    let picked = s.graph.gather_rows(obj, sampled)?;
    let classification = s.graph.bce_mean(picked, &cls_targets)?;
    if pos_idx.is_empty() {
        return Ok(RpnLoss {
            total: classification,
            classification,
            regression: None,
        });
    }
    let reg = s.graph.gather_rows(pred.regression, &pos_idx)?;
    let reg_sum = s.graph.smooth_l1_sum(reg, &reg_targets)?;
    let regression = s.graph.scale(reg_sum, cfg.lambda / pos_idx.len() as f64);
    let total = s.graph.add(classification, regression)?;
    Ok(RpnLoss {
        total,
        classification,
        regression: Some(regression),
    })
}

/// Decode, clip, threshold, suppress and truncate. Output is sorted by
/// confidence, highest first. Boxes that clip to zero area are dropped.
pub fn extract_proposals(
    objectness: &[f64],
    regression: &[f64],
    grid: &AnchorGrid,
    image_size: f64,
    cfg: &ProposalConfig,
) -> Vec<Proposal> {
    assert_eq!(objectness.len(), grid.len());
    assert_eq!(regression.len(), 4 * grid.len());
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    let mut sources = Vec::new();
    for (i, &conf) in objectness.iter().enumerate() {
        if conf < cfg.conf_threshold {
            continue;
        }
        let r = &regression[4 * i..4 * i + 4];
        let t = RegressionTarget {
            tx: r[0],
            ty: r[1],
            tw: r[2].min(MAX_LOG_SCALE),
            th: r[3].min(MAX_LOG_SCALE),
        };
        let b = clip_box(&decode_box(&t, &grid.anchors[i]).to_xyxy(), image_size);
        if b.area().is_nan() || b.area() <= 0.0 {
            continue;
        }
        boxes.push(b);
        scores.push(conf);
        sources.push(i);
    }
    nms(&boxes, &scores, cfg.nms_iou)
        .into_iter()
        .take(cfg.max_proposals)
        .map(|k| Proposal {
            bbox: boxes[k],
            confidence: scores[k],
            source_anchor: sources[k],
        })
        .collect()
}
