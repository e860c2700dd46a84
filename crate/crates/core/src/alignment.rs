//! Proposal-text alignment head, its loss, and final detection scoring.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxXYXY;
use crate::nn::{he_normal, ParamId, ParamSet, Session};
use crate::tensor::{Element, Tensor, Var};

/// Output bias that saturates the head's sigmoid to exactly 1.
pub const SATURATING_BIAS: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub hidden_dim: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig { hidden_dim: 64 }
    }
}

/// Two-layer MLP over `[proposal; text]` ending in a sigmoid.
#[derive(Clone, Debug)]
pub struct AlignmentHead {
    cfg: AlignmentConfig,
    proposal_dim: usize,
    text_dim: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl AlignmentHead {
    /// First layer He-initialized, second layer and biases zero, so every
    /// pair starts at exactly 0.5.
    pub fn new<T: Element, R: Rng + ?Sized>(
        cfg: &AlignmentConfig,
        proposal_dim: usize,
        text_dim: usize,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Self {
        let din = proposal_dim + text_dim;
        let h = cfg.hidden_dim;
        AlignmentHead {
            cfg: cfg.clone(),
            proposal_dim,
            text_dim,
            w1: params.add("align.w1", he_normal(rng, &[din, h], din), true),
            b1: params.add("align.b1", Tensor::zeros(vec![h]), false),
            w2: params.add("align.w2", Tensor::zeros(vec![h, 1]), true),
            b2: params.add("align.b2", Tensor::zeros(vec![1]), false),
        }
    }

    pub fn config(&self) -> &AlignmentConfig {
        &self.cfg
    }

    /// `proposals: [R, d_r]`, `text: [1, d_t]` to alignment scores `[R]`.
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, proposals: Var, text: Var) -> Result<Var> {
        let r = match *s.graph.shape(proposals) {
            [r, d] if d == self.proposal_dim => r,
            ref other => {
                return Err(Error::Shape(format!(
                    "alignment expects proposals [R,{}], got {other:?}",
                    self.proposal_dim
                )))
            }
        };
        if s.graph.shape(text) != [1, self.text_dim] {
            return Err(Error::Shape(format!(
                "alignment expects text [1,{}], got {:?}",
                self.text_dim,
                s.graph.shape(text)
            )));
        }
        let text = s.graph.broadcast_rows(text, r)?;
        let z = s.graph.concat_cols(proposals, text)?;
        let (w1, b1) = (s.param(self.w1), s.param(self.b1));
        let hidden = s.graph.linear(z, w1, b1)?;
        let hidden = s.graph.relu(hidden);
        let (w2, b2) = (s.param(self.w2), s.param(self.b2));
        let logits = s.graph.linear(hidden, w2, b2)?;
        let probs = s.graph.sigmoid(logits);
        s.graph.reshape(probs, vec![r])
    }

    /// Turn the head into a constant: zero output weights and a bias that
    /// drives the sigmoid to `σ(bias)`.
    pub fn set_constant<T: Element>(&self, params: &mut ParamSet<T>, bias: f64) {
        params.tensor_mut(self.w2).data_mut().fill(T::zero());
        params.tensor_mut(self.b2).data_mut()[0] = T::from_f64_lossy(bias);
    }
}

/// Mean binary cross-entropy of alignment predictions.
pub fn align_loss<T: Element>(s: &mut Session<'_, T>, predictions: Var, labels: &[bool]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("align_loss on an empty batch".into()));
    }
    let targets: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    s.graph.bce_mean(predictions, &targets)
}

pub fn score(confidence: f64, alignment: f64) -> f64 {
    confidence * alignment
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedDetection {
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub confidence: f64,
    pub alignment: f64,
    pub score: f64,
}

impl AlignedDetection {
    pub fn new(bbox: BoxXYXY, confidence: f64, alignment: f64) -> Self {
        AlignedDetection {
            bbox,
            confidence,
            alignment,
            score: score(confidence, alignment),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub top_k: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_threshold: 0.5,
            top_k: 20,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::InvalidArgument(format!(
                "score threshold {} is outside [0, 1]",
                self.score_threshold
            )));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Keep detections scoring strictly above the threshold, best first (ties
/// keep input order), at most `top_k`.
pub fn select_topk(detections: &[AlignedDetection], cfg: &InferenceConfig) -> Vec<AlignedDetection> {
    let mut keep: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].score > cfg.score_threshold)
        .collect();
    keep.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    keep.truncate(cfg.top_k);
    keep.into_iter().map(|i| detections[i]).collect()
}
