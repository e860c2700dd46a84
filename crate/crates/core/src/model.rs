//! The assembled detector: configuration presets, parameter construction,
//! and the shared inference path used by the CLI, the service and the
//! evaluator.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{select_topk, AlignedDetection, AlignmentConfig, AlignmentHead, InferenceConfig};
use crate::backbone::{image_to_tensor, Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::geometry::{build_anchor_grid, AnchorGrid, BoxXYXY};
use crate::nn::{ParamSet, Session};
use crate::proposal_encoder::{roi_pool, ProposalEncoder, ProposalEncoderConfig};
use crate::rpn::{extract_proposals, Rpn, RpnConfig};
use crate::tensor::Element;
use crate::text_encoder::{tokenize, TextEncoder, TextEncoderConfig, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset `{other}` (expected paper or desk)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub rpn: RpnConfig,
    pub proposal: ProposalEncoderConfig,
    pub text: TextEncoderConfig,
    pub alignment: AlignmentConfig,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => ModelConfig {
                image_size: 512,
                backbone: BackboneConfig::paper(),
                rpn: RpnConfig::with_anchor_size(64.0),
                ..Self::preset(Preset::Desk)
            },
            Preset::Desk => ModelConfig {
                image_size: 128,
                backbone: BackboneConfig::desk(),
                rpn: RpnConfig::with_anchor_size(16.0),
                proposal: ProposalEncoderConfig::default(),
                text: TextEncoderConfig::default(),
                alignment: AlignmentConfig::default(),
            },
        }
    }

    pub fn anchor_grid(&self) -> Result<AnchorGrid> {
        build_anchor_grid(self.image_size, self.backbone.feature_stride(), self.rpn.anchor_size)
    }
}

/// Architecture plus parameters.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub grid: AnchorGrid,
    pub backbone: Backbone,
    pub rpn: Rpn,
    pub proposal: ProposalEncoder,
    pub text: TextEncoder,
    pub alignment: AlignmentHead,
    pub params: ParamSet<T>,
}

/// One scored proposal before thresholding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredProposal {
    pub bbox: BoxXYXY,
    pub confidence: f64,
    pub alignment: f64,
}

impl<T: Element> Model<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let grid = config.anchor_grid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = Backbone::new(&config.backbone, &mut params, &mut rng);
        let c_f = config.backbone.out_channels();
        let rpn = Rpn::new(&config.rpn, c_f, &mut params, &mut rng);
        let proposal = ProposalEncoder::new(&config.proposal, c_f, &mut params, &mut rng);
        let text = TextEncoder::new(&config.text, vocab.len(), &mut params, &mut rng)?;
        let alignment = AlignmentHead::new(
            &config.alignment,
            config.proposal.embed_dim,
            config.text.embed_dim,
            &mut params,
            &mut rng,
        );
        Ok(Model {
            config: config.clone(),
            vocab,
            grid,
            backbone,
            rpn,
            proposal,
            text,
            alignment,
            params,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            grid: self.grid.clone(),
            backbone: self.backbone.clone(),
            rpn: self.rpn.clone(),
            proposal: self.proposal.clone(),
            text: self.text.clone(),
            alignment: self.alignment.clone(),
            params: self.params.cast(),
        }
    }

    pub fn check_image(&self, img: &RgbImage) -> Result<()> {
        let s = self.config.image_size as u32;
        if img.dimensions() != (s, s) {
            return Err(Error::InvalidArgument(format!(
                "image is {}x{} but the model expects {s}x{s}",
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    /// Every proposal surviving extraction, in confidence order, with its
    /// alignment to `query`.
    pub fn score_proposals(&self, img: &RgbImage, query: &str) -> Result<Vec<ScoredProposal>> {
        self.check_image(img)?;
        let mut s = Session::new(&self.params, false);
        let x = s.input(image_to_tensor(img));
        let fm = self.backbone.forward(&mut s, x)?;
        let pred = self.rpn.forward(&mut s, &fm, &self.grid)?;
        let obj: Vec<f64> = s.graph.data(pred.objectness).iter().map(|v| v.to_f64_lossy()).collect();
        let reg: Vec<f64> = s.graph.data(pred.regression).iter().map(|v| v.to_f64_lossy()).collect();
        let proposals = extract_proposals(
            &obj,
            &reg,
            &self.grid,
            self.config.image_size as f64,
            &self.config.rpn.proposals,
        );
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<BoxXYXY> = proposals.iter().map(|p| p.bbox).collect();
        let rois = roi_pool(&mut s, &fm, &boxes, self.config.proposal.roi_output)?;
        let emb = self.proposal.encode(&mut s, rois)?;
        let tokens = tokenize(query, &self.vocab, self.config.text.max_len);
        let text = self.text.encode(&mut s, &tokens)?;
        let align = self.alignment.forward(&mut s, emb, text)?;
        Ok(proposals
            .iter()
            .zip(s.graph.data(align))
            .map(|(p, a)| ScoredProposal {
                bbox: p.bbox,
                confidence: p.confidence,
                alignment: a.to_f64_lossy(),
            })
            .collect())
    }

    /// Scored, thresholded, ranked detections for a query.
    pub fn detect(&self, img: &RgbImage, query: &str, cfg: &InferenceConfig) -> Result<Vec<AlignedDetection>> {
        cfg.validate()?;
        let scored = self.score_proposals(img, query)?;
        Ok(select_topk(&detections_of(&scored), cfg))
    }
}

pub fn detections_of(scored: &[ScoredProposal]) -> Vec<AlignedDetection> {
    scored
        .iter()
        .map(|p| AlignedDetection::new(p.bbox, p.confidence, p.alignment))
        .collect()
}
