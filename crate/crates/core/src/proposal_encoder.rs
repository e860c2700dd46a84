//! Fixed-size region features and their embedding on the unit sphere.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::BoxXYXY;
use crate::nn::{he_normal, ParamId, ParamSet, Session};
use crate::tensor::{Element, PoolRegion, Tensor, Var};

pub const L2_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalEncoderConfig {
    /// Side of the pooled region grid.
    pub roi_output: usize,
    pub conv_channels: usize,
    pub embed_dim: usize,
}

impl Default for ProposalEncoderConfig {
    fn default() -> Self {
        ProposalEncoderConfig {
            roi_output: 2,
            conv_channels: 128,
            embed_dim: 64,
        }
    }
}

/// Map an image-space box to the feature cells it touches: start rounded
/// down, end rounded up, at least one cell per side, clamped to the map.
pub fn feature_region(b: &BoxXYXY, stride: usize, cells: usize) -> Result<PoolRegion> {
    if !(b.width() > 0.0 && b.height() > 0.0) {
        return Err(Error::DegenerateRegion(format!("box {b:?} has zero area")));
    }
    let s = stride as f64;
    let span = |lo: f64, hi: f64| -> Result<(usize, usize)> {
        let start = (lo / s).floor().max(0.0) as usize;
        let end = ((hi / s).ceil().max(0.0) as usize).min(cells);
        if start >= cells {
            return Err(Error::DegenerateRegion(format!("box {b:?} lies outside the feature map")));
        }
        Ok((start, end.max(start + 1)))
    };
    let (col0, col1) = span(b.x1, b.x2)?;
    let (row0, row1) = span(b.y1, b.y2)?;
    Ok(PoolRegion {
        row0,
        col0,
        row1,
        col1,
    })
}

/// Pool each box's region of the feature map to `[R, C, S, S]`.
pub fn roi_pool<T: Element>(
    s: &mut Session<'_, T>,
    fm: &FeatureMap,
    boxes: &[BoxXYXY],
    output: usize,
) -> Result<Var> {
    let regions = boxes
        .iter()
        .map(|b| feature_region(b, fm.stride, fm.size))
        .collect::<Result<Vec<_>>>()?;
    s.graph.region_max_pool(fm.var, &regions, output, output)
}

#[derive(Clone, Debug)]
pub struct ProposalEncoder {
    cfg: ProposalEncoderConfig,
    in_channels: usize,
    conv: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

impl ProposalEncoder {
    pub fn new<T: Element, R: Rng + ?Sized>(
        cfg: &ProposalEncoderConfig,
        in_channels: usize,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Self {
        let (ch, d, sr) = (cfg.conv_channels, cfg.embed_dim, cfg.roi_output);
        let flat = ch * sr * sr;
        let conv = (
            params.add(
                "proposal.conv.weight",
                he_normal(rng, &[ch, in_channels, 3, 3], in_channels * 9),
                true,
            ),
            params.add("proposal.conv.bias", Tensor::zeros(vec![ch]), false),
        );
        let fc1 = (
            params.add("proposal.fc1.weight", he_normal(rng, &[flat, d], flat), true),
            params.add("proposal.fc1.bias", Tensor::zeros(vec![d]), false),
        );
        let fc2 = (
            params.add("proposal.fc2.weight", he_normal(rng, &[d, d], d), true),
            params.add("proposal.fc2.bias", Tensor::zeros(vec![d]), false),
        );
        ProposalEncoder {
            cfg: cfg.clone(),
            in_channels,
            conv,
            fc1,
            fc2,
        }
    }

    pub fn config(&self) -> &ProposalEncoderConfig {
        &self.cfg
    }

    /// `[R, C, S, S]` pooled regions to `[R, d_r]` unit-norm embeddings.
    pub fn encode<T: Element>(&self, s: &mut Session<'_, T>, rois: Var) -> Result<Var> {
        let sr = self.cfg.roi_output;
        let r = match *s.graph.shape(rois) {
            [r, c, h, w] if c == self.in_channels && h == sr && w == sr => r,
            ref other => {
                return Err(Error::Shape(format!(
                    "proposal encoder expects [R,{},{sr},{sr}], got {other:?}",
                    self.in_channels
                )))
            }
        };
        let (w, b) = (s.param(self.conv.0), s.param(self.conv.1));
        let x = s.graph.conv2d(rois, w, b, 1, 1)?;
        let x = s.graph.relu(x);
        let x = s.graph.reshape(x, vec![r, self.cfg.conv_channels * sr * sr])?;
        let (w, b) = (s.param(self.fc1.0), s.param(self.fc1.1));
        let x = s.graph.linear(x, w, b)?;
        let x = s.graph.relu(x);
        let (w, b) = (s.param(self.fc2.0), s.param(self.fc2.1));
        let x = s.graph.linear(x, w, b)?;
        Ok(s.graph.l2_normalize(x, L2_EPS))
    }
}
