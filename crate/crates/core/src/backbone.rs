//! Shared convolutional feature extractor: a stack of stride-2 3x3
//! conv + relu blocks trained from scratch.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{he_normal, ParamId, ParamSet, Session};
use crate::tensor::{Element, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of each stride-2 block.
    pub channels: Vec<usize>,
}

impl BackboneConfig {
    /// Three blocks, 128 px in, stride 8.
    pub fn desk() -> Self {
        BackboneConfig {
            channels: vec![16, 32, 64],
        }
    }

    /// Five blocks, 512 px in, stride 32.
    pub fn paper() -> Self {
        BackboneConfig {
            channels: vec![16, 32, 64, 128, 128],
        }
    }

    pub fn feature_stride(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn out_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(3)
    }
}

/// Backbone output: a `[C_f, W_f, W_f]` map.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub channels: usize,
    pub size: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    blocks: Vec<(ParamId, ParamId)>,
}

impl Backbone {
    pub fn new<T: Element, R: Rng + ?Sized>(
        cfg: &BackboneConfig,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Self {
        let mut c_in = 3;
        let blocks = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let w = params.add(
                    format!("backbone.block{i}.weight"),
                    he_normal(rng, &[c_out, c_in, 3, 3], c_in * 9),
                    true,
                );
                let b = params.add(format!("backbone.block{i}.bias"), Tensor::zeros(vec![c_out]), false);
                c_in = c_out;
                (w, b)
            })
            .collect();
        Backbone {
            cfg: cfg.clone(),
            blocks,
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `image` is `[3,S,S]` with values in `[0,1]`.
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, image: Var) -> Result<FeatureMap> {
        let size = match *s.graph.shape(image) {
            [3, h, w] if h == w => h,
            ref other => {
                return Err(Error::Shape(format!(
                    "backbone expects a square [3,S,S] image, got {other:?}"
                )))
            }
        };
        let stride = self.cfg.feature_stride();
        if size % stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {size} is not divisible by feature stride {stride}"
            )));
        }
        let mut x = s.graph.reshape(image, vec![1, 3, size, size])?;
        for &(w, b) in &self.blocks {
            let (w, b) = (s.param(w), s.param(b));
            x = s.graph.conv2d(x, w, b, 2, 1)?;
            x = s.graph.relu(x);
        }
        let channels = self.cfg.out_channels();
        let cells = size / stride;
        let var = s.graph.reshape(x, vec![channels, cells, cells])?;
        Ok(FeatureMap {
            var,
            channels,
            size: cells,
            stride,
        })
    }
}

/// `[3,H,W]` tensor with channels scaled to `[0,1]`.
pub fn image_to_tensor<T: Element>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![T::zero(); 3 * plane];
    let scale = T::from_f64_lossy(1.0 / 255.0);
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::from_u8(p.0[c]).unwrap() * scale;
        }
    }
    Tensor::new(vec![3, h as usize, w as usize], data).expect("image dims")
}
