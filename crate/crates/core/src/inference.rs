//! Request/response types shared by the CLI and the HTTP service, image
//! decoding, and box overlays.

use std::time::Instant;

use base64::Engine;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignedDetection, InferenceConfig};
use crate::error::{Error, Result};
use crate::model::Model;

fn default_threshold() -> f64 {
    0.5
}

fn default_top_k() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceRequest {
    /// Base64-encoded PNG (or any lossless raster `image` can decode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    /// Test-split image id, as listed by `/examples`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub query: String,
    #[serde(default = "default_threshold")]
    pub score_threshold: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

impl InferenceRequest {
    pub fn config(&self) -> Result<InferenceConfig> {
        let cfg = InferenceConfig {
            score_threshold: self.score_threshold,
            top_k: self.top_k,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceResponse {
    pub detections: Vec<AlignedDetection>,
    /// `[width, height]`.
    pub image_size: [u32; 2],
    pub timing_ms: f64,
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::ImageDecode(e.to_string()))
}

pub fn decode_base64_image(data: &str) -> Result<RgbImage> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(data.trim())
        .map_err(|e| Error::ImageDecode(format!("invalid base64: {e}")))?;
    decode_image(&bytes)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::ImageDecode(e.to_string()))?;
    Ok(out.into_inner())
}

/// The full pipeline on one image, timed.
pub fn infer(model: &Model<f32>, img: &RgbImage, query: &str, cfg: &InferenceConfig) -> Result<InferenceResponse> {
    let start = Instant::now();
    let detections = model.detect(img, query, cfg)?;
    Ok(InferenceResponse {
        detections,
        image_size: [img.width(), img.height()],
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Canonical JSON of a detection list, used to compare CLI and service
/// output.
pub fn detections_json(dets: &[AlignedDetection]) -> String {
    serde_json::to_string(dets).expect("detections serialize")
}

const BOX_COLOR: Rgb<u8> = Rgb([255, 255, 0]);
const LABEL_BG: Rgb<u8> = Rgb([0, 0, 0]);

// 3x5 glyphs, one row per u8 (low three bits, MSB on the left).
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];
const DOT: [u8; 5] = [0, 0, 0, 0, 0b010];

fn glyph(c: char) -> Option<[u8; 5]> {
    match c {
        '0'..='9' => Some(DIGITS[c as usize - '0' as usize]),
        '.' => Some(DOT),
        _ => None,
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, px: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, px);
    }
}

/// Draw `text` (digits and dots) with its top-left corner at `(x, y)` on a
/// filled background.
pub fn draw_label(img: &mut RgbImage, x: i64, y: i64, text: &str) {
    let width = text.chars().count() as i64 * 4 + 1;
    for dy in 0..7 {
        for dx in 0..width {
            put(img, x + dx, y + dy, LABEL_BG);
        }
    }
    for (i, c) in text.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    put(img, x + 1 + i as i64 * 4 + col, y + 1 + r as i64, BOX_COLOR);
                }
            }
        }
    }
}

/// Copy of `img` with 2 px box outlines and two-decimal score labels.
pub fn draw_detections(img: &RgbImage, dets: &[AlignedDetection]) -> RgbImage {
    let mut out = img.clone();
    for d in dets {
        let b = d.bbox;
        let (x1, y1) = (b.x1.floor() as i64, b.y1.floor() as i64);
        let (x2, y2) = ((b.x2.ceil() as i64 - 1).max(x1), (b.y2.ceil() as i64 - 1).max(y1));
        for t in 0..2 {
            for x in x1..=x2 {
                put(&mut out, x, y1 + t, BOX_COLOR);
                put(&mut out, x, y2 - t, BOX_COLOR);
            }
            for y in y1..=y2 {
                put(&mut out, x1 + t, y, BOX_COLOR);
                put(&mut out, x2 - t, y, BOX_COLOR);
            }
        }
        let label = format!("{:.2}", d.score);
        let ly = if y1 >= 7 { y1 - 7 } else { y1 + 2 };
        draw_label(&mut out, x1, ly, &label);
    }
    out
}
