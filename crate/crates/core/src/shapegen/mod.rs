//! Procedural scenes of colored circles, squares and triangles on a black
//! background, each paired with a query and per-object alignment flags.

mod dataset;
mod query;

use image::{Rgb, RgbImage};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoxXYXY};

pub use dataset::{generate_dataset, DatasetManifest, ManifestRecord, Split, SplitCounts};
pub use query::{generate_query, Query};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn from_word(w: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.word() == w)
    }

    pub fn rgb(self) -> Rgb<u8> {
        match self {
            Color::Red => Rgb([255, 0, 0]),
            Color::Green => Rgb([0, 255, 0]),
            Color::Blue => Rgb([0, 0, 255]),
        }
    }
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeObject {
    pub kind: ShapeKind,
    pub color: Color,
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
}

#[derive(Clone, Debug)]
pub struct SceneExample {
    pub image: RgbImage,
    pub objects: Vec<ShapeObject>,
    pub query: Query,
    pub aligned: Vec<bool>,
}

impl SceneExample {
    pub fn gt_boxes(&self) -> Vec<BoxXYXY> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub image_size: u32,
    pub anchor_size: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Shape side range as multiples of `anchor_size`.
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_pairwise_iou: f64,
    pub placement_attempts: usize,
    pub query_attempts: usize,
}

impl GenerationConfig {
    /// 512 px scenes around a 64 px anchor.
    pub fn paper() -> Self {
        GenerationConfig {
            image_size: 512,
            anchor_size: 64.0,
            ..Self::desk()
        }
    }

    /// 128 px scenes around a 16 px anchor.
    pub fn desk() -> Self {
        GenerationConfig {
            image_size: 128,
            anchor_size: 16.0,
            min_objects: 10,
            max_objects: 20,
            min_scale: 0.75,
            max_scale: 1.5,
            max_pairwise_iou: 0.3,
            placement_attempts: 1000,
            query_attempts: 20,
        }
    }

    /// Inclusive integer side range in pixels.
    pub fn side_range(&self) -> (u32, u32) {
        let lo = (self.anchor_size * self.min_scale).ceil() as u32;
        let hi = (self.anchor_size * self.max_scale).floor() as u32;
        (lo.max(1), hi.max(lo.max(1)))
    }
}

/// Alignment flag per object: both optional filters must match.
pub fn label_alignment(objects: &[ShapeObject], query: &Query) -> Vec<bool> {
    objects.iter().map(|o| query.matches(o.kind, o.color)).collect()
}

/// Deterministically generate one scene from `seed`.
pub fn generate_example(seed: u64, cfg: &GenerationConfig) -> Result<SceneExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size;
    let (side_lo, side_hi) = cfg.side_range();
    if side_hi > size {
        return Err(Error::Generation(format!(
            "shape side up to {side_hi} px does not fit a {size} px image"
        )));
    }
    let target = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<ShapeObject> = Vec::with_capacity(target);
    for _ in 0..target {
        let kind = ShapeKind::ALL[rng.random_range(0..3)];
        let color = Color::ALL[rng.random_range(0..3)];
        let mut placed = None;
        for _ in 0..cfg.placement_attempts {
            let side = rng.random_range(side_lo..=side_hi);
            let x = rng.random_range(0..=size - side) as f64;
            let y = rng.random_range(0..=size - side) as f64;
            let b = BoxXYXY::new(x, y, x + side as f64, y + side as f64);
            if objects.iter().all(|o| iou(&o.bbox, &b) <= cfg.max_pairwise_iou) {
                placed = Some(b);
                break;
            }
        }
        if let Some(bbox) = placed {
            objects.push(ShapeObject { kind, color, bbox });
        }
    }
    if objects.len() < cfg.min_objects {
        return Err(Error::Generation(format!(
            "placed only {} of the required {} shapes",
            objects.len(),
            cfg.min_objects
        )));
    }

    let mut image = RgbImage::new(size, size);
    for o in &objects {
        draw_shape(&mut image, o);
    }

    let mut query = query::sample_query(&mut ChaCha8Rng::seed_from_u64(rng.next_u64()));
    let mut aligned = label_alignment(&objects, &query);
    let mut attempts = 1;
    while !aligned.iter().any(|&a| a) && attempts < cfg.query_attempts {
        query = query::sample_query(&mut ChaCha8Rng::seed_from_u64(rng.next_u64()));
        aligned = label_alignment(&objects, &query);
        attempts += 1;
    }
    if !aligned.iter().any(|&a| a) {
        log::warn!(
            "seed {seed}: no query with an aligned object after {attempts} attempts; keeping `{}`",
            query.text
        );
    }

    Ok(SceneExample {
        image,
        objects,
        query,
        aligned,
    })
}

/// Fill pixels whose centers fall inside the shape. Circles and upright
/// isosceles triangles are inscribed in the box; squares fill it.
fn draw_shape(image: &mut RgbImage, o: &ShapeObject) {
    let b = o.bbox;
    let side = b.x2 - b.x1;
    let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
    let r = side / 2.0;
    let px = o.color.rgb();
    for py in b.y1 as u32..b.y2 as u32 {
        for pxl in b.x1 as u32..b.x2 as u32 {
            let (x, y) = (pxl as f64 + 0.5, py as f64 + 0.5);
            let inside = match o.kind {
                ShapeKind::Square => true,
                ShapeKind::Circle => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
                ShapeKind::Triangle => (x - cx).abs() <= (y - b.y1) / 2.0,
            };
            if inside {
                image.put_pixel(pxl, py, px);
            }
        }
    }
}
