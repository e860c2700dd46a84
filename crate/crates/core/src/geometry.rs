//! Axis-aligned box arithmetic: IoU, anchor-relative regression
//! coefficients, anchor lattices, clipping and greedy NMS.
//!
//! Coordinates are image pixels with the origin at the top-left corner.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corner-form box. Serialized as `[x1, y1, x2, y2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BoxXYXY {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        BoxXYXY { x1, y1, x2, y2 }
    }
}

impl From<BoxXYXY> for [f64; 4] {
    fn from(b: BoxXYXY) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxXYXY { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_cxcywh(&self) -> BoxCXCYWH {
        BoxCXCYWH {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }
}

/// Center-form box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCXCYWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCXCYWH {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCXCYWH { cx, cy, w, h }
    }

    pub fn to_xyxy(&self) -> BoxXYXY {
        BoxXYXY {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }
}

/// Anchor-relative box offsets `(tx, ty, tw, th)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl RegressionTarget {
    pub const ZERO: RegressionTarget = RegressionTarget {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array([tx, ty, tw, th]: [f64; 4]) -> Self {
        RegressionTarget { tx, ty, tw, th }
    }
}

/// One square anchor per feature cell, listed row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub anchors: Vec<BoxCXCYWH>,
    pub feature_stride: usize,
    pub anchor_size: f64,
    /// Feature cells per side.
    pub cells: usize,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn boxes_xyxy(&self) -> Vec<BoxXYXY> {
        self.anchors.iter().map(BoxCXCYWH::to_xyxy).collect()
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn encode_box(gt: &BoxCXCYWH, anchor: &BoxCXCYWH) -> Result<RegressionTarget> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ground-truth box must have positive size, got {}x{}",
            gt.w, gt.h
        )));
    }
    if !(anchor.w > 0.0 && anchor.h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "anchor must have positive size, got {}x{}",
            anchor.w, anchor.h
        )));
    }
    Ok(RegressionTarget {
        tx: (gt.cx - anchor.cx) / anchor.w,
        ty: (gt.cy - anchor.cy) / anchor.h,
        tw: (gt.w / anchor.w).ln(),
        th: (gt.h / anchor.h).ln(),
    })
}

pub fn decode_box(t: &RegressionTarget, anchor: &BoxCXCYWH) -> BoxCXCYWH {
    BoxCXCYWH {
        cx: t.tx * anchor.w + anchor.cx,
        cy: t.ty * anchor.h + anchor.cy,
        w: anchor.w * t.tw.exp(),
        h: anchor.h * t.th.exp(),
    }
}

pub fn build_anchor_grid(image_size: usize, feature_stride: usize, anchor_size: f64) -> Result<AnchorGrid> {
    if feature_stride == 0 || !image_size.is_multiple_of(feature_stride) {
        return Err(Error::InvalidArgument(format!(
            "image size {image_size} is not divisible by feature stride {feature_stride}"
        )));
    }
    if anchor_size.is_nan() || anchor_size <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "anchor size must be positive, got {anchor_size}"
        )));
    }
    let cells = image_size / feature_stride;
    let s = feature_stride as f64;
    let anchors = (0..cells)
        .flat_map(|r| {
            (0..cells).map(move |c| {
                BoxCXCYWH::new((c as f64 + 0.5) * s, (r as f64 + 0.5) * s, anchor_size, anchor_size)
            })
        })
        .collect();
    Ok(AnchorGrid {
        anchors,
        feature_stride,
        anchor_size,
        cells,
    })
}

pub fn clip_box(b: &BoxXYXY, image_size: f64) -> BoxXYXY {
    let c = |v: f64| v.clamp(0.0, image_size);
    let (x1, x2) = (c(b.x1), c(b.x2));
    let (y1, y2) = (c(b.y1), c(b.y2));
    BoxXYXY {
        x1: x1.min(x2),
        y1: y1.min(y2),
        x2: x2.max(x1),
        y2: y2.max(y1),
    }
}

/// Indices sorted by score descending, ties by lower index.
pub(crate) fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy non-maximum suppression. Returns kept indices, highest score
/// first; a box is dropped when its IoU with a kept box exceeds
/// `iou_threshold`.
pub fn nms(boxes: &[BoxXYXY], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let order = order_by_score(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
