//! Slow, literal reference implementations used as independent oracles.

use textdet::geometry::{BoxXYXY, RegressionTarget};

/// Label of one anchor under the literal rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RefLabel {
    Positive { gt: usize },
    Negative,
    Ignore,
}

/// Intersection over union from the four edges, written independently of
/// the library.
pub fn ref_iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// IoU by counting unit pixels covered by each box.
pub fn raster_iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inside = |bx: &BoxXYXY, x: f64, y: f64| x >= bx.x1 && x < bx.x2 && y >= bx.y1 && y < bx.y2;
    let lo_x = a.x1.min(b.x1).floor() as i64;
    let hi_x = a.x2.max(b.x2).ceil() as i64;
    let lo_y = a.y1.min(b.y1).floor() as i64;
    let hi_y = a.y2.max(b.y2).ceil() as i64;
    let (mut inter, mut union) = (0u64, 0u64);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let (ia, ib) = (inside(a, cx, cy), inside(b, cx, cy));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Suppression by exhaustive rescans: pick the best remaining box, drop
/// everything that overlaps it too much, repeat.
pub fn ref_nms(boxes: &[BoxXYXY], scores: &[f64], threshold: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && ref_iou(&boxes[b], &boxes[i]) > threshold {
                alive[i] = false;
            }
        }
    }
    keep
}

/// Anchor labels straight from the rules: (i) an anchor with the highest
/// IoU for some GT is positive, (ii) an anchor whose IoU with any GT
/// exceeds `pos` is positive, an anchor below `neg` for every GT is
/// negative, everything else is ignored.
pub fn ref_anchor_labels(anchors: &[BoxXYXY], gts: &[BoxXYXY], pos: f64, neg: f64) -> Vec<RefLabel> {
    let m = |i: usize, j: usize| ref_iou(&anchors[i], &gts[j]);
    (0..anchors.len())
        .map(|i| {
            let rule_ii = (0..gts.len()).any(|j| m(i, j) > pos);
            let rule_i = (0..gts.len()).any(|j| {
                let v = m(i, j);
                v > 0.0 && (0..anchors.len()).all(|k| m(k, j) <= v)
            });
            if rule_i || rule_ii {
                // matched GT: highest IoU, first on ties
                let gt = (0..gts.len()).fold(0, |b, j| if m(i, j) > m(i, b) { j } else { b });
                RefLabel::Positive { gt }
            } else if (0..gts.len()).all(|j| m(i, j) < neg) {
                RefLabel::Negative
            } else {
                RefLabel::Ignore
            }
        })
        .collect()
}

/// Whether input cell `i` of `n` falls in output bin `o` of `out`: the cell
/// `[i, i+1)` overlaps the bin `[o n/out, (o+1) n/out)`.
fn in_bin(i: usize, o: usize, n: usize, out: usize) -> bool {
    o * n < (i + 1) * out && i * out < (o + 1) * n
}

/// Adaptive max pooling of `[C,H,W]` (row-major) to `[C,oh,ow]` by
/// scanning every input cell for every output bin.
pub fn ref_adaptive_pool(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for y in 0..h {
                    for xx in 0..w {
                        if in_bin(y, oy, h, oh) && in_bin(xx, ox, w, ow) {
                            best = best.max(x[(ch * h + y) * w + xx]);
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// ROI pooling by cropping every cell the box touches, then pooling the
/// crop.
pub fn ref_roi_pool(x: &[f64], c: usize, n: usize, stride: usize, b: &BoxXYXY, out: usize) -> Vec<f64> {
    let s = stride as f64;
    let touches = |k: usize, lo: f64, hi: f64| (k as f64) * s < hi && (k as f64 + 1.0) * s > lo;
    let rows: Vec<usize> = (0..n).filter(|&r| touches(r, b.y1, b.y2)).collect();
    let cols: Vec<usize> = (0..n).filter(|&q| touches(q, b.x1, b.x2)).collect();
    let (h, w) = (rows.len(), cols.len());
    let mut crop = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for &r in &rows {
            for &q in &cols {
                crop.push(x[(ch * n + r) * n + q]);
            }
        }
    }
    ref_adaptive_pool(&crop, c, h, w, out, out)
}

/// Regression coefficients written directly from corner boxes.
pub fn ref_encode(gt: &BoxXYXY, anchor: &BoxXYXY) -> RegressionTarget {
    let (aw, ah) = (anchor.x2 - anchor.x1, anchor.y2 - anchor.y1);
    let (gw, gh) = (gt.x2 - gt.x1, gt.y2 - gt.y1);
    RegressionTarget::from_array([
        ((gt.x1 + gt.x2) / 2.0 - (anchor.x1 + anchor.x2) / 2.0) / aw,
        ((gt.y1 + gt.y2) / 2.0 - (anchor.y1 + anchor.y2) / 2.0) / ah,
        (gw / aw).ln(),
        (gh / ah).ln(),
    ])
}

/// Greedy matching by exhaustive search: walk predictions by score, give
/// each the unclaimed GT of highest IoU at or above the threshold. Returns
/// `(pred, gt, iou)` triples.
pub fn ref_match(preds: &[BoxXYXY], scores: &[f64], gts: &[BoxXYXY], threshold: f64) -> Vec<(usize, usize, f64)> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut claimed = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = ref_iou(&preds[p], gt);
            if !claimed[g] && v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            claimed[g] = true;
            pairs.push((p, g, v));
        }
    }
    pairs
}
