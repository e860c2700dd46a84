//! Anchor labeling and proposal extraction on one generated scene.

use textdet::geometry::{build_anchor_grid, iou};
use textdet::rpn::{assign_anchor_labels, extract_proposals, sample_minibatch, AnchorLabel, ProposalConfig, RpnLossConfig};
use textdet::shapegen::{generate_example, GenerationConfig};

fn main() -> textdet::Result<()> {
    let scene = generate_example(42, &GenerationConfig::desk())?;
    let gts = scene.gt_boxes();
    let grid = build_anchor_grid(128, 8, 16.0)?;
    let labels = assign_anchor_labels(&grid, &gts, &RpnLossConfig::default())?;

    let positives = labels.iter().filter(|l| l.is_positive()).count();
    let negatives = labels.iter().filter(|l| l.is_negative()).count();
    println!(
        "{} anchors for {} objects: {positives} positive, {negatives} negative, {} ignored",
        grid.len(),
        gts.len(),
        labels.len() - positives - negatives
    );
    for (i, l) in labels.iter().enumerate() {
        if let AnchorLabel::Positive { gt, target } = l {
            let a = grid.anchors[i].to_xyxy();
            println!("  anchor {i:>3} -> object {gt:>2}  iou {:.2}  target {:?}", iou(&a, &gts[*gt]), target.to_array());
        }
    }
    let batch = sample_minibatch(&labels, 1);
    println!("balanced minibatch of {} anchors", batch.len());

    // objectness from overlap with the nearest object stands in for a
    // trained head
    let objectness: Vec<f64> = grid
        .boxes_xyxy()
        .iter()
        .map(|a| gts.iter().map(|g| iou(a, g)).fold(0.0, f64::max) * 0.5 + 0.5)
        .collect();
    let regression = vec![0.0; 4 * grid.len()];
    let proposals = extract_proposals(&objectness, &regression, &grid, 128.0, &ProposalConfig::default());
    println!("{} proposals after threshold and NMS; best five:", proposals.len());
    for p in proposals.iter().take(5) {
        let b = p.bbox;
        println!("  [{:.0},{:.0},{:.0},{:.0}] confidence {:.3}", b.x1, b.y1, b.x2, b.y2, p.confidence);
    }
    Ok(())
}
