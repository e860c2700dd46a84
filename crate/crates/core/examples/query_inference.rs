//! Run a text query against a trained checkpoint and save an overlay.
//!
//! ```text
//! cargo run --release --example query_inference -- MODEL.tdck IMAGE.png "red circles" [OUT.png]
//! ```

use textdet::alignment::InferenceConfig;
use textdet::inference::{draw_detections, infer};
use textdet::trainer::load_checkpoint;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [ckpt, image, query, rest @ ..] = args.as_slice() else {
        eprintln!("usage: query_inference MODEL.tdck IMAGE.png QUERY [OUT.png]");
        std::process::exit(2);
    };
    let (model, meta) = load_checkpoint(ckpt)?;
    println!("checkpoint from epoch {} (seed {})", meta.epoch, meta.seed);
    let img = image::open(image)?.to_rgb8();
    let resp = infer(&model, &img, query, &InferenceConfig::default())?;
    println!("{} detections in {:.1} ms", resp.detections.len(), resp.timing_ms);
    for d in &resp.detections {
        let b = d.bbox;
        println!(
            "  [{:.1},{:.1},{:.1},{:.1}] score {:.3} = confidence {:.3} x alignment {:.3}",
            b.x1, b.y1, b.x2, b.y2, d.score, d.confidence, d.alignment
        );
    }
    let out = rest.first().map_or("detections.png", String::as_str);
    draw_detections(&img, &resp.detections).save(out)?;
    println!("overlay written to {out}");
    Ok(())
}
