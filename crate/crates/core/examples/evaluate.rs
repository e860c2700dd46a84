//! Evaluate a checkpoint on a dataset's test split and print both metric
//! groups with the IoU histogram.
//!
//! ```text
//! cargo run --release --example evaluate -- DATA_DIR MODEL.tdck
//! ```

use textdet::evaluator::{evaluate_testset, EvalConfig};
use textdet::shapegen::DatasetManifest;
use textdet::trainer::load_checkpoint;

fn main() -> textdet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [data, ckpt] = args.as_slice() else {
        eprintln!("usage: evaluate DATA_DIR MODEL.tdck");
        std::process::exit(2);
    };
    let manifest = DatasetManifest::load(data)?;
    let (model, _) = load_checkpoint(ckpt)?;
    let report = evaluate_testset(&model, &manifest, &EvalConfig::default())?;
    println!("{} test images", report.images);
    for (name, g) in [("all proposals", &report.all_proposals), ("aligned", &report.aligned)] {
        println!(
            "{name}: precision {:.3} recall {:.3} mean IoU {:.3} over {} matches",
            g.mean_precision, g.mean_recall, g.mean_iou, g.matched_pairs
        );
        print!("{}", g.iou_histogram.to_csv());
    }
    match report.alignment_accuracy {
        Some(a) => println!("alignment accuracy {a:.3} over {} proposals", report.alignment_samples),
        None => println!("no proposal matched a ground-truth box"),
    }
    Ok(())
}
