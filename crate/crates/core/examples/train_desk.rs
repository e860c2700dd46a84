//! Generate the desk dataset, train for the preset schedule and evaluate on
//! the test split.
//!
//! ```text
//! cargo run --release --example train_desk -- [WORK_DIR] [TRAIN,VAL,TEST]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use textdet::evaluator::{evaluate_testset, write_report, EvalConfig};
use textdet::model::{ModelConfig, Preset};
use textdet::shapegen::{generate_dataset, GenerationConfig, SplitCounts};
use textdet::trainer::{train, TrainConfig, TrainOutputs};

fn main() -> textdet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "desk_run".into()));
    let counts: SplitCounts = match args.next() {
        Some(c) => c.parse()?,
        None => SplitCounts::DESK,
    };

    let t0 = Instant::now();
    let manifest = generate_dataset(0, counts, &GenerationConfig::desk(), work.join("data"))?;
    println!("generated {} scenes in {:.1?}", manifest.records.len(), t0.elapsed());

    let t1 = Instant::now();
    let outputs = TrainOutputs {
        checkpoint: Some(work.join("model.tdck")),
        loss_log: Some(work.join("losses.csv")),
    };
    let (model, log) = train(
        &manifest,
        &ModelConfig::preset(Preset::Desk),
        &TrainConfig::preset(Preset::Desk, 0),
        &outputs,
    )?;
    println!("trained in {:.1?}", t1.elapsed());
    print!("{}", log.to_csv());

    let t2 = Instant::now();
    let report = evaluate_testset(&model, &manifest, &EvalConfig::default())?;
    write_report(&report, work.join("report.json"))?;
    println!("evaluated in {:.1?}", t2.elapsed());
    for (name, g) in [("all proposals", &report.all_proposals), ("aligned", &report.aligned)] {
        println!(
            "{name:>14}: precision {:.3} recall {:.3} iou {:.3}",
            g.mean_precision, g.mean_recall, g.mean_iou
        );
    }
    println!("alignment accuracy: {:?} over {} proposals", report.alignment_accuracy, report.alignment_samples);
    Ok(())
}
