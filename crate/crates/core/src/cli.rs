//! Command-line front end. [`run`] takes an argument vector so the whole
//! surface can be exercised from tests.

use std::io::Write;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::alignment::InferenceConfig;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_testset, write_report, EvalConfig};
use crate::inference::{draw_detections, infer};
use crate::model::{ModelConfig, Preset};
use crate::service::{serve, AppState};
use crate::shapegen::{generate_dataset, DatasetManifest, GenerationConfig, SplitCounts};
use crate::trainer::{load_checkpoint, train, TrainConfig, TrainOutputs};

#[derive(Debug, Parser)]
#[command(name = "textdet", about = "Text-conditioned object detection on synthetic shapes", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TRAIN,VAL,TEST (defaults to the preset's split sizes).
        #[arg(long)]
        counts: Option<SplitCounts>,
    },
    /// Train a model and write its checkpoint and loss log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the preset's epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Detect objects matching a query in one image; prints JSON.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 20)]
        top_k: usize,
        /// Write a copy of the image with the detections drawn on it.
        #[arg(long)]
        draw: Option<PathBuf>,
    },
    /// Serve the model over HTTP on 127.0.0.1.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

/// Run one command. `argv[0]` is the program name. Normal output goes to
/// `out`; help and version text count as success.
pub fn run<I, S>(argv: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            write!(out, "{e}").map_err(|e| Error::io("<stdout>", e))?;
            return Ok(());
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            return Err(Error::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    let say = |out: &mut dyn Write, line: String| writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e));
    match cli.command {
        Command::GenData {
            preset,
            out: dir,
            seed,
            counts,
        } => {
            let (gen, default_counts) = match preset {
                Preset::Paper => (GenerationConfig::paper(), SplitCounts::PAPER),
                Preset::Desk => (GenerationConfig::desk(), SplitCounts::DESK),
            };
            let m = generate_dataset(seed, counts.unwrap_or(default_counts), &gen, &dir)?;
            say(out, format!("wrote {} scenes to {}", m.records.len(), dir.display()))
        }
        Command::Train {
            data,
            preset,
            out: ckpt,
            seed,
            epochs,
        } => {
            let manifest = DatasetManifest::load(&data)?;
            let mut cfg = TrainConfig::preset(preset, seed);
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let outputs = TrainOutputs {
                checkpoint: Some(ckpt.clone()),
                loss_log: Some(loss_log_path(&ckpt)),
            };
            let (_, log) = train(&manifest, &ModelConfig::preset(preset), &cfg, &outputs)?;
            let last = log.records.last().expect("at least one epoch");
            say(
                out,
                format!(
                    "trained {} epochs: train rpn {:.4} align {:.4}, val rpn {:.4} align {:.4}; checkpoint {}",
                    last.epoch,
                    last.train_rpn,
                    last.train_align,
                    last.val_rpn,
                    last.val_align,
                    ckpt.display()
                ),
            )
        }
        Command::Eval { data, ckpt, report } => {
            let manifest = DatasetManifest::load(&data)?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let r = evaluate_testset(&model, &manifest, &EvalConfig::default())?;
            write_report(&r, &report)?;
            for (name, g) in [("all_proposals", &r.all_proposals), ("aligned", &r.aligned)] {
                say(
                    out,
                    format!(
                        "{name}: precision {:.4} recall {:.4} iou {:.4}",
                        g.mean_precision, g.mean_recall, g.mean_iou
                    ),
                )?;
            }
            match r.alignment_accuracy {
                Some(a) => say(out, format!("alignment_accuracy: {a:.4} ({} proposals)", r.alignment_samples)),
                None => say(out, "alignment_accuracy: n/a".into()),
            }
        }
        Command::Infer {
            ckpt,
            image,
            query,
            threshold,
            top_k,
            draw,
        } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let img = image::open(&image)
                .map_err(|e| Error::Image {
                    path: image.clone(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            let cfg = InferenceConfig {
                score_threshold: threshold,
                top_k,
            };
            let resp = infer(&model, &img, &query, &cfg)?;
            if let Some(path) = draw {
                draw_detections(&img, &resp.detections)
                    .save(&path)
                    .map_err(|e| Error::Image {
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
            }
            say(out, serde_json::to_string(&resp).expect("response serializes"))
        }
        Command::Serve { ckpt, data, port } => {
            let (model, metadata) = load_checkpoint(&ckpt)?;
            let dataset = data.map(DatasetManifest::load).transpose()?;
            let state = AppState {
                model,
                metadata,
                dataset,
            };
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("<tokio runtime>", e))?;
            rt.block_on(serve(state, SocketAddr::from((Ipv4Addr::LOCALHOST, port))))
        }
    }
}

/// Loss-log CSV written next to a checkpoint.
pub fn loss_log_path(ckpt: &std::path::Path) -> PathBuf {
    ckpt.with_extension("losses.csv")
}
