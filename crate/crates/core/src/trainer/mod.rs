//! Joint training of the proposal network and the alignment model with
//! momentum SGD and a step learning-rate schedule.

mod checkpoint;

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::align_loss;
use crate::backbone::image_to_tensor;
use crate::error::{Error, Result};
use crate::geometry::BoxXYXY;
use crate::model::{Model, ModelConfig, Preset};
use crate::nn::{ParamSet, Session};
use crate::proposal_encoder::roi_pool;
use crate::rpn::{assign_anchor_labels, rpn_loss, sample_minibatch, AnchorLabel};
use crate::shapegen::{DatasetManifest, SceneExample, Split};
use crate::tensor::Element;
use crate::text_encoder::{tokenize, TokenSequence, Vocabulary};

pub use checkpoint::{
    decode_checkpoint, decode_header, encode_checkpoint, load_checkpoint, load_checkpoint_expecting,
    save_checkpoint, CheckpointHeader, CheckpointMetadata, TensorEntry, MAGIC, VERSION,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub seed: u64,
    pub preset: Preset,
}

impl TrainConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: match preset {
                Preset::Paper => 32,
                Preset::Desk => 16,
            },
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-5,
            lr_step: 3,
            lr_gamma: 0.9,
            seed,
            preset,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.lr > 0.0
            && self.momentum >= 0.0
            && self.weight_decay >= 0.0
            && self.lr_step > 0
            && self.lr_gamma > 0.0
            && self.lr_gamma <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training configuration {self:?}")))
        }
    }
}

/// `base · gamma^floor(epoch / step)`, rounded to 12 significant digits so
/// decimal hyperparameters give the decimal rate (0.01 · 0.9 is 9e-3, not
/// the product's rounding residue).
pub fn step_lr(epoch: usize, base: f64, step: usize, gamma: f64) -> f64 {
    let raw = base * gamma.powi((epoch / step.max(1)) as i32);
    format!("{raw:.11e}").parse().unwrap_or(raw)
}

/// Momentum state for [`sgd_update`], one buffer per parameter.
#[derive(Clone, Debug)]
pub struct Velocity<T>(Vec<Vec<T>>);

impl<T: Element> Velocity<T> {
    pub fn zeros(params: &ParamSet<T>) -> Self {
        Velocity(params.iter().map(|(_, p)| vec![T::zero(); p.tensor.len()]).collect())
    }
}

/// `g = grad + wd·w` (decayed parameters only), `v = m·v + g`, `w -= lr·v`.
/// Missing gradients count as zero.
pub fn sgd_update<T: Element>(
    params: &mut ParamSet<T>,
    grads: &[Option<Vec<T>>],
    velocity: &mut Velocity<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, m, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut velocity.0) {
        let decay = if p.decay { wd } else { T::zero() };
        let w = p.tensor.data_mut();
        for i in 0..w.len() {
            let gi = g.as_ref().map_or(T::zero(), |g| g[i]) + decay * w[i];
            v[i] = m * v[i] + gi;
            w[i] = w[i] - lr * v[i];
        }
    }
}

/// A scene prepared for training.
#[derive(Clone, Debug)]
pub struct TrainExample {
    /// Manifest index; seeds the negative sampling.
    pub index: usize,
    pub image: image::RgbImage,
    pub gt: Vec<BoxXYXY>,
    pub aligned: Vec<bool>,
    pub tokens: TokenSequence,
}

impl TrainExample {
    pub fn new(index: usize, ex: &SceneExample, vocab: &Vocabulary, max_len: usize) -> Self {
        TrainExample {
            index,
            image: ex.image.clone(),
            gt: ex.gt_boxes(),
            aligned: ex.aligned.clone(),
            tokens: tokenize(&ex.query.text, vocab, max_len),
        }
    }
}

/// Losses of one example and, when recorded, parameter gradients.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub rpn_loss: f64,
    /// `None` when the example produced no positive anchor.
    pub align_loss: Option<f64>,
    pub grads: Option<Vec<Option<Vec<T>>>>,
}

/// Forward (and with `track_grad`, backward) one example. Alignment is
/// trained on the positive anchors' own boxes, labeled by the alignment
/// flag of the ground truth each anchor matched. Returns `None` when no
/// anchor was sampled.
pub fn train_step<T: Element>(
    model: &Model<T>,
    ex: &TrainExample,
    sample_seed: u64,
    track_grad: bool,
) -> Result<Option<StepOutput<T>>> {
    let labels = assign_anchor_labels(&model.grid, &ex.gt, &model.config.rpn.loss)?;
    let sampled = sample_minibatch(&labels, sample_seed);
    if sampled.is_empty() {
        return Ok(None);
    }
    model.check_image(&ex.image)?;
    let mut s = Session::new(&model.params, track_grad);
    let x = s.input(image_to_tensor(&ex.image));
    let fm = model.backbone.forward(&mut s, x)?;
    let pred = model.rpn.forward(&mut s, &fm, &model.grid)?;
    let rpn = rpn_loss(&mut s, &pred, &labels, &sampled, &model.config.rpn.loss)?;

    let mut boxes = Vec::new();
    let mut targets = Vec::new();
    for &i in &sampled {
        if let AnchorLabel::Positive { gt, .. } = labels[i] {
            boxes.push(model.grid.anchors[i].to_xyxy());
            targets.push(ex.aligned[gt]);
        }
    }
    let mut total = rpn.total;
    let mut align_value = None;
    if !boxes.is_empty() {
        let rois = roi_pool(&mut s, &fm, &boxes, model.config.proposal.roi_output)?;
        let emb = model.proposal.encode(&mut s, rois)?;
        let text = model.text.encode(&mut s, &ex.tokens)?;
        let align = model.alignment.forward(&mut s, emb, text)?;
        let loss = align_loss(&mut s, align, &targets)?;
        align_value = Some(s.graph.data(loss)[0].to_f64_lossy());
        total = s.graph.add(total, loss)?;
    } else {
        log::debug!("example {}: no positive anchors, alignment skipped", ex.index);
    }
    let rpn_value = s.graph.data(rpn.total)[0].to_f64_lossy();
    let grads = if track_grad {
        s.graph.backward(total)?;
        Some(s.param_grads())
    } else {
        None
    };
    Ok(Some(StepOutput {
        rpn_loss: rpn_value,
        align_loss: align_value,
        grads,
    }))
}

/// Losses of every contributing example of a batch and their mean
/// gradient.
#[derive(Clone, Debug)]
pub struct BatchGradients<T> {
    pub outputs: Vec<StepOutput<T>>,
    pub mean_grads: Vec<Option<Vec<T>>>,
}

/// Run `train_step` over `(example, sampling seed)` pairs and average the
/// gradients over the examples that sampled at least one anchor. `None` if
/// none did.
pub fn batch_gradients<'a, T: Element>(
    model: &Model<T>,
    items: impl IntoIterator<Item = (&'a TrainExample, u64)>,
) -> Result<Option<BatchGradients<T>>> {
    let mut sum: Vec<Option<Vec<T>>> = vec![None; model.params.len()];
    let mut outputs = Vec::new();
    for (ex, seed) in items {
        let Some(mut out) = train_step(model, ex, seed, true)? else {
            log::warn!("example {} has no sampled anchors; skipped", ex.index);
            continue;
        };
        for (acc, g) in sum.iter_mut().zip(out.grads.take().expect("gradients were tracked")) {
            let Some(g) = g else { continue };
            match acc {
                Some(a) => a.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                None => *acc = Some(g),
            }
        }
        outputs.push(out);
    }
    if outputs.is_empty() {
        return Ok(None);
    }
    let inv = T::one() / T::from_usize(outputs.len()).expect("batch size fits");
    for g in sum.iter_mut().flatten() {
        g.iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok(Some(BatchGradients {
        outputs,
        mean_grads: sum,
    }))
}

/// Deterministic per-(run, epoch, example) sampling seed.
pub fn sample_seed(run_seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z = run_seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).rotate_left(32);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_rpn: f64,
    pub train_align: f64,
    pub val_rpn: f64,
    pub val_align: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<EpochRecord>,
}

impl LossLog {
    pub const HEADER: &'static str = "epoch,train_rpn,train_align,val_rpn,val_align";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_rpn, r.train_align, r.val_rpn, r.val_align
            ));
        }
        out
    }
}

/// Where `train` writes its artifacts after every epoch.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Running {
    rpn: f64,
    rpn_n: usize,
    align: f64,
    align_n: usize,
}

impl Running {
    fn add(&mut self, out: &StepOutput<impl Element>) {
        self.rpn += out.rpn_loss;
        self.rpn_n += 1;
        if let Some(a) = out.align_loss {
            self.align += a;
            self.align_n += 1;
        }
    }

    fn means(&self) -> (f64, f64) {
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        (mean(self.rpn, self.rpn_n), mean(self.align, self.align_n))
    }
}

pub fn load_split(manifest: &DatasetManifest, split: Split, vocab: &Vocabulary, max_len: usize) -> Result<Vec<TrainExample>> {
    manifest
        .split(split)
        .map(|(i, rec)| Ok(TrainExample::new(i, &manifest.load_example(rec)?, vocab, max_len)))
        .collect()
}

/// Train a fresh model on the manifest's train split, validating on its
/// val split after every epoch.
pub fn train(
    manifest: &DatasetManifest,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<(Model<f32>, LossLog)> {
    cfg.validate()?;
    let vocab = Vocabulary::default();
    let mut model = Model::<f32>::new(model_cfg, vocab.clone(), cfg.seed)?;
    let max_len = model_cfg.text.max_len;
    let train_set = load_split(manifest, Split::Train, &vocab, max_len)?;
    let val_set = load_split(manifest, Split::Val, &vocab, max_len)?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val_set.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }

    let mut velocity = Velocity::zeros(&model.params);
    let mut log = LossLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = step_lr(epoch, cfg.lr, cfg.lr_step, cfg.lr_gamma);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut running = Running::default();
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items = chunk.iter().map(|&k| {
                let ex = &train_set[k];
                (ex, sample_seed(cfg.seed, epoch, ex.index))
            });
            let Some(step) = batch_gradients(&model, items)? else {
                continue;
            };
            for out in &step.outputs {
                if !out.rpn_loss.is_finite() || out.align_loss.is_some_and(|a| !a.is_finite()) {
                    return Err(Error::NonFiniteLoss { epoch, batch });
                }
                running.add(out);
            }
            sgd_update(&mut model.params, &step.mean_grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay);
        }

        let mut val = Running::default();
        for ex in &val_set {
            if let Some(out) = train_step(&model, ex, sample_seed(cfg.seed, epoch, ex.index), false)? {
                val.add(&out);
            }
        }
        let (train_rpn, train_align) = running.means();
        let (val_rpn, val_align) = val.means();
        let record = EpochRecord {
            epoch: epoch + 1,
            train_rpn,
            train_align,
            val_rpn,
            val_align,
        };
        log::info!(
            "epoch {}: lr {lr:.5} train rpn {train_rpn:.4} align {train_align:.4} | val rpn {val_rpn:.4} align {val_align:.4}",
            epoch + 1
        );
        log.records.push(record);
        let meta = CheckpointMetadata {
            epoch: epoch + 1,
            seed: cfg.seed,
            train_rpn: Some(train_rpn),
            train_align: Some(train_align),
            val_rpn: Some(val_rpn),
            val_align: Some(val_align),
        };
        if let Some(path) = &outputs.checkpoint {
            save_checkpoint(path, &model, &meta)?;
        }
        if let Some(path) = &outputs.loss_log {
            let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            f.write_all(log.to_csv().as_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok((model, log))
}
