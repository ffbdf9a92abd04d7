//! Pretraining of the binding space and the locked / unlocked tuning
//! stages used by patching.
//!
//! Every stage minimizes the symmetric supervised-contrastive loss between
//! the binding encoder `f` (anchors) and a second encoder `h`. Gradients are
//! taken with respect to the unit-norm embeddings and chained back through
//! the normalization and the encoder layers by hand.

pub mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Accumulator, Optimizer, OptimizerKind};

use rayon::prelude::*;

use crate::encoders::{EncodeTrace, EncoderHandle, Modality, PrototypeTable, Record};
use crate::error::{Divergence, Error, Result};
use crate::inference::zero_shot_accuracy;
use crate::numcore::SeededRng;
use crate::objective::{sample_pseudo_negative_locations, supcon_clip_loss, ContrastiveBatch, LossConfig};
use crate::synthdata::MultimodalSample;

/// Training hyperparameters.
///
/// Defaults are desk-scale. The large-scale reference setup used batch 256
/// with 8 accumulation steps on two GPUs; none of that is needed here.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub grad_accumulation: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub temperature: f64,
    /// Uniform-sphere pseudo-negatives per batch when `h` is a location
    /// encoder.
    pub location_pseudo_negatives: usize,
    /// Start unlocked tuning of `h` from the locked result instead of a
    /// fresh initialization.
    pub unlocked_init_from_locked: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 3e-4,
            optimizer: OptimizerKind::Adam,
            grad_accumulation: 1,
            seed: 0,
            early_stop_patience: 5,
            temperature: 0.07,
            location_pseudo_negatives: 16,
            unlocked_init_from_locked: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be > 0".into()));
        }
        if self.grad_accumulation == 0 {
            return Err(Error::Config("train.grad_accumulation must be >= 1".into()));
        }
        self.loss_for(Modality::Image).validate()
    }

    /// Stable 64-bit digest of every field, stored in checkpoints.
    pub fn config_hash(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let text = format!(
            "epochs={};batch={};lr={:e};opt={};acc={};seed={};patience={};tau={:e};pn={};init_locked={}",
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.optimizer,
            self.grad_accumulation,
            self.seed,
            self.early_stop_patience,
            self.temperature,
            self.location_pseudo_negatives,
            self.unlocked_init_from_locked
        );
        let d = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    pub fn loss_for(&self, other: Modality) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            pseudo_negative_count: if other == Modality::Location {
                self.location_pseudo_negatives
            } else {
                0
            },
        }
    }
}

/// Aligned (anchor, other) records with species labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairedData {
    pub anchors: Vec<Record>,
    pub others: Vec<Record>,
    pub labels: Vec<usize>,
}

impl PairedData {
    /// Pairs `anchor` and `other` records; samples lacking either modality
    /// are skipped.
    pub fn from_samples<'a>(
        samples: impl IntoIterator<Item = &'a MultimodalSample>,
        anchor: Modality,
        other: Modality,
    ) -> Self {
        let mut out = PairedData::default();
        for s in samples {
            if let (Some(a), Some(o)) = (s.record(anchor), s.record(other)) {
                out.anchors.push(a);
                out.others.push(o);
                out.labels.push(s.label());
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean per-example training loss for each epoch run.
    pub train_loss: Vec<f64>,
    /// Mean per-example validation loss for each epoch run (empty without
    /// validation data).
    pub val_loss: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Updates {
    f: bool,
    h: bool,
}

/// Fixed chunking so the reduction order does not depend on thread count.
const GRAD_CHUNKS: usize = 8;

fn batch_param_grad(handle: &EncoderHandle, traces: &[EncodeTrace], grads: &[Vec<f64>]) -> Vec<f64> {
    let len = handle.params().len();
    let per = traces.len().div_ceil(GRAD_CHUNKS).max(1);
    let partial: Vec<Vec<f64>> = traces
        .par_chunks(per)
        .zip(grads.par_chunks(per))
        .map(|(ts, gs)| {
            let mut acc = vec![0.0; len];
            for (t, g) in ts.iter().zip(gs) {
                handle.backward(t, g, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; len];
    for p in partial {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

fn trace_all(handle: &EncoderHandle, records: &[&Record]) -> Result<Vec<EncodeTrace>> {
    records.par_iter().map(|r| handle.forward_trace(r)).collect()
}

/// Mean per-example loss over `data` in fixed-order batches.
pub fn mean_pair_loss(
    f: &EncoderHandle,
    h: &EncoderHandle,
    data: &PairedData,
    loss: &LossConfig,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Size("no paired examples".into()));
    }
    let z = f.encode_all(&data.anchors)?;
    let y = h.encode_all(&data.others)?;
    let cfg = LossConfig {
        pseudo_negative_count: 0,
        ..*loss
    };
    let mut total = 0.0;
    for start in (0..data.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(data.len());
        let batch = ContrastiveBatch::new(
            z[start..end].to_vec(),
            y[start..end].to_vec(),
            data.labels[start..end].to_vec(),
        );
        total += supcon_clip_loss(&batch, &cfg)?.loss;
    }
    Ok(total / data.len() as f64)
}

fn fit(
    f: &mut EncoderHandle,
    h: &mut EncoderHandle,
    train: &PairedData,
    val: &PairedData,
    cfg: &TrainConfig,
    updates: Updates,
    stage: &str,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Size(format!("{stage}: need at least 2 training pairs")));
    }
    let loss_cfg = cfg.loss_for(h.modality());
    let root = SeededRng::new(cfg.seed).fork_named(stage);
    let frozen_f = (!updates.f).then(|| f.params().fingerprint());
    let mut report = TrainReport::default();

    let cached_z = if updates.f {
        None
    } else {
        Some(f.encode_all(&train.anchors)?)
    };

    let mut opt_f = Optimizer::new(cfg.optimizer, cfg.learning_rate, f.params().len());
    let mut opt_h = Optimizer::new(cfg.optimizer, cfg.learning_rate, h.params().len());
    let mut acc_f = Accumulator::new(f.params().len(), cfg.grad_accumulation);
    let mut acc_h = Accumulator::new(h.params().len(), cfg.grad_accumulation);

    let mut best: Option<(f64, usize, EncoderHandle, EncoderHandle)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut erng = root.fork(epoch as u64);
        erng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        let batches: Vec<&[usize]> = order
            .chunks(cfg.batch_size)
            .filter(|b| b.len() >= 2)
            .collect();
        let last = batches.len().saturating_sub(1);

        for (bi, idx) in batches.into_iter().enumerate() {
            let anchors: Vec<&Record> = idx.iter().map(|&i| &train.anchors[i]).collect();
            let others: Vec<&Record> = idx.iter().map(|&i| &train.others[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();

            let (z, f_traces) = match &cached_z {
                Some(cache) => (idx.iter().map(|&i| cache[i].clone()).collect(), Vec::new()),
                None => {
                    let t = trace_all(f, &anchors)?;
                    (t.iter().map(|t| t.embedding().to_vec()).collect(), t)
                }
            };
            let y_traces = trace_all(h, &others)?;
            let pseudo_records = sample_pseudo_negative_locations(loss_cfg.pseudo_negative_count, &mut erng);
            let pseudo_refs: Vec<&Record> = pseudo_records.iter().collect();
            let pn_traces = trace_all(h, &pseudo_refs)?;

            let mut batch = ContrastiveBatch::new(
                z,
                y_traces.iter().map(|t| t.embedding().to_vec()).collect(),
                labels,
            );
            batch.pseudo_negatives = pn_traces.iter().map(|t| t.embedding().to_vec()).collect();
            let out = supcon_clip_loss(&batch, &loss_cfg)?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence(Box::new(Divergence {
                    epoch,
                    step: report.steps,
                    last_good: vec![f.params().clone(), h.params().clone()],
                })));
            }
            epoch_loss += out.loss;
            epoch_count += idx.len();

            let flush = bi == last;
            if updates.f {
                let g = batch_param_grad(f, &f_traces, &out.grad_z);
                if acc_f.add(&g) || (flush && acc_f.has_pending()) {
                    opt_f.step(f.params_mut().values_mut(), &acc_f.take());
                }
            }
            if updates.h {
                let mut traces = y_traces;
                traces.extend(pn_traces);
                let mut grads = out.grad_y;
                grads.extend(out.grad_pseudo);
                let g = batch_param_grad(h, &traces, &grads);
                if acc_h.add(&g) || (flush && acc_h.has_pending()) {
                    opt_h.step(h.params_mut().values_mut(), &acc_h.take());
                }
            }
            report.steps += 1;
        }

        if let Some(fp) = &frozen_f {
            if &f.params().fingerprint() != fp {
                return Err(Error::Verification(format!(
                    "{stage}: frozen binding encoder changed during epoch {epoch}"
                )));
            }
        }

        report.train_loss.push(epoch_loss / epoch_count.max(1) as f64);
        if val.len() >= 2 {
            let v = mean_pair_loss(f, h, val, &loss_cfg, cfg.batch_size)?;
            report.val_loss.push(v);
            if best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, epoch, f.clone(), h.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                    log::debug!("{stage}: early stop after epoch {epoch}");
                    break;
                }
            }
        }
        log::debug!(
            "{stage}: epoch {epoch} train {:.5} val {:?}",
            report.train_loss.last().unwrap(),
            report.val_loss.last()
        );
    }

    if let Some((_, epoch, bf, bh)) = best {
        if cfg.early_stop_patience > 0 {
            report.best_epoch = Some(epoch);
            if updates.f {
                *f = bf;
            }
            if updates.h {
                *h = bh;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub image: EncoderHandle,
    pub prototypes: PrototypeTable,
    pub report: TrainReport,
    pub val_accuracy: Option<f64>,
}

/// Trains an image encoder and per-species text prototypes jointly, creating
/// the binding space every other modality is later tuned against.
pub fn pretrain_binding(
    image: EncoderHandle,
    prototypes: PrototypeTable,
    train: &[&MultimodalSample],
    val: &[&MultimodalSample],
    cfg: &TrainConfig,
) -> Result<PretrainOutput> {
    if image.modality() != Modality::Image {
        return Err(Error::TypeMismatch("pretraining needs an image encoder".into()));
    }
    let train_pairs = PairedData::from_samples(train.iter().copied(), Modality::Image, Modality::Text);
    let val_pairs = PairedData::from_samples(val.iter().copied(), Modality::Image, Modality::Text);
    let mut f = image;
    let mut h = EncoderHandle::text(&prototypes);
    let report = fit(
        &mut f,
        &mut h,
        &train_pairs,
        &val_pairs,
        cfg,
        Updates { f: true, h: true },
        "pretrain",
    )?;
    let prototypes = h.prototype_table().expect("text handle");
    let val_accuracy = if val.is_empty() {
        None
    } else {
        Some(zero_shot_accuracy(&f, &prototypes, val, Modality::Image)?)
    };
    Ok(PretrainOutput {
        image: f,
        prototypes,
        report,
        val_accuracy,
    })
}

/// Trains `h` against a frozen binding encoder `f`.
pub fn locked_tune(
    f: &EncoderHandle,
    h: EncoderHandle,
    train: &PairedData,
    val: &PairedData,
    cfg: &TrainConfig,
) -> Result<(EncoderHandle, TrainReport)> {
    let mut frozen = f.clone();
    let mut h = h;
    let stage = format!("locked.{}", h.modality());
    let report = fit(
        &mut frozen,
        &mut h,
        train,
        val,
        cfg,
        Updates { f: false, h: true },
        &stage,
    )?;
    debug_assert!(frozen == *f);
    Ok((h, report))
}

/// Full finetuning of both `f` and `h`.
pub fn unlocked_tune(
    f: &EncoderHandle,
    h: EncoderHandle,
    train: &PairedData,
    val: &PairedData,
    cfg: &TrainConfig,
) -> Result<(EncoderHandle, EncoderHandle, TrainReport)> {
    let mut f = f.clone();
    let mut h = h;
    let stage = format!("unlocked.{}", h.modality());
    let report = fit(
        &mut f,
        &mut h,
        train,
        val,
        cfg,
        Updates { f: true, h: true },
        &stage,
    )?;
    Ok((f, h, report))
}
