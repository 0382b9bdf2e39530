//! Optimisation loop: class-weighted loss, Adam, crop augmentation, learning
//! rate schedules, early stopping and checkpoint retention.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{half_crops, prepare_batch, random_crop, CropSchedule, SeriesRecord};
use crate::error::{ensure, invalid, Error, Result};
use crate::eval::{auroc_ovr, predict_records};
use crate::model::{LengthPolicy, Model};
use crate::params::{Forward, Mode, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Checkpoint;

/// `w_c = total / (N * count_c)`; a balanced label set gives all ones.
pub fn class_weights(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        ensure!(y < classes, "label {y} out of range for {classes} classes");
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(invalid!("class {c} has no training samples"));
    }
    let total = labels.len() as f64;
    Ok(counts
        .iter()
        .map(|&n| total / (classes as f64 * n as f64))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place. `step` is the
/// 1-based update count. Weight decay is applied to the parameters directly
/// as `lr * wd * p`, not through the gradient.
pub fn adam_step<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    m: &mut [S],
    v: &mut [S],
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    assert!(step >= 1, "Adam steps are 1-based");
    assert!(params.len() == grads.len() && m.len() == grads.len() && v.len() == grads.len());
    let b1 = S::from_f64_lossy(cfg.beta1);
    let b2 = S::from_f64_lossy(cfg.beta2);
    let one = S::one();
    let c1 = S::from_f64_lossy(1.0 - cfg.beta1.powi(step as i32));
    let c2 = S::from_f64_lossy(1.0 - cfg.beta2.powi(step as i32));
    let lr_s = S::from_f64_lossy(lr);
    let eps = S::from_f64_lossy(cfg.eps);
    let decay = S::from_f64_lossy(lr * cfg.weight_decay);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        params[i] -= lr_s * mh / (vh.sqrt() + eps) + decay * params[i];
    }
}

/// Adam moments for every trainable tensor of a store.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, config: AdamConfig) -> Self {
        let shape = |_: ()| -> Vec<Vec<S>> {
            store
                .iter()
                .map(|(_, p)| if p.trainable { vec![S::zero(); p.tensor.len()] } else { vec![] })
                .collect()
        };
        Self {
            config,
            step: 0,
            m: shape(()),
            v: shape(()),
        }
    }

    /// Applies the accumulated gradients; parameters without one are left
    /// alone (their moments are not advanced either).
    pub fn update(&mut self, store: &mut ParamStore<S>, lr: f64) {
        self.step += 1;
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let Some(g) = p.tensor.grad().map(<[S]>::to_vec) else {
                continue;
            };
            adam_step(p.tensor.data_mut(), &g, m, v, self.step, lr, &self.config);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Multiply by `factor` after `patience` epochs without a new best
    /// validation loss, never going below the minimum rate.
    Plateau { patience: usize, factor: f64 },
    /// Multiply by `factor` once, at the start of epoch `at`.
    Step { at: usize, factor: f64 },
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    /// Keep the checkpoint with the lowest validation loss.
    Loss,
    /// Keep the checkpoint with the highest validation AUROC.
    Auroc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationViews {
    /// Each validation record as is.
    Original,
    /// The record plus its first and latter half crops.
    OriginalAndHalves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub schedule: LrSchedule,
    /// Stop after this many epochs without improvement of the monitored
    /// quantity.
    pub early_stop_patience: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub validation_views: ValidationViews,
    pub monitor: Monitor,
    pub crop: CropSchedule,
}

pub const TRAIN_PRESETS: [&str; 2] = ["trajectory", "archive"];

impl TrainConfig {
    /// `trajectory`: 100 epochs, 20% validation monitored by AUROC, one
    /// tenfold learning-rate drop. `archive`: up to 1000 epochs, 10%
    /// validation loss over three views, plateau halving to 1e-4 and a crop
    /// ramp from 1.0 to 0.1 over 800 epochs.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "trajectory" => Ok(Self {
                epochs: 100,
                batch_size: 16,
                lr: 1e-3,
                min_lr: 0.0,
                schedule: LrSchedule::Step { at: 70, factor: 0.1 },
                early_stop_patience: None,
                weight_decay: 0.0,
                seed: 0,
                validation_fraction: 0.2,
                validation_views: ValidationViews::Original,
                monitor: Monitor::Auroc,
                crop: CropSchedule::constant(0.5),
            }),
            "archive" => Ok(Self {
                epochs: 1000,
                batch_size: 16,
                lr: 1e-3,
                min_lr: 1e-4,
                schedule: LrSchedule::Plateau {
                    patience: 50,
                    factor: 0.5,
                },
                early_stop_patience: Some(100),
                weight_decay: 0.0,
                seed: 0,
                validation_fraction: 0.1,
                validation_views: ValidationViews::OriginalAndHalves,
                monitor: Monitor::Loss,
                crop: CropSchedule::default(),
            }),
            _ => Err(invalid!(
                "unknown training preset {name:?}; expected one of {}",
                TRAIN_PRESETS.join(", ")
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, "epochs must be >= 1");
        ensure!(self.batch_size >= 1, "batch_size must be >= 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive");
        ensure!(
            self.min_lr >= 0.0 && self.min_lr <= self.lr,
            "need 0 <= min_lr <= lr, got {} and {}",
            self.min_lr,
            self.lr
        );
        match self.schedule {
            LrSchedule::Plateau { patience, factor } => {
                ensure!(patience >= 1, "plateau patience must be >= 1");
                ensure!(factor > 0.0 && factor < 1.0, "plateau factor must lie in (0, 1)");
            }
            LrSchedule::Step { factor, .. } => {
                ensure!(factor > 0.0 && factor < 1.0, "step factor must lie in (0, 1)");
            }
            LrSchedule::Constant => {}
        }
        ensure!(
            self.validation_fraction > 0.0 && self.validation_fraction < 1.0,
            "validation_fraction must lie in (0, 1)"
        );
        ensure!(self.weight_decay >= 0.0, "weight_decay must be >= 0");
        let c = self.crop;
        ensure!(
            c.start > 0.0 && c.start <= 1.0 && c.end > 0.0 && c.end <= 1.0,
            "crop ratios must lie in (0, 1]"
        );
        Ok(())
    }
}

/// Learning rate bookkeeping, separated from the loop so it can be tested
/// on synthetic loss sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct LrScheduler {
    pub schedule: LrSchedule,
    pub lr: f64,
    pub min_lr: f64,
    best: f64,
    stale: usize,
}

impl LrScheduler {
    pub fn new(schedule: LrSchedule, lr: f64, min_lr: f64) -> Self {
        Self {
            schedule,
            lr,
            min_lr,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Rate to use during `epoch` (0-based), before any observation of it.
    pub fn begin_epoch(&mut self, epoch: usize) -> f64 {
        if let LrSchedule::Step { at, factor } = self.schedule {
            if epoch == at && epoch > 0 {
                self.lr = (self.lr * factor).max(self.min_lr);
            }
        }
        self.lr
    }

    /// Records the validation loss of a finished epoch.
    pub fn observe(&mut self, val_loss: f64) {
        if let LrSchedule::Plateau { patience, factor } = self.schedule {
            if val_loss < self.best {
                self.best = val_loss;
                self.stale = 0;
            } else {
                self.stale += 1;
                if self.stale >= patience {
                    self.lr = (self.lr * factor).max(self.min_lr);
                    self.stale = 0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auroc: Option<f64>,
    pub lr: f64,
    pub crop_ratio: f64,
}

pub fn write_history_csv(history: &[EpochRecord], w: &mut impl Write) -> Result<()> {
    writeln!(w, "epoch,train_loss,val_loss,lr,crop_ratio")?;
    for h in history {
        writeln!(w, "{},{:?},{:?},{:?},{:?}", h.epoch, h.train_loss, h.val_loss, h.lr, h.crop_ratio)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub last: Checkpoint,
    pub stopped_early: bool,
}

/// Stratified split: from each class, `ceil(fraction * count)` records (at
/// least one, and never the whole class) go to validation.
pub fn split_validation(
    records: &[SeriesRecord],
    classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<SeriesRecord>, Vec<SeriesRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == c).collect();
        ensure!(idx.len() >= 2, "class {c} needs at least 2 records to hold one out");
        idx.shuffle(&mut rng);
        let k = ((fraction * idx.len() as f64).ceil() as usize).clamp(1, idx.len() - 1);
        let mut held: Vec<usize> = idx[..k].to_vec();
        let mut kept: Vec<usize> = idx[k..].to_vec();
        held.sort_unstable();
        kept.sort_unstable();
        val.extend(held);
        train.extend(kept);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((
        train.into_iter().map(|i| records[i].clone()).collect(),
        val.into_iter().map(|i| records[i].clone()).collect(),
    ))
}

fn weighted_xent(logits: &[f64], labels: &[usize], weights: &[f64], classes: usize) -> f64 {
    let mut total = 0.0;
    let mut wsum = 0.0;
    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        let row = &logits[i * classes..][..classes];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += w * (lse - row[y]);
        wsum += w;
    }
    if wsum > 0.0 {
        total / wsum
    } else {
        0.0
    }
}

/// Validation metrics: the mean over views of the class-weighted cross
/// entropy, and the AUROC of the original view.
pub fn validation_metrics<S: Scalar>(
    model: &Model<S>,
    val: &[SeriesRecord],
    t_max: usize,
    class_weights: &[f64],
    views: ValidationViews,
) -> Result<(f64, Option<f64>)> {
    ensure!(!val.is_empty(), "validation set is empty");
    let n = model.config.classes;
    let mut sets: Vec<Vec<SeriesRecord>> = vec![val.to_vec()];
    if views == ValidationViews::OriginalAndHalves {
        let (a, b): (Vec<_>, Vec<_>) = val.iter().map(half_crops).unzip();
        sets.push(a);
        sets.push(b);
    }
    let mut losses = Vec::with_capacity(sets.len());
    let mut auroc = None;
    for (k, set) in sets.iter().enumerate() {
        let refs: Vec<&SeriesRecord> = set.iter().collect();
        let out = predict_records(model, &refs, t_max, 64)?;
        let logits: Vec<f64> = out.logits.data().iter().map(|v| v.as_f64()).collect();
        let labels: Vec<usize> = set.iter().map(|r| r.label).collect();
        let w: Vec<f64> = labels.iter().map(|&y| class_weights[y]).collect();
        losses.push(weighted_xent(&logits, &labels, &w, n));
        if k == 0 {
            let probs: Vec<f64> = out.probabilities.data().iter().map(|v| v.as_f64()).collect();
            let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
            if distinct >= 2 {
                auroc = Some(auroc_ovr(&probs, &labels, n)?);
            }
        }
    }
    Ok((losses.iter().sum::<f64>() / losses.len() as f64, auroc))
}

/// Mean over views of the class-weighted validation cross entropy.
pub fn validation_loss<S: Scalar>(
    model: &Model<S>,
    val: &[SeriesRecord],
    t_max: usize,
    class_weights: &[f64],
    views: ValidationViews,
) -> Result<f64> {
    validation_metrics(model, val, t_max, class_weights, views).map(|(l, _)| l)
}

/// One pass over `records` in the given order; returns the weighted mean
/// training loss.
fn train_epoch<S: Scalar>(
    model: &mut Model<S>,
    adam: &mut Adam<S>,
    records: &[&SeriesRecord],
    t_max: usize,
    weights: &[f64],
    lr: f64,
    cfg: &TrainConfig,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut loss_sum = 0.0;
    let mut weight_sum = 0.0;
    for chunk in records.chunks(cfg.batch_size) {
        let cropped: Vec<SeriesRecord> = chunk.iter().map(|r| random_crop(r, ratio, rng)).collect();
        let refs: Vec<&SeriesRecord> = cropped.iter().collect();
        let batch = prepare_batch::<S>(model.config.length_policy, &refs, t_max, Some(weights))?;
        let (loss, grads, bindings, stats) = {
            let mut f = Forward::new(&model.params, Mode::Train);
            let x = f.tape.constant(batch.inputs);
            let logits = model.logits(&mut f, x, &batch.valid)?;
            let loss = f.tape.softmax_cross_entropy(logits, &batch.labels, &batch.weights)?;
            let grads = f.tape.backward(loss)?;
            let value = f.tape.scalar(loss)?.as_f64();
            (value, grads, f.bindings().to_vec(), std::mem::take(&mut f.stat_updates))
        };
        if !loss.is_finite() {
            return Ok(f64::NAN);
        }
        model.params.zero_grad();
        model.params.accumulate(&bindings, &grads);
        adam.update(&mut model.params, lr);
        model.params.commit_stats(&stats);
        let w: f64 = batch.weights.iter().map(|w| w.as_f64()).sum();
        loss_sum += loss * w;
        weight_sum += w;
    }
    Ok(loss_sum / weight_sum.max(f64::MIN_POSITIVE))
}

/// Trains `model` on `train` and selects the best epoch on `val`. Records are
/// placed on a canvas of `t_max` frames (the dataset maximum).
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    train: &[SeriesRecord],
    val: &[SeriesRecord],
    t_max: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!train.is_empty(), "training set is empty");
    ensure!(!val.is_empty(), "validation set is empty");
    if let Some(te) = &model.config.te {
        ensure!(
            te.cyclic || te.t_max >= t_max,
            "temporal encoding covers {} timestamps but the data reaches {t_max}",
            te.t_max
        );
    }
    if let LengthPolicy::FixedInterpolate { .. } = model.config.length_policy {
        log::info!("fixed-length model: every batch is resampled");
    }
    let classes = model.config.classes;
    let labels: Vec<usize> = train.iter().map(|r| r.label).collect();
    let weights = class_weights(&labels, classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        &model.params,
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut sched = LrScheduler::new(cfg.schedule, cfg.lr, cfg.min_lr);
    let mut order: Vec<&SeriesRecord> = train.iter().collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = model.checkpoint();
    let mut best_epoch = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let lr = sched.begin_epoch(epoch);
        let ratio = cfg.crop.ratio(epoch);
        let before = model.checkpoint();
        order.shuffle(&mut rng);
        let train_loss = train_epoch(model, &mut adam, &order, t_max, &weights, lr, cfg, ratio, &mut rng)?;
        let (val_loss, val_auroc) = if train_loss.is_finite() {
            validation_metrics(model, val, t_max, &weights, cfg.validation_views)?
        } else {
            (f64::NAN, None)
        };
        if !train_loss.is_finite() || !val_loss.is_finite() {
            log::error!("non-finite loss at epoch {epoch}; aborting");
            return Err(Error::NonFinite {
                epoch,
                checkpoint: Box::new(before),
            });
        }
        sched.observe(val_loss);
        let score = match cfg.monitor {
            Monitor::Loss => -val_loss,
            Monitor::Auroc => val_auroc.ok_or_else(|| invalid!("AUROC monitoring needs two classes in validation"))?,
        };
        if score > best_score {
            best_score = score;
            best_epoch = epoch;
            best = model.checkpoint();
            since_best = 0;
        } else {
            since_best += 1;
        }
        log::info!(
            "epoch {epoch}: train {train_loss:.5} val {val_loss:.5} auroc {} lr {lr:.2e} crop {ratio:.3}",
            val_auroc.map_or("-".to_string(), |a| format!("{a:.4}"))
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_auroc,
            lr,
            crop_ratio: ratio,
        });
        if cfg.early_stop_patience.is_some_and(|p| since_best >= p) {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        history,
        best,
        best_epoch,
        last: model.checkpoint(),
        stopped_early,
    })
}
