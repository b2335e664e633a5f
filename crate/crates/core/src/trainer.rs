//! Mini-batch training with Adam and validation-based early stopping.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::data::{SequenceWindow, WindowBatch};
use crate::dynamics::PhysicalParams;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown, LossWeights};
use crate::seq2seq::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightDecayMode {
    /// `p ← p - lr·wd·p` before the Adam update.
    Decoupled,
    /// `g ← g + wd·p` before the moment updates.
    Coupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecayMode,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
    /// Use only the first `n` shuffled batches of every epoch.
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.05,
            weight_decay_mode: WeightDecayMode::Decoupled,
            batch_size: 32,
            max_epochs: 500,
            early_stop_patience: 50,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: None,
            max_batches_per_epoch: None,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 256,
            max_epochs: 3000,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config(
                "train.batch_size and train.early_stop_patience must be >= 1".into(),
            ));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("invalid weight decay or Adam betas".into()));
        }
        Ok(())
    }
}

/// Adam moments for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, _, t)| Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("shape"))
            .collect();
        Adam {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params` with `grads`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], cfg: &TrainConfig) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adam", &[params.len()], &[grads.len()]));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let wd = cfg.weight_decay;
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (pj, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let mut gj = *gj;
                match cfg.weight_decay_mode {
                    WeightDecayMode::Decoupled => *pj -= cfg.lr * wd * *pj,
                    WeightDecayMode::Coupled => gj += wd * *pj,
                }
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                *pj -= cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
            }
        }
        Ok(())
    }
}

/// Scale `grads` in place so that their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly lower
/// monitored loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub validation: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation: LossBreakdown,
    pub stopped_early: bool,
    /// Parameters after the last epoch (the model holds the best ones).
    pub final_params: ParamStore,
}

impl TrainReport {
    /// Relative drop of the validation total from epoch 0 to the best epoch.
    pub fn validation_reduction(&self) -> f64 {
        let start = self.epochs[0].validation.total;
        1.0 - self.best_validation.total / start
    }

    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "split", "fit", "physics", "projection", "slack", "total"])?;
        for r in &self.epochs {
            for (split, l) in [("train", &r.train), ("validation", &r.validation)] {
                w.write_record([
                    r.epoch.to_string(),
                    split.to_string(),
                    format!("{:?}", l.fit),
                    format!("{:?}", l.physics),
                    format!("{:?}", l.projection),
                    format!("{:?}", l.slack),
                    format!("{:?}", l.total),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

fn horizon_of(model: &Model) -> usize {
    model.config.horizon
}

fn check_finite(l: &LossBreakdown, context: impl FnOnce() -> String) -> Result<()> {
    if l.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("non-finite loss ({})", context())))
    }
}

fn numeric(e: Error, context: impl FnOnce() -> String) -> Error {
    if e.is_numeric() {
        Error::Divergence(format!("{} ({e})", context()))
    } else {
        e
    }
}

/// Batch-averaged loss over `windows` without updating anything.
pub fn evaluate_loss(
    model: &Model,
    windows: &[SequenceWindow],
    weights: &LossWeights,
    params: &PhysicalParams,
    batch_size: usize,
) -> Result<LossBreakdown> {
    if windows.is_empty() {
        return Err(Error::Data("cannot evaluate a loss over zero windows".into()));
    }
    let n = horizon_of(model);
    let mut acc = LossBreakdown::default();
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&SequenceWindow> = chunk.iter().collect();
        let batch = WindowBatch::new(&refs, n)?;
        let tape = Tape::new();
        let bound = model.bind(&tape)?;
        let graph = bound.predict(&batch, n)?;
        let (_, l) = total_loss(&graph, &batch, params, weights)?;
        acc.accumulate(&l, chunk.len() as f64);
    }
    Ok(acc.scaled(1.0 / windows.len() as f64))
}

/// One optimizer step on a batch. Returns the batch loss before the update.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &WindowBatch,
    weights: &LossWeights,
    params: &PhysicalParams,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let n = horizon_of(model);
    let (loss, mut grads) = {
        let tape = Tape::new();
        let bound = model.bind(&tape)?;
        let graph = bound.predict(batch, n)?;
        let (total, loss) = total_loss(&graph, batch, params, weights)?;
        let grads = tape.backward(total)?;
        (loss, grads.for_params(&model.params))
    };
    if let Some(c) = cfg.clip_norm {
        clip_global_norm(&mut grads, c);
    }
    adam.update(&mut model.params, &grads, cfg)?;
    Ok(loss)
}

/// Train `model` in place and leave it holding the best-validation
/// parameters.
///
/// Epoch 0 records the losses of the initial parameters; epochs `1..` each
/// make one pass over a seeded shuffle of `train`.
pub fn train(
    model: &mut Model,
    train: &[SequenceWindow],
    validation: &[SequenceWindow],
    weights: &LossWeights,
    params: &PhysicalParams,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    weights.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty train and validation splits (got {} and {})",
            train.len(),
            validation.len()
        )));
    }
    let eval = |m: &Model, ws: &[SequenceWindow], epoch: usize, split: &str| {
        let l = evaluate_loss(m, ws, weights, params, cfg.batch_size)
            .map_err(|e| numeric(e, || format!("epoch {epoch} {split}")))?;
        check_finite(&l, || format!("epoch {epoch} {split}"))?;
        Ok::<_, Error>(l)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best_params = model.params.clone();

    let first = EpochRecord {
        epoch: 0,
        train: eval(model, train, 0, "train")?,
        validation: eval(model, validation, 0, "validation")?,
    };
    stopper.observe(0, first.validation.total);
    on_epoch(&first);
    let mut epochs = vec![first];
    let mut best_validation = first.validation;
    let mut stopped_early = false;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_loss = LossBreakdown::default();
        let mut seen = 0usize;
        let batches = order.chunks(cfg.batch_size);
        let limit = cfg.max_batches_per_epoch.unwrap_or(usize::MAX);
        for (bi, idx) in batches.take(limit).enumerate() {
            let refs: Vec<&SequenceWindow> = idx.iter().map(|&i| &train[i]).collect();
            let batch = WindowBatch::new(&refs, horizon_of(model))?;
            let l = train_step(model, &mut adam, &batch, weights, params, cfg)
                .map_err(|e| numeric(e, || format!("epoch {epoch} batch {bi}")))?;
            check_finite(&l, || format!("epoch {epoch} batch {bi}"))?;
            train_loss.accumulate(&l, idx.len() as f64);
            seen += idx.len();
        }
        let record = EpochRecord {
            epoch,
            train: train_loss.scaled(1.0 / seen as f64),
            validation: eval(model, validation, epoch, "validation")?,
        };
        on_epoch(&record);
        epochs.push(record);
        match stopper.observe(epoch, record.validation.total) {
            StopDecision::Improved => {
                best_params = model.params.clone();
                best_validation = record.validation;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let final_params = std::mem::replace(&mut model.params, best_params);
    Ok(TrainReport {
        epochs,
        best_epoch: stopper.best_epoch,
        best_validation,
        stopped_early,
        final_params,
    })
}
