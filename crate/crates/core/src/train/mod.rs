//! Optimization loop, checkpoints, cross-validation and ablations.

pub mod adam;
pub mod checkpoint;
mod extractor;
mod predictor;
pub mod report;
mod schedule;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::recurrent::OutputMode;
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

pub use adam::{adam_update, Adam, AdamConfig, Moments};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use extractor::{extract_features, augment_cohort, prepare_image, train_extractor, ExtractorModel, ExtractorRun, SubjectImages};
pub use predictor::{
    cohort_folds, evaluate_saved, prepare_fold, run_ablation, train_predictor, train_predictor_on, Ablation, AblationReport, FoldData,
    FoldResult, PredictorModel, PredictorRun,
};
pub use schedule::{lr_schedule, Phase, TrainConfig};

/// One labelled model input.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: Tensor,
    pub label: usize,
}

/// A model the generic loop can train.
pub trait Trainable {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn output_mode(&self) -> OutputMode;
    /// `B×C` logits for a batch (`B×1` for a single-logit head).
    fn logits(
        &self,
        tape: &mut Tape,
        params: &Bound,
        batch: &[&Sample],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var>;
    /// JSON describing the architecture, stored in checkpoints.
    fn config_json(&self) -> String;
}

/// One row of a training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub fold: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Predictions and mean loss over a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        let correct = self.predictions.iter().zip(&self.labels).filter(|(p, y)| p == y).count();
        correct as f64 / self.labels.len().max(1) as f64
    }
}

/// Class decisions from logits: `σ(z) ≥ 0.5` for a single logit, otherwise
/// the arg-max (first index on ties).
pub fn decide(logits: &Tensor, mode: OutputMode) -> Result<Vec<usize>> {
    let (rows, width) = logits.dims2()?;
    Ok((0..rows)
        .map(|r| {
            let row = &logits.data()[r * width..(r + 1) * width];
            if mode == OutputMode::SingleLogit && width == 1 {
                usize::from(row[0] >= 0.0)
            } else {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            }
        })
        .collect())
}

/// Generator for fold `fold` of a run seeded with `seed`. Fold streams are
/// independent, so folds may train in any order or in parallel.
pub fn fold_rng(seed: u64, fold: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fold as u64 + 1);
    rng
}

/// Training state of one model on one split: weights, optimizer and
/// generator, plus the best validation accuracy seen so far.
#[derive(Clone, Debug)]
pub struct Trainer<M: Trainable> {
    pub model: M,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub cfg: TrainConfig,
    pub fold: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_accuracy: f64,
    pub best: Option<Checkpoint>,
    pub normalizer: Option<Normalizer>,
}

impl<M: Trainable> Trainer<M> {
    pub fn new(model: M, cfg: &TrainConfig, fold: usize, rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(cfg.adam, model.store());
        Ok(Self {
            model,
            adam,
            rng,
            cfg: cfg.clone(),
            fold,
            epoch: 0,
            best_val_accuracy: f64::NAN,
            best: None,
            normalizer: None,
        })
    }

    /// Continues from a checkpoint of the same architecture. `model` only
    /// provides the shapes; its weights are overwritten.
    pub fn resume(mut model: M, cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.config != model.config_json() {
            return Err(Error::Checkpoint("architecture differs from the checkpoint".into()));
        }
        let mut adam = Adam::new(cfg.adam, model.store());
        let rng = ckpt.restore(model.store_mut(), &mut adam)?;
        Ok(Self {
            model,
            adam,
            rng,
            cfg: cfg.clone(),
            fold: ckpt.fold,
            epoch: ckpt.epoch,
            best_val_accuracy: ckpt.best_val_accuracy,
            best: None,
            normalizer: ckpt.normalizer.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            self.model.config_json(),
            self.epoch,
            self.fold,
            self.best_val_accuracy,
            &self.rng,
            self.model.store(),
            &self.adam,
            self.normalizer.as_ref(),
        )
    }

    /// Mean training loss and accuracy of one pass over `train` in a
    /// freshly shuffled order.
    pub fn train_pass(&mut self, train: &[Sample]) -> Result<(f64, f64)> {
        if train.is_empty() {
            return Err(Error::input("empty training split"));
        }
        let lr = lr_schedule(self.epoch + 1, &self.cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mode = self.model.output_mode();
        let (mut total, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let mut tape = Tape::new();
            let params = self.model.store().bind(&mut tape);
            let logits = self.model.logits(&mut tape, &params, &batch, true, &mut self.rng)?;
            let loss = self.cfg.objective.batch_loss(&mut tape, logits, &labels, mode)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at fold {} epoch {}",
                    self.fold,
                    self.epoch + 1
                )));
            }
            total += value * batch.len() as f64;
            correct += decide(tape.value(logits), mode)?
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
            let grads = tape.backward(loss)?;
            self.adam.step(self.model.store_mut(), &params, &grads, lr)?;
        }
        Ok((total / train.len() as f64, correct as f64 / train.len() as f64))
    }

    /// Inference-mode loss and predictions.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<Evaluation> {
        evaluate(&self.model, &self.cfg.objective, samples, self.cfg.batch_size)
    }

    /// Trains one epoch, evaluates on `val`, and keeps the best checkpoint
    /// by validation accuracy (earliest epoch on ties).
    pub fn epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<CurveRow> {
        let lr = lr_schedule(self.epoch + 1, &self.cfg);
        let (train_loss, train_acc) = self.train_pass(train)?;
        self.epoch += 1;
        let eval = self.evaluate(val)?;
        let val_acc = eval.accuracy();
        if !(val_acc <= self.best_val_accuracy) {
            self.best_val_accuracy = val_acc;
            self.best = Some(self.checkpoint());
        }
        Ok(CurveRow {
            fold: self.fold,
            epoch: self.epoch,
            lr,
            train_loss,
            val_loss: eval.loss,
            train_acc,
            val_acc,
        })
    }
}

/// Inference-mode loss and predictions of `model` on `samples`.
pub fn evaluate<M: Trainable>(model: &M, objective: &Objective, samples: &[Sample], batch: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::input("nothing to evaluate"));
    }
    let mode = model.output_mode();
    // Dropout is off, so the generator is never drawn from.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut predictions = Vec::with_capacity(samples.len());
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    for (chunk, chunk_labels) in samples.chunks(batch.max(1)).zip(labels.chunks(batch.max(1))) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let params = model.store().bind_frozen(&mut tape);
        let logits = model.logits(&mut tape, &params, &refs, false, &mut unused)?;
        let loss = objective.batch_loss(&mut tape, logits, chunk_labels, mode)?;
        total += tape.value(loss).item() * chunk.len() as f64;
        predictions.extend(decide(tape.value(logits), mode)?);
    }
    Ok(Evaluation {
        loss: total / samples.len() as f64,
        predictions,
        labels,
    })
}
