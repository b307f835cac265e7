use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fold_rng, CurveRow, Sample, Trainable, Trainer, TrainConfig};
use crate::data::{kfold_split, Fold, Label, Normalizer, RawSequence, IMAGE_FEATURES, STEP_WIDTH};
use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::metrics::{confusion_and_metrics, mean_defined, ConfusionMatrix, Metrics};
use crate::recurrent::{batch_steps, count_recurrent_params, BiLstmConfig, OutputMode, Predictor};
use crate::tensor::{Bound, ParamStore, Tape, Var};

use super::checkpoint::Checkpoint;

/// The sequence classifier as a [`Trainable`].
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorModel(pub Predictor);

impl PredictorModel {
    /// Rebuilds a model from a checkpoint written during cross-validation.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: BiLstmConfig = serde_json::from_str(&ckpt.config)
            .map_err(|e| Error::Checkpoint(format!("predictor config: {e}")))?;
        let mut model = Self(Predictor::new(&cfg, &mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?);
        let mut adam = super::Adam::new(Default::default(), model.store());
        ckpt.restore(model.store_mut(), &mut adam)?;
        Ok(model)
    }
}

impl Trainable for PredictorModel {
    fn store(&self) -> &ParamStore {
        &self.0.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.0.store
    }

    fn output_mode(&self) -> OutputMode {
        self.0.cfg.output
    }

    fn logits(
        &self,
        tape: &mut Tape,
        params: &Bound,
        batch: &[&Sample],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let inputs: Vec<_> = batch.iter().map(|s| &s.input).collect();
        let steps = batch_steps(tape, &inputs)?;
        self.0.forward(tape, params, &steps, training, rng)
    }

    fn config_json(&self) -> String {
        serde_json::to_string(&self.0.cfg).expect("config serializes")
    }
}

/// Variants compared against the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Image features only: 256-wide inputs.
    NoBiomarkers,
    /// One forward LSTM instead of two directions.
    VanillaLstm,
    /// Binary cross-entropy in place of focal loss.
    BceLoss,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::NoBiomarkers, Ablation::VanillaLstm, Ablation::BceLoss];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoBiomarkers => "no_biomarkers",
            Ablation::VanillaLstm => "vanilla_lstm",
            Ablation::BceLoss => "bce_loss",
        }
    }

    /// The configurations to train for this variant.
    pub fn apply(self, model: &BiLstmConfig, train: &TrainConfig) -> Result<(BiLstmConfig, TrainConfig)> {
        let (mut model, mut train) = (model.clone(), train.clone());
        match self {
            Ablation::NoBiomarkers => model.input = IMAGE_FEATURES,
            Ablation::VanillaLstm => model.bidirectional = false,
            Ablation::BceLoss => {
                if model.output != OutputMode::SingleLogit {
                    return Err(Error::config("the bce ablation needs a single-logit head"));
                }
                train.objective = Objective::Bce;
            }
        }
        Ok((model, train))
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation {s:?}; expected no_biomarkers, vanilla_lstm or bce_loss")))
    }
}

/// One fold's inputs, normalized with statistics from its training part.
#[derive(Clone, Debug)]
pub struct FoldData {
    pub fold: Fold,
    pub normalizer: Normalizer,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

fn to_sample(normalizer: &Normalizer, raw: &RawSequence, image_only: bool) -> Sample {
    let seq = normalizer.apply(raw);
    let seq = if image_only { seq.image_only() } else { seq };
    Sample {
        id: seq.subject_id.clone(),
        input: seq.to_tensor(),
        label: seq.label.index(),
    }
}

pub fn prepare_fold(raw: &[RawSequence], fold: &Fold, image_only: bool) -> Result<FoldData> {
    let (train, val) = fold.partition(raw, |r| r.subject_id.as_str())?;
    if val.is_empty() {
        return Err(Error::input(format!("fold {} has no validation sequences", fold.index)));
    }
    let normalizer = Normalizer::fit(train.iter().copied())?;
    Ok(FoldData {
        fold: fold.clone(),
        train: train.iter().map(|r| to_sample(&normalizer, r, image_only)).collect(),
        val: val.iter().map(|r| to_sample(&normalizer, r, image_only)).collect(),
        normalizer,
    })
}

/// Stratified subject-level folds over the source subjects of `raw`.
pub fn cohort_folds(raw: &[RawSequence], k: usize, seed: u64) -> Result<Vec<Fold>> {
    let subjects: BTreeMap<&str, Label> = raw.iter().map(|r| (r.source.as_str(), r.label)).collect();
    let subjects: Vec<(String, Label)> = subjects.into_iter().map(|(s, l)| (s.to_string(), l)).collect();
    kfold_split(&subjects, k, seed)
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    /// Metrics of the final-epoch model on the validation subjects.
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub val_loss: f64,
    pub best_val_accuracy: f64,
    pub val_subjects: Vec<String>,
    pub train_subjects: Vec<String>,
    pub last: Checkpoint,
    pub best: Checkpoint,
}

#[derive(Clone, Debug)]
pub struct PredictorRun {
    pub name: String,
    pub model: BiLstmConfig,
    pub train: TrainConfig,
    pub folds: Vec<FoldResult>,
    pub curves: Vec<CurveRow>,
}

impl PredictorRun {
    pub fn mean_accuracy(&self) -> f64 {
        self.folds.iter().map(|f| f.metrics.accuracy).sum::<f64>() / self.folds.len().max(1) as f64
    }

    /// Fold-averaged metrics; undefined fold values are skipped.
    pub fn mean_metrics(&self) -> Metrics {
        Metrics {
            accuracy: self.mean_accuracy(),
            precision: mean_defined(self.folds.iter().map(|f| f.metrics.precision)),
            recall: mean_defined(self.folds.iter().map(|f| f.metrics.recall)),
            f1: mean_defined(self.folds.iter().map(|f| f.metrics.f1)),
        }
    }

    pub fn mean_val_loss(&self) -> f64 {
        self.folds.iter().map(|f| f.val_loss).sum::<f64>() / self.folds.len().max(1) as f64
    }

    /// Confusion matrix summed over folds.
    pub fn pooled_confusion(&self) -> ConfusionMatrix {
        self.folds
            .iter()
            .fold(ConfusionMatrix::default(), |acc, f| acc.merge(&f.confusion))
    }

    pub fn recurrent_params(&self) -> Result<usize> {
        count_recurrent_params(&self.model, false)
    }
}

fn to_binary(values: &[usize]) -> Vec<u8> {
    values.iter().map(|&v| u8::from(v == 1)).collect()
}

fn train_fold(
    raw: &[RawSequence],
    fold: &Fold,
    model_cfg: &BiLstmConfig,
    cfg: &TrainConfig,
    image_only: bool,
) -> Result<(FoldResult, Vec<CurveRow>)> {
    let data = prepare_fold(raw, fold, image_only)?;
    let width = if image_only { IMAGE_FEATURES } else { STEP_WIDTH };
    if model_cfg.input != width {
        return Err(Error::config(format!(
            "model input width {} but sequences have {width} features",
            model_cfg.input
        )));
    }
    let mut rng = fold_rng(cfg.seed, fold.index);
    let net = Predictor::new(model_cfg, &mut rng)?;
    let mut trainer = Trainer::new(PredictorModel(net), cfg, fold.index, rng)?;
    trainer.normalizer = Some(data.normalizer.clone());
    let mut curves = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let row = trainer.epoch(&data.train, &data.val)?;
        log::debug!(
            "fold {} epoch {}: loss {:.4} val acc {:.4}",
            row.fold,
            row.epoch,
            row.train_loss,
            row.val_acc
        );
        curves.push(row);
    }
    let eval = trainer.evaluate(&data.val)?;
    let (confusion, metrics) = confusion_and_metrics(&to_binary(&eval.predictions), &to_binary(&eval.labels))?;
    log::info!("fold {}: {metrics}", fold.index);
    let last = trainer.checkpoint();
    let best = trainer.best.clone().unwrap_or_else(|| last.clone());
    Ok((
        FoldResult {
            fold: fold.index,
            confusion,
            metrics,
            val_loss: eval.loss,
            best_val_accuracy: trainer.best_val_accuracy,
            val_subjects: fold.val.clone(),
            train_subjects: fold.train.clone(),
            last,
            best,
        },
        curves,
    ))
}

/// Cross-validates the predictor on given folds. With `jobs > 1` folds run
/// on that many threads; results do not depend on `jobs`.
#[allow(clippy::too_many_arguments)]
pub fn train_predictor_on(
    raw: &[RawSequence],
    folds: &[Fold],
    model_cfg: &BiLstmConfig,
    cfg: &TrainConfig,
    image_only: bool,
    name: &str,
    jobs: usize,
) -> Result<PredictorRun> {
    cfg.validate()?;
    model_cfg.validate()?;
    let run = |f: &Fold| train_fold(raw, f, model_cfg, cfg, image_only);
    let results: Vec<Result<_>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| folds.par_iter().map(run).collect())
    } else {
        folds.iter().map(run).collect()
    };
    let mut out = PredictorRun {
        name: name.to_string(),
        model: model_cfg.clone(),
        train: cfg.clone(),
        folds: Vec::new(),
        curves: Vec::new(),
    };
    for r in results {
        let (fold, curves) = r?;
        out.folds.push(fold);
        out.curves.extend(curves);
    }
    Ok(out)
}

/// Re-evaluates saved fold models, given as `(last, best)` checkpoint
/// pairs in fold order, on the validation part of each fold. Inputs are
/// normalized with the statistics stored in the checkpoint.
pub fn evaluate_saved(
    raw: &[RawSequence],
    folds: &[Fold],
    checkpoints: &[(Checkpoint, Checkpoint)],
    cfg: &TrainConfig,
    name: &str,
) -> Result<PredictorRun> {
    if folds.len() != checkpoints.len() {
        return Err(Error::input(format!("{} folds but {} saved models", folds.len(), checkpoints.len())));
    }
    let mut out = PredictorRun {
        name: name.to_string(),
        model: BiLstmConfig::desk(),
        train: cfg.clone(),
        folds: Vec::new(),
        curves: Vec::new(),
    };
    for (fold, (last, best)) in folds.iter().zip(checkpoints) {
        if last.fold != fold.index {
            return Err(Error::Checkpoint(format!("checkpoint of fold {} given for fold {}", last.fold, fold.index)));
        }
        let model = PredictorModel::from_checkpoint(last)?;
        let normalizer = last
            .normalizer
            .clone()
            .ok_or_else(|| Error::Checkpoint(format!("fold {} checkpoint has no normalizer", fold.index)))?;
        let image_only = model.0.cfg.input == IMAGE_FEATURES;
        let (_, val) = fold.partition(raw, |r| r.subject_id.as_str())?;
        let val: Vec<Sample> = val.iter().map(|r| to_sample(&normalizer, r, image_only)).collect();
        let eval = super::evaluate(&model, &cfg.objective, &val, cfg.batch_size)?;
        let (confusion, metrics) = confusion_and_metrics(&to_binary(&eval.predictions), &to_binary(&eval.labels))?;
        out.model = model.0.cfg.clone();
        out.folds.push(FoldResult {
            fold: fold.index,
            confusion,
            metrics,
            val_loss: eval.loss,
            best_val_accuracy: last.best_val_accuracy,
            val_subjects: fold.val.clone(),
            train_subjects: fold.train.clone(),
            last: last.clone(),
            best: best.clone(),
        });
    }
    Ok(out)
}

/// Stratified k-fold training of the full model.
pub fn train_predictor(
    raw: &[RawSequence],
    model_cfg: &BiLstmConfig,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<PredictorRun> {
    let folds = cohort_folds(raw, cfg.folds, cfg.seed)?;
    train_predictor_on(raw, &folds, model_cfg, cfg, false, "baseline", jobs)
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub mode: Ablation,
    pub baseline: PredictorRun,
    pub ablated: PredictorRun,
}

/// Trains the ablated variant on the same folds as the baseline. A
/// baseline run already at hand can be passed in to avoid retraining it.
pub fn run_ablation(
    mode: Ablation,
    raw: &[RawSequence],
    model_cfg: &BiLstmConfig,
    cfg: &TrainConfig,
    baseline: Option<&PredictorRun>,
    jobs: usize,
) -> Result<AblationReport> {
    let folds = cohort_folds(raw, cfg.folds, cfg.seed)?;
    let baseline = match baseline {
        Some(b) => b.clone(),
        None => train_predictor_on(raw, &folds, model_cfg, cfg, false, "baseline", jobs)?,
    };
    let (model, train) = mode.apply(model_cfg, cfg)?;
    let ablated = train_predictor_on(raw, &folds, &model, &train, mode == Ablation::NoBiomarkers, mode.name(), jobs)?;
    Ok(AblationReport {
        mode,
        baseline,
        ablated,
    })
}
