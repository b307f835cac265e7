use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::{fold_rng, Adam, CurveRow, Sample, Trainable, Trainer, TrainConfig};
use crate::data::{
    augmented_id, kfold_split, normalize_image, random_angle, rebalance, rotate_augment, DiagnosticImage, FeatureTable,
    Fold, Label, Visit,
};
use crate::error::{Error, Result};
use crate::recurrent::OutputMode;
use crate::stem::{Extractor, ExtractorConfig, DIAGNOSTIC_CLASSES};
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

/// The feature extractor as a [`Trainable`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorModel(pub Extractor);

impl ExtractorModel {
    /// Rebuilds a model from a checkpoint written by [`train_extractor`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: ExtractorConfig = serde_json::from_str(&ckpt.config)
            .map_err(|e| Error::Checkpoint(format!("extractor config: {e}")))?;
        let mut model = Self(Extractor::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?);
        let mut adam = Adam::new(Default::default(), model.store());
        ckpt.restore(model.store_mut(), &mut adam)?;
        Ok(model)
    }
}

impl Trainable for ExtractorModel {
    fn store(&self) -> &ParamStore {
        &self.0.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.0.store
    }

    fn output_mode(&self) -> OutputMode {
        OutputMode::TwoClass
    }

    fn logits(
        &self,
        tape: &mut Tape,
        params: &Bound,
        batch: &[&Sample],
        _training: bool,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let rows = batch
            .iter()
            .map(|s| {
                let x = tape.constant(s.input.clone());
                let out = self.0.forward(tape, params, x)?;
                tape.reshape(out.logits, &[1, DIAGNOSTIC_CLASSES])
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&rows, 0)
    }

    fn config_json(&self) -> String {
        serde_json::to_string(&self.0.cfg).expect("config serializes")
    }
}

/// Per-image zero-mean, unit-variance scaling applied before the extractor.
pub fn prepare_image(image: &Tensor) -> Tensor {
    normalize_image(image)
}

#[derive(Clone, Debug)]
pub struct ExtractorRun {
    /// Weights of the best epoch by validation accuracy.
    pub model: ExtractorModel,
    pub curves: Vec<CurveRow>,
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub split: Fold,
}

/// Trains stem, bridge, adapters and head with cross-entropy on one
/// stratified train/validation split (the first of `cfg.folds`). Classes
/// left unbalanced in the training part are evened out with rotated copies.
pub fn train_extractor(images: &[DiagnosticImage], model_cfg: &ExtractorConfig, cfg: &TrainConfig) -> Result<ExtractorRun> {
    cfg.validate()?;
    let ids: Vec<(String, usize)> = images.iter().map(|i| (i.id.clone(), i.diagnosis.index())).collect();
    let split = kfold_split(&ids, cfg.folds, cfg.seed)?.swap_remove(0);
    let (train, val) = split.partition(images, |i| i.id.as_str())?;

    let mut rng = fold_rng(cfg.seed, 0);
    let model = ExtractorModel(Extractor::new(model_cfg, &mut rng)?);
    let to_sample = |i: &DiagnosticImage| Sample {
        id: i.id.clone(),
        input: prepare_image(&i.image),
        label: i.diagnosis.index(),
    };
    let train = rebalance(
        train.into_iter().cloned().collect(),
        |i: &DiagnosticImage| i.diagnosis,
        None,
        |i, k| {
            Ok(DiagnosticImage {
                id: augmented_id(&i.id, k),
                diagnosis: i.diagnosis,
                image: rotate_augment(&i.image, random_angle(&mut rng))?,
            })
        },
    )?;
    let train: Vec<Sample> = train.iter().map(to_sample).collect();
    let val: Vec<Sample> = val.into_iter().map(to_sample).collect();

    let mut trainer = Trainer::new(model, cfg, 0, rng)?;
    let mut curves = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let row = trainer.epoch(&train, &val)?;
        log::info!(
            "extractor epoch {}: loss {:.4} train acc {:.3} val acc {:.3}",
            row.epoch,
            row.train_loss,
            row.train_acc,
            row.val_acc
        );
        curves.push(row);
    }
    let last = trainer.checkpoint();
    let best = trainer.best.clone().unwrap_or_else(|| last.clone());
    Ok(ExtractorRun {
        model: ExtractorModel::from_checkpoint(&best)?,
        curves,
        last,
        best,
        split,
    })
}

/// Inference-mode feature vectors for every present visit image.
pub fn extract_features(model: &ExtractorModel, subjects: &[(String, [Option<Tensor>; Visit::COUNT])]) -> Result<FeatureTable> {
    let jobs: Vec<(&str, Visit, &Tensor)> = subjects
        .iter()
        .flat_map(|(id, imgs)| {
            Visit::ALL
                .into_iter()
                .zip(imgs)
                .filter_map(move |(v, img)| img.as_ref().map(|img| (id.as_str(), v, img)))
        })
        .collect();
    let features: Vec<Result<Vec<f64>>> = jobs
        .par_iter()
        .map(|(_, _, img)| Ok(model.0.infer(&prepare_image(img))?.0.into_data()))
        .collect();
    let mut table = FeatureTable::new();
    for ((id, visit, _), f) in jobs.iter().zip(features) {
        table.insert(id, *visit, f?)?;
    }
    Ok(table)
}

/// A subject's id, label and visit images.
pub type SubjectImages = (String, Label, [Option<Tensor>; Visit::COUNT]);

/// Adds rotated copies of minority-class subjects, each visit image turned
/// by its own random angle. Copies are named with [`augmented_id`].
pub fn augment_cohort(subjects: Vec<SubjectImages>, multiplier: Option<usize>, seed: u64) -> Result<Vec<SubjectImages>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rebalance(subjects, |s| s.1, multiplier, |(id, label, images), k| {
        let mut rotated: [Option<Tensor>; Visit::COUNT] = Default::default();
        for (slot, img) in rotated.iter_mut().zip(images) {
            if let Some(img) = img {
                *slot = Some(rotate_augment(img, random_angle(&mut rng))?);
            }
        }
        Ok((augmented_id(id, k), *label, rotated))
    })
}
