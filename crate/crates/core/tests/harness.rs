//! Training harness and pipeline behaviour on small cohorts.

mod common;

use std::collections::BTreeMap;

use common::oracle::Logistic;
use mciprog::data::{
    augmented_id, forward_fill, kfold_split, source_subject, synth_diagnostic, synth_generate, BiomarkerRow,
    DiagnosticCohortConfig, FeatureTable, Label, Normalizer, RawSequence, SyntheticCohortConfig, Visit, IMAGE_FEATURES,
    NUM_BIOMARKERS, STEP_WIDTH,
};
use mciprog::data::assemble_sequences;
use mciprog::recurrent::{BiLstmConfig, Predictor};
use mciprog::stem::Extractor;
use mciprog::train::report::write_metric_report;
use mciprog::train::{
    cohort_folds, fold_rng, lr_schedule, prepare_fold, train_extractor, train_predictor, ExtractorModel,
    PredictorModel, TrainConfig, Trainer,
};
use mciprog::train::extract_features;
use rand::Rng;

/// Sequences from a small synthetic cohort with random stand-in image
/// features. Every pMCI subject also gets one augmented copy.
fn small_sequences(seed: u64) -> Vec<RawSequence> {
    let cohort = synth_generate(&SyntheticCohortConfig {
        n_smci: 14,
        n_pmci: 6,
        seed,
        image_side: 32,
        ..SyntheticCohortConfig::default()
    })
    .unwrap();
    let mut rng = common::rng(seed);
    let mut table = FeatureTable::new();
    for s in &cohort.subjects {
        let copies = if s.label == Label::Pmci { 2 } else { 1 };
        for k in 0..copies {
            let id = if k == 0 { s.id.clone() } else { augmented_id(&s.id, k) };
            for (v, img) in Visit::ALL.into_iter().zip(&s.images) {
                if img.is_some() {
                    let shift = if s.label == Label::Pmci { 0.5 } else { 0.0 };
                    let f = (0..IMAGE_FEATURES).map(|_| rng.random_range(-1.0..1.0) + shift).collect();
                    table.insert(&id, v, f).unwrap();
                }
            }
        }
    }
    assemble_sequences(&table, &cohort.biomarker_rows(), &cohort.labels()).unwrap().0
}

fn tiny_model() -> BiLstmConfig {
    BiLstmConfig {
        input: STEP_WIDTH,
        hidden: 6,
        ..BiLstmConfig::desk()
    }
}

fn short_schedule(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        switch_epoch: Some(epochs / 2),
        folds: 3,
        ..TrainConfig::predictor_desk()
    }
}

#[test]
fn folds_keep_subjects_and_copies_apart() {
    let raw = small_sequences(1);
    let folds = cohort_folds(&raw, 3, 9).unwrap();
    for fold in &folds {
        let data = prepare_fold(&raw, fold, false).unwrap();
        let train_sources: Vec<&str> = data.train.iter().map(|s| source_subject(&s.id)).collect();
        for s in &data.val {
            assert!(!train_sources.contains(&source_subject(&s.id)), "{} leaks into training", s.id);
            assert!(fold.val.binary_search(&source_subject(&s.id).to_string()).is_ok());
        }
        // statistics come from the training part alone
        let train_raw: Vec<&RawSequence> = raw
            .iter()
            .filter(|r| fold.train.binary_search(&r.source).is_ok())
            .collect();
        assert_eq!(data.normalizer, Normalizer::fit(train_raw).unwrap());
        assert_eq!(data.train.len() + data.val.len(), raw.len());
    }
}

#[test]
fn fixed_seed_reruns_are_byte_identical() {
    let raw = small_sequences(2);
    let report = |run: &mciprog::train::PredictorRun| {
        let mut bytes = Vec::new();
        write_metric_report(&mut bytes, run).unwrap();
        bytes
    };
    let a = train_predictor(&raw, &tiny_model(), &short_schedule(4), 1).unwrap();
    let b = train_predictor(&raw, &tiny_model(), &short_schedule(4), 1).unwrap();
    let threaded = train_predictor(&raw, &tiny_model(), &short_schedule(4), 2).unwrap();
    assert_eq!(report(&a), report(&b));
    assert_eq!(report(&a), report(&threaded));
    for ((x, y), z) in a.folds.iter().zip(&b.folds).zip(&threaded.folds) {
        assert_eq!(x.last.to_bytes(), y.last.to_bytes());
        assert_eq!(x.best.to_bytes(), y.best.to_bytes());
        assert_eq!(x.last.to_bytes(), z.last.to_bytes());
    }
    assert_eq!(a.curves, b.curves);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let raw = small_sequences(3);
    let cfg = short_schedule(6);
    let fold = &cohort_folds(&raw, cfg.folds, cfg.seed).unwrap()[1];
    let data = prepare_fold(&raw, fold, false).unwrap();
    let fresh = || {
        let mut rng = fold_rng(cfg.seed, fold.index);
        let net = Predictor::new(&tiny_model(), &mut rng).unwrap();
        (PredictorModel(net), rng)
    };

    let (model, rng) = fresh();
    let mut straight = Trainer::new(model, &cfg, fold.index, rng).unwrap();
    straight.normalizer = Some(data.normalizer.clone());
    let mut saved = None;
    for e in 1..=cfg.epochs {
        straight.epoch(&data.train, &data.val).unwrap();
        if e == 3 {
            saved = Some(straight.checkpoint().to_bytes());
        }
    }

    let ckpt = mciprog::train::Checkpoint::from_bytes(&saved.unwrap()).unwrap();
    assert_eq!(ckpt.epoch, 3);
    // the shapes come from a differently seeded model
    let mut other = common::rng(77);
    let shell = PredictorModel(Predictor::new(&tiny_model(), &mut other).unwrap());
    let mut resumed = Trainer::resume(shell, &cfg, &ckpt).unwrap();
    for _ in 3..cfg.epochs {
        resumed.epoch(&data.train, &data.val).unwrap();
    }
    assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
}

#[test]
fn schedule_switches_after_the_given_epoch() {
    let cfg = short_schedule(10);
    let rates: Vec<f64> = (1..=10).map(|e| lr_schedule(e, &cfg)).collect();
    assert!(rates[..5].iter().all(|&r| r == cfg.base_lr));
    assert!(rates[5..].iter().all(|&r| r == cfg.late_lr));
    let extractor = TrainConfig::extractor_desk();
    assert!((1..=100).all(|e| lr_schedule(e, &extractor) == extractor.base_lr));
}

/// All four visits of forward-filled biomarkers, with values never recorded
/// left as `None`.
fn biomarker_features(rows: &[BiomarkerRow]) -> BTreeMap<String, Vec<Option<f64>>> {
    let mut by_subject: BTreeMap<String, [Option<[Option<f64>; NUM_BIOMARKERS]>; Visit::COUNT]> = BTreeMap::new();
    for r in rows {
        by_subject.entry(r.subject_id.clone()).or_default()[r.visit.index()] = Some(r.values);
    }
    by_subject
        .into_iter()
        .map(|(id, visits)| {
            let filled = forward_fill(&id, visits).unwrap();
            let mut carried = [None; NUM_BIOMARKERS];
            let mut out = Vec::new();
            for v in filled.visits {
                for (c, x) in carried.iter_mut().zip(v) {
                    if x.is_some() {
                        *c = x;
                    }
                }
                out.extend(carried);
            }
            (id, out)
        })
        .collect()
}

#[test]
fn biomarkers_alone_separate_the_default_cohort() {
    let cohort = synth_generate(&SyntheticCohortConfig::default()).unwrap();
    let features = biomarker_features(&cohort.biomarker_rows());
    let labels = cohort.labels();
    let subjects: Vec<(String, Label)> = labels.iter().map(|(s, l)| (s.clone(), *l)).collect();
    let folds = kfold_split(&subjects, 5, 42).unwrap();
    let mut accuracies = Vec::new();
    for fold in &folds {
        let width = Visit::COUNT * NUM_BIOMARKERS;
        let mut mean = vec![0.0; width];
        let mut count = vec![0usize; width];
        for id in &fold.train {
            for (j, v) in features[id].iter().enumerate() {
                if let Some(x) = v {
                    mean[j] += x;
                    count[j] += 1;
                }
            }
        }
        for (m, n) in mean.iter_mut().zip(&count) {
            *m /= (*n).max(1) as f64;
        }
        let dense = |id: &String| -> Vec<f64> {
            features[id].iter().zip(&mean).map(|(v, m)| v.unwrap_or(*m)).collect()
        };
        let x: Vec<Vec<f64>> = fold.train.iter().map(dense).collect();
        let y: Vec<u8> = fold.train.iter().map(|id| labels[id].index() as u8).collect();
        let model = Logistic::fit(&x, &y, 300, 0.5, 1e-3);
        let correct = fold
            .val
            .iter()
            .filter(|id| model.predict(&dense(id)) == labels[*id].index() as u8)
            .count();
        accuracies.push(correct as f64 / fold.val.len() as f64);
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    println!("logistic regression on biomarkers: fold accuracies {accuracies:?}, mean {mean:.4}");
    assert!(mean >= 0.80, "mean accuracy {mean}");
}

#[test]
fn extractor_learns_the_diagnostic_classes() {
    let images = synth_diagnostic(&DiagnosticCohortConfig {
        per_class: 20,
        image_side: 32,
        ..DiagnosticCohortConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 8,
        ..TrainConfig::extractor_desk()
    };
    let run = train_extractor(&images, &common::small_extractor(), &cfg).unwrap();
    let last = run.curves.last().unwrap();
    println!("extractor smoke: train acc {:.3}, val acc {:.3}", last.train_acc, last.val_acc);
    assert!(last.train_acc > 0.40, "train accuracy {}", last.train_acc);
    assert_eq!(run.best.epoch, run.curves.iter().find(|r| r.val_acc == run.best.best_val_accuracy).unwrap().epoch);
}

#[test]
fn feature_extraction_is_deterministic() {
    let cohort = synth_generate(&SyntheticCohortConfig {
        n_smci: 3,
        n_pmci: 2,
        image_side: 32,
        ..SyntheticCohortConfig::default()
    })
    .unwrap();
    let model = ExtractorModel(Extractor::new(&common::small_extractor(), &mut common::rng(5)).unwrap());
    let subjects: Vec<_> = cohort.subjects.iter().map(|s| (s.id.clone(), s.images.clone())).collect();
    let a = extract_features(&model, &subjects).unwrap();
    let b = extract_features(&model, &subjects).unwrap();
    assert_eq!(a, b);
    for (_, _, f) in a.iter() {
        assert_eq!(f.len(), IMAGE_FEATURES);
        assert!(f.iter().all(|v| v.is_finite()));
    }
}
