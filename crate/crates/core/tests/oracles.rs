//! Library kernels against straight-line reference implementations and
//! closed forms.

mod common;

use common::oracle;
use mciprog::losses::{bce_loss, cross_entropy, focal_loss, FocalLossConfig};
use mciprog::metrics::confusion_and_metrics;
use mciprog::recurrent::{count_recurrent_params, lstm_cell_step, BiLstmConfig, LstmCellParams};
use mciprog::tensor::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_distribution(rng: &mut ChaCha8Rng, classes: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn onehot(classes: usize, y: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes]);
    t.data_mut()[y] = 1.0;
    t
}

#[test]
fn lstm_step_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let input = 1 + case % 7;
        let hidden = 1 + (case / 7) % 6;
        let mut store = ParamStore::new();
        let cell = LstmCellParams::new(&mut store, "cell", input, hidden, &mut rng).unwrap();
        // random biases too, not just the initial ones
        for id in cell.biases {
            store.get_mut(id).value = Tensor::randn(&[hidden], 0.5, &mut rng);
        }
        let x: Vec<f64> = (0..input).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h: Vec<f64> = (0..hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..hidden).map(|_| rng.random_range(-2.0..2.0)).collect();

        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let xv = tape.constant(Tensor::vector(x.clone()));
        let hv = tape.constant(Tensor::vector(h.clone()));
        let cv = tape.constant(Tensor::vector(c.clone()));
        let (h1, c1) = lstm_cell_step(&mut tape, &cell.bind(&params), xv, hv, cv).unwrap();

        let w = cell.weights.map(|id| store.value(id).data().to_vec());
        let b = cell.biases.map(|id| store.value(id).data().to_vec());
        let (h_ref, c_ref) = oracle::lstm_step(&w, &b, &x, &h, &c);
        for (got, want) in tape.value(h1).data().iter().zip(&h_ref).chain(tape.value(c1).data().iter().zip(&c_ref)) {
            worst = worst.max((got - want).abs());
        }
    }
    assert!(worst <= 1e-12, "worst abs. difference {worst:e}");
}

#[test]
fn focal_without_focusing_is_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let plain = FocalLossConfig {
        alpha: vec![1.0],
        gamma: 0.0,
    };
    for _ in 0..1000 {
        let classes = rng.random_range(2..6);
        let p = random_distribution(&mut rng, classes);
        let y = rng.random_range(0..classes);
        let (pt, yt) = (Tensor::vector(p.clone()), onehot(classes, y));
        let reference = oracle::cross_entropy(&p, y);
        let focal = focal_loss(&pt, &yt, &plain).unwrap();
        let ce = cross_entropy(&pt, &yt).unwrap();
        assert!((focal - reference).abs() <= 1e-12, "focal {focal} vs {reference}");
        assert!((ce - reference).abs() <= 1e-12, "ce {ce} vs {reference}");
    }
}

#[test]
fn focusing_never_increases_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1000 {
        let classes = rng.random_range(2..6);
        let p = random_distribution(&mut rng, classes);
        let y = rng.random_range(0..classes);
        let gamma = rng.random_range(0.1..5.0);
        let (pt, yt) = (Tensor::vector(p.clone()), onehot(classes, y));
        let cfg = FocalLossConfig {
            alpha: vec![1.0],
            gamma,
        };
        let focal = focal_loss(&pt, &yt, &cfg).unwrap();
        assert!(focal <= cross_entropy(&pt, &yt).unwrap());
        assert!((focal - oracle::focal(&p, y, 1.0, gamma)).abs() <= 1e-12);
    }
}

#[test]
fn focal_value_at_point_nine() {
    let p = Tensor::vector(vec![0.1, 0.9]);
    let loss = focal_loss(&p, &onehot(2, 1), &FocalLossConfig::default()).unwrap();
    // 0.1² · ln(1/0.9)
    assert!((loss - 1.0536e-3).abs() <= 1e-7, "{loss}");
    assert!((loss - oracle::focal(&[0.1, 0.9], 1, 1.0, 2.0)).abs() <= 1e-15);
}

#[test]
fn bce_matches_two_class_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let p = rng.random_range(0.001..0.999);
        let y = rng.random_range(0..2u8);
        let reference = oracle::cross_entropy(&[1.0 - p, p], usize::from(y));
        assert!((bce_loss(p, y).unwrap() - reference).abs() <= 1e-12);
    }
}

#[test]
fn f1_is_harmonic_mean_of_precision_and_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..500 {
        let n = rng.random_range(5..60);
        let preds: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let (c, m) = confusion_and_metrics(&preds, &labels).unwrap();
        assert_eq!(c.tp + c.tn + c.fp + c.fn_, n);
        match (m.precision, m.recall, m.f1) {
            (Some(p), Some(r), Some(f1)) if p > 0.0 && r > 0.0 => {
                assert!((f1 - oracle::harmonic_mean(p, r)).abs() <= 1e-12);
            }
            (_, _, f1) => assert!(f1.is_none() || f1 == Some(0.0)),
        }
    }
}

#[test]
fn recurrent_parameter_counts_reproduce_published_sizes() {
    let bi = BiLstmConfig::paper();
    let uni = BiLstmConfig {
        bidirectional: false,
        ..bi.clone()
    };
    // 4 gates · (256·(256+273) + 256)
    let per_direction = 4 * (256 * (256 + 273) + 256);
    assert_eq!(per_direction, 542_720);
    assert_eq!(count_recurrent_params(&uni, false).unwrap(), 542_720);
    assert_eq!(count_recurrent_params(&bi, false).unwrap(), 1_085_440);
    assert_eq!((542_720f64 / 1e6 * 2.0).round() / 2.0, 0.5);
    assert_eq!((1_085_440f64 / 1e6).round(), 1.0);
}
