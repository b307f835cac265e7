//! The acceptance suite: one PASS/FAIL line per criterion, tolerances as
//! pinned below. Criteria 6 to 9 train the full desk-scale pipeline and
//! take a few minutes on one core.

mod common;

use std::time::{Duration, Instant};

use common::oracle;
use common::reference::{bits, plain_extractor};
use mciprog::config::PipelineConfig;
use mciprog::data::io::write_feature_cache;
use mciprog::data::{
    forward_fill, synth_diagnostic, synth_generate, write_biomarkers, Label, Normalizer, RawSequence,
    SyntheticCohortConfig, Visit, STEP_WIDTH,
};
use mciprog::losses::{cross_entropy, focal_loss, FocalLossConfig};
use mciprog::pipeline::build_sequences;
use mciprog::recurrent::{count_recurrent_params, lstm_cell_step, BiLstmConfig, LstmCellParams};
use mciprog::stem::Extractor;
use mciprog::tensor::{ParamStore, Tape, Tensor};
use mciprog::train::report::write_metric_report;
use mciprog::train::{
    cohort_folds, fold_rng, prepare_fold, run_ablation, train_extractor, train_predictor, Ablation, Checkpoint,
    ExtractorModel, PredictorModel, PredictorRun, Sample, TrainConfig, Trainer,
};
use mciprog::recurrent::Predictor;
use mciprog::vit::{count_trainable_params, lora_param_count, VitConfig, VitEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_BUDGET: Duration = Duration::from_secs(120);
const RUN_BUDGET: Duration = Duration::from_secs(15 * 60);
const MIN_ACCURACY: f64 = 0.90;
const NULL_BAND: (f64, f64) = (0.40, 0.60);
const FOCAL_SLACK: f64 = 0.01;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn report(id: usize, name: &str, outcome: &Outcome) {
    let tag = if outcome.pass { "PASS" } else { "FAIL" };
    println!("{tag} {id} {name}: {}", outcome.detail);
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let cases = common::grad_cases();
    for case in &cases {
        let err = case.worst_error().unwrap();
        worst = worst.max(err);
        if !(err <= case.tol) {
            failures.push(format!("{} {err:.2e} > {:.0e}", case.name, case.tol));
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        failures.is_empty() && elapsed < GRAD_BUDGET,
        format!(
            "{} cases x {} trials, worst rel. err {worst:.2e}, {:.1}s{}",
            cases.len(),
            common::TRIALS,
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; over tolerance: {}", failures.join(", ")) }
        ),
    )
}

fn parameter_counts() -> Outcome {
    let bi = BiLstmConfig::paper();
    let uni = BiLstmConfig {
        bidirectional: false,
        ..bi.clone()
    };
    let (v, b) = (count_recurrent_params(&uni, false).unwrap(), count_recurrent_params(&bi, false).unwrap());
    let half_million = (v as f64 / 1e6 * 2.0).round() / 2.0;
    let million = (b as f64 / 1e6).round();
    Outcome::new(
        v == 542_720 && b == 1_085_440 && half_million == 0.5 && million == 1.0,
        format!("vanilla {v} (~{half_million}M), bidirectional {b} (~{million}M)"),
    )
}

fn equation_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut lstm_worst = 0.0f64;
    for case in 0..100 {
        let (input, hidden) = (1 + case % 9, 1 + case % 5);
        let mut store = ParamStore::new();
        let cell = LstmCellParams::new(&mut store, "cell", input, hidden, &mut rng).unwrap();
        for id in cell.biases {
            store.get_mut(id).value = Tensor::randn(&[hidden], 0.5, &mut rng);
        }
        let x: Vec<f64> = (0..input).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h: Vec<f64> = (0..hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..hidden).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let (xv, hv, cv) = (
            tape.constant(Tensor::vector(x.clone())),
            tape.constant(Tensor::vector(h.clone())),
            tape.constant(Tensor::vector(c.clone())),
        );
        let (h1, c1) = lstm_cell_step(&mut tape, &cell.bind(&params), xv, hv, cv).unwrap();
        let w = cell.weights.map(|id| store.value(id).data().to_vec());
        let b = cell.biases.map(|id| store.value(id).data().to_vec());
        let (h_ref, c_ref) = oracle::lstm_step(&w, &b, &x, &h, &c);
        for (got, want) in tape.value(h1).data().iter().zip(&h_ref).chain(tape.value(c1).data().iter().zip(&c_ref)) {
            lstm_worst = lstm_worst.max((got - want).abs());
        }
    }

    let plain = FocalLossConfig {
        alpha: vec![1.0],
        gamma: 0.0,
    };
    let mut focal_worst = 0.0f64;
    for _ in 0..1000 {
        let classes = rng.random_range(2..6);
        let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let y = rng.random_range(0..classes);
        let mut onehot = Tensor::zeros(&[classes]);
        onehot.data_mut()[y] = 1.0;
        let pt = Tensor::vector(p.clone());
        let reference = oracle::cross_entropy(&p, y);
        let f = focal_loss(&pt, &onehot, &plain).unwrap();
        let ce = cross_entropy(&pt, &onehot).unwrap();
        focal_worst = focal_worst.max((f - reference).abs()).max((ce - reference).abs());
    }

    let point = focal_loss(
        &Tensor::vector(vec![0.1, 0.9]),
        &Tensor::vector(vec![0.0, 1.0]),
        &FocalLossConfig::default(),
    )
    .unwrap();
    Outcome::new(
        lstm_worst <= 1e-12 && focal_worst <= 1e-12 && (point - 1.0536e-3).abs() <= 1e-7,
        format!(
            "LSTM step vs scalar reference {lstm_worst:.1e} (100 cases), focal(gamma=0) vs cross-entropy {focal_worst:.1e} (1000 cases), focal at 0.9 = {point:.7e}"
        ),
    )
}

fn lora_contracts() -> Outcome {
    let mut notes = Vec::new();
    let mut identical = true;
    for seed in 0..5 {
        let mut r = common::rng(100 + seed);
        let model = Extractor::new(&common::small_extractor(), &mut r).unwrap();
        let image = Tensor::randn(&[3, 32, 32], 1.0, &mut r);
        let (features, logits) = model.infer(&image).unwrap();
        let (f_ref, l_ref) = plain_extractor(&model, &image);
        identical &= bits(&features) == bits(&f_ref) && bits(&logits) == bits(&l_ref);
    }
    notes.push(format!("fresh adapters bit-identical: {identical}"));

    let mut r = common::rng(200);
    let model = ExtractorModel(Extractor::new(&common::small_extractor(), &mut r).unwrap());
    let initial = model.0.store.clone();
    let samples: Vec<Sample> = (0..8)
        .map(|i| Sample {
            id: format!("S{i}"),
            input: Tensor::randn(&[3, 32, 32], 1.0, &mut r),
            label: i % 3,
        })
        .collect();
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 25,
        ..TrainConfig::extractor_desk()
    };
    let mut trainer = Trainer::new(model, &cfg, 0, common::rng(201)).unwrap();
    for _ in 0..25 {
        trainer.train_pass(&samples).unwrap();
        trainer.epoch += 1;
    }
    let frozen_kept = initial
        .iter()
        .zip(trainer.model.0.store.iter())
        .filter(|((_, p), _)| !p.trainable)
        .all(|((_, a), (_, b))| bits(&a.value) == bits(&b.value));
    let adapters_moved = trainer.model.0.encoder.adapters().all(|a| {
        trainer.model.0.store.value(a.b).data().iter().any(|&v| v != 0.0)
    });
    notes.push(format!(
        "frozen weights unchanged after {} steps: {frozen_kept}",
        trainer.adam.step
    ));

    let mut counts_ok = true;
    let mut counts = Vec::new();
    for rank in [4, 8, 16, 32] {
        let cfg = VitConfig {
            rank,
            ..VitConfig::desk()
        };
        let mut store = ParamStore::new();
        VitEncoder::new(&mut store, &cfg, &mut common::rng(4)).unwrap();
        let expected = cfg.blocks * 3 * rank * (cfg.dim + cfg.dim);
        let got = count_trainable_params(&store).trainable;
        counts_ok &= got == expected && lora_param_count(cfg.blocks, cfg.dim, cfg.dim, rank) == expected;
        counts.push(format!("r={rank}: {got}"));
    }
    notes.push(format!("trainable counts {}", counts.join(", ")));
    Outcome::new(
        identical && frozen_kept && adapters_moved && trainer.adam.step == 50 && counts_ok,
        notes.join("; "),
    )
}

fn sequence_shapes(raw: &[RawSequence]) -> Outcome {
    let normalizer = Normalizer::fit(raw).unwrap();
    let shaped = raw.iter().all(|r| {
        let n = normalizer.apply(r);
        r.values.len() == 4 * 273 && n.steps() == 4 && n.width == 273 && n.values.iter().all(|v| v.is_finite())
    });
    let filled = forward_fill("S", [Some(0), Some(6), Some(12), None]).unwrap();
    let rule = filled.visits[3] == 12
        && filled.fills.len() == 1
        && filled.fills[0].filled == Visit::M18
        && filled.fills[0].from == Visit::M12;
    Outcome::new(
        shaped && rule && STEP_WIDTH == 273,
        format!(
            "{} sequences, all 4x{STEP_WIDTH} and finite: {shaped}; missing m18 takes m12: {rule}",
            raw.len()
        ),
    )
}

fn report_text(run: &PredictorRun) -> String {
    let mut bytes = Vec::new();
    write_metric_report(&mut bytes, run).unwrap();
    String::from_utf8(bytes).unwrap()
}

struct FullRun {
    cfg: PipelineConfig,
    extractor: ExtractorModel,
    raw: Vec<RawSequence>,
    baseline: PredictorRun,
    elapsed: Duration,
}

fn full_run() -> FullRun {
    let cfg = PipelineConfig::desk();
    let start = Instant::now();
    let cohort = synth_generate(&cfg.synth).unwrap();
    let diagnostic = synth_diagnostic(&cfg.diagnostic).unwrap();
    let extractor = train_extractor(&diagnostic, &cfg.extractor.model, &cfg.extractor.train)
        .unwrap()
        .model;
    let (_, raw) = build_sequences(&cohort, &extractor, cfg.rebalance_multiplier, cfg.synth.seed).unwrap();
    let baseline = train_predictor(&raw, &cfg.predictor.model, &cfg.predictor.train, 1).unwrap();
    FullRun {
        cfg,
        extractor,
        raw,
        baseline,
        elapsed: start.elapsed(),
    }
}

fn end_to_end(run: &FullRun) -> Outcome {
    let text = report_text(&run.baseline);
    println!("{text}");
    let header = text.lines().next().unwrap_or_default();
    let complete = ["accuracy", "precision", "recall", "f1", "tp", "tn", "fp", "fn"]
        .iter()
        .all(|c| header.split(',').any(|h| h == *c));
    let m = run.baseline.mean_metrics();
    let c = run.baseline.pooled_confusion();
    let cohort = &run.cfg.synth;
    Outcome::new(
        m.accuracy >= MIN_ACCURACY
            && run.elapsed < RUN_BUDGET
            && complete
            && run.cfg.predictor.train.epochs <= 100
            && run.baseline.folds.len() == 5
            && (cohort.n_smci, cohort.n_pmci) == (390, 140),
        format!(
            "mean val. accuracy {:.4} (>= {MIN_ACCURACY}), precision {}, recall {}, F1 {}, confusion tp {} tn {} fp {} fn {}, {} epochs, {:.0}s",
            m.accuracy,
            fmt(m.precision),
            fmt(m.recall),
            fmt(m.f1),
            c.tp,
            c.tn,
            c.fp,
            c.fn_,
            run.cfg.predictor.train.epochs,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |v| format!("{v:.4}"))
}

/// Mean training loss over epochs `from..=to`, across folds.
fn mean_train_loss(run: &PredictorRun, from: usize, to: usize) -> f64 {
    let rows: Vec<f64> = run
        .curves
        .iter()
        .filter(|r| (from..=to).contains(&r.epoch))
        .map(|r| r.train_loss)
        .collect();
    rows.iter().sum::<f64>() / rows.len().max(1) as f64
}

fn ablations(run: &FullRun) -> Outcome {
    let (model, train) = (&run.cfg.predictor.model, &run.cfg.predictor.train);
    let base = run.baseline.mean_accuracy();
    let acc = |mode| {
        run_ablation(mode, &run.raw, model, train, Some(&run.baseline), 1)
            .unwrap()
            .ablated
            .mean_accuracy()
    };
    let (no_bio, vanilla, bce) = (acc(Ablation::NoBiomarkers), acc(Ablation::VanillaLstm), acc(Ablation::BceLoss));
    Outcome::new(
        base > no_bio && base >= vanilla && base >= bce - FOCAL_SLACK,
        format!(
            "full {base:.4}; no_biomarkers {no_bio:.4} (lower); vanilla_lstm {vanilla:.4} (not higher); bce_loss {bce:.4} (focal >= bce - {FOCAL_SLACK})"
        ),
    )
}

fn determinism(run: &FullRun) -> Outcome {
    let mut notes = Vec::new();

    // cohort files
    let cohort_bytes = || {
        let cohort = synth_generate(&run.cfg.synth).unwrap();
        let mut bytes = Vec::new();
        write_biomarkers(&mut bytes, &cohort.biomarker_rows()).unwrap();
        for s in &cohort.subjects {
            for img in s.images.iter().flatten() {
                bytes.extend(img.data().iter().flat_map(|v| v.to_le_bytes()));
            }
        }
        bytes
    };
    let cohort_same = cohort_bytes() == cohort_bytes();
    notes.push(format!("cohort {cohort_same}"));

    // feature cache from the trained extractor
    let cohort = synth_generate(&run.cfg.synth).unwrap();
    let features = || {
        let (table, _) = build_sequences(&cohort, &run.extractor, run.cfg.rebalance_multiplier, run.cfg.synth.seed).unwrap();
        let mut bytes = Vec::new();
        write_feature_cache(&mut bytes, &table).unwrap();
        bytes
    };
    let features_same = features() == features();
    notes.push(format!("features {features_same}"));

    // predictor reports and checkpoints on a shortened schedule
    let short = TrainConfig {
        epochs: 6,
        switch_epoch: Some(3),
        ..run.cfg.predictor.train.clone()
    };
    let model = &run.cfg.predictor.model;
    let a = train_predictor(&run.raw, model, &short, 1).unwrap();
    let b = train_predictor(&run.raw, model, &short, 1).unwrap();
    let runs_same = report_text(&a) == report_text(&b)
        && a.folds
            .iter()
            .zip(&b.folds)
            .all(|(x, y)| x.last.to_bytes() == y.last.to_bytes() && x.best.to_bytes() == y.best.to_bytes());
    notes.push(format!("predictor reports and checkpoints {runs_same}"));

    // interrupt after epoch 3 and continue from the saved bytes
    let fold = &cohort_folds(&run.raw, short.folds, short.seed).unwrap()[0];
    let data = prepare_fold(&run.raw, fold, false).unwrap();
    let mut rng = fold_rng(short.seed, fold.index);
    let net = Predictor::new(model, &mut rng).unwrap();
    let mut straight = Trainer::new(PredictorModel(net), &short, fold.index, rng).unwrap();
    straight.normalizer = Some(data.normalizer.clone());
    let mut saved = Vec::new();
    for e in 1..=short.epochs {
        straight.epoch(&data.train, &data.val).unwrap();
        if e == 3 {
            saved = straight.checkpoint().to_bytes();
        }
    }
    let ckpt = Checkpoint::from_bytes(&saved).unwrap();
    let shell = PredictorModel(Predictor::new(model, &mut common::rng(999)).unwrap());
    let mut resumed = Trainer::resume(shell, &short, &ckpt).unwrap();
    for _ in 3..short.epochs {
        resumed.epoch(&data.train, &data.val).unwrap();
    }
    let resume_same = resumed.checkpoint().to_bytes() == straight.checkpoint().to_bytes();
    let final_fold_same = straight.checkpoint().to_bytes() == a.folds[0].last.to_bytes();
    notes.push(format!("resume at epoch 3 bit-exact {resume_same}, matches the uninterrupted fold {final_fold_same}"));

    Outcome::new(
        cohort_same && features_same && runs_same && resume_same && final_fold_same,
        notes.join("; "),
    )
}

fn null_signal(run: &FullRun) -> Outcome {
    let synth = SyntheticCohortConfig {
        seed: run.cfg.synth.seed,
        ..SyntheticCohortConfig::null_signal()
    };
    let cohort = synth_generate(&synth).unwrap();
    let (_, raw) = build_sequences(&cohort, &run.extractor, run.cfg.rebalance_multiplier, synth.seed).unwrap();
    let null = train_predictor(&raw, &run.cfg.predictor.model, &run.cfg.predictor.train, 1).unwrap();
    let acc = null.mean_accuracy();
    let smci = raw.iter().filter(|r| r.label == Label::Smci).count();
    Outcome::new(
        (NULL_BAND.0..=NULL_BAND.1).contains(&acc),
        format!(
            "mean val. accuracy {acc:.4} in [{}, {}] ({} sequences, {smci} sMCI)",
            NULL_BAND.0,
            NULL_BAND.1,
            raw.len()
        ),
    )
}

#[test]
fn acceptance() {
    let mut outcomes = Vec::new();
    let mut record = |id: usize, name: &str, o: Outcome| {
        report(id, name, &o);
        outcomes.push((id, o.pass));
    };
    record(1, "gradient integrity", gradient_integrity());
    record(2, "recurrent parameter counts", parameter_counts());
    record(3, "equation fidelity", equation_fidelity());
    record(4, "low-rank adapter contracts", lora_contracts());

    let run = full_run();
    record(5, "sequence shape", sequence_shapes(&run.raw));
    record(6, "end-to-end synthetic run", end_to_end(&run));
    let (late, early) = (mean_train_loss(&run.baseline, 51, 60), mean_train_loss(&run.baseline, 41, 50));
    println!(
        "note: mean training loss over epochs 51-60 {late:.5} vs 41-50 {early:.5} after the schedule drop ({})",
        if late <= early { "not higher" } else { "higher" }
    );
    record(7, "ablation directions", ablations(&run));
    record(8, "determinism and checkpointing", determinism(&run));
    record(9, "null-signal control", null_signal(&run));

    let failed: Vec<usize> = outcomes.iter().filter(|(_, pass)| !pass).map(|(id, _)| *id).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
