use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mciprog::config::PipelineConfig;
use mciprog::data::io::{read_images, read_labels, save_feature_cache, load_feature_cache, write_fold_manifest, write_images, write_labels};
use mciprog::data::{assemble_sequences, load_biomarkers, synth_diagnostic, synth_generate, write_biomarkers, Label, RawSequence};
use mciprog::pipeline::{
    augment_and_extract, cohort_images, diagnostic_from_records, diagnostic_records, subjects_from_records, visit_records,
};
use mciprog::recurrent::BiLstmConfig;
use mciprog::train::report::{write_ablation_table, write_curves, write_metric_report};
use mciprog::train::{self, cohort_folds, evaluate_saved, run_ablation, Ablation, Checkpoint, ExtractorModel, TrainConfig};

use crate::manifest::{file_sha256, now_unix, sha256_hex, Artifact, RunManifest};
use crate::Global;

const IMAGES: &str = "cohort/images.bin";
const BIOMARKERS: &str = "cohort/biomarkers.csv";
const LABELS: &str = "cohort/labels.csv";
const DIAGNOSTIC: &str = "cohort/diagnostic.bin";
const EXTRACTOR_BEST: &str = "extractor/best.ckpt";
const FEATURES: &str = "features/features.csv";
const PREDICTOR_TRAIN: &str = "predictor/train.json";
const PREDICTOR_METRICS: &str = "predictor/metrics.csv";

fn fold_checkpoint(fold: usize, which: &str) -> String {
    format!("predictor/fold{fold}.{which}.ckpt")
}

pub fn resolve_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::desk(),
    };
    if g.paper_scale {
        let paper = PipelineConfig::paper();
        cfg.extractor = paper.extractor;
        cfg.predictor = paper.predictor;
    }
    if let Some(seed) = g.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One command invocation: resolved configuration plus the artifacts read
/// and written so far.
struct Run<'a> {
    global: &'a Global,
    command: &'static str,
    cfg: PipelineConfig,
    started: u64,
    inputs: Vec<Artifact>,
    outputs: Vec<String>,
}

impl<'a> Run<'a> {
    fn start(global: &'a Global, command: &'static str) -> Result<Self> {
        let cfg = resolve_config(global)?;
        fs::create_dir_all(&global.out).with_context(|| format!("creating {}", global.out.display()))?;
        Ok(Self {
            global,
            command,
            cfg,
            started: now_unix(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn out(&self) -> &Path {
        &self.global.out
    }

    fn input(&mut self, producer: &str, rel: &str) -> Result<PathBuf> {
        let (path, artifact) = crate::manifest::require(self.out(), producer, rel)?;
        self.inputs.push(artifact);
        Ok(path)
    }

    fn output(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.out().join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        self.outputs.push(rel.to_string());
        Ok(path)
    }

    fn create(&mut self, rel: &str) -> Result<BufWriter<File>> {
        let path = self.output(rel)?;
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(BufWriter::new(file))
    }

    fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.output(rel)?;
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    /// Checksums every output and writes the manifest last, so a manifest
    /// only exists for a run whose outputs were all written.
    fn finish(self) -> Result<()> {
        let outputs = self
            .outputs
            .iter()
            .map(|rel| {
                Ok(Artifact {
                    path: rel.clone(),
                    sha256: file_sha256(&self.out().join(rel))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command.to_string(),
            config: self.global.config.clone(),
            seed: self.cfg.predictor.train.seed,
            paper_scale: self.global.paper_scale,
            config_sha256: sha256_hex(self.cfg.to_toml().as_bytes()),
            started_unix: self.started,
            finished_unix: now_unix(),
            inputs: self.inputs,
            outputs,
        };
        let path = manifest.write(&self.global.out)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}

fn flush(mut w: BufWriter<File>) -> Result<()> {
    w.flush().context("flushing output")
}

pub fn synth(g: &Global) -> Result<()> {
    let mut run = Run::start(g, "synth")?;
    let cohort = synth_generate(&run.cfg.synth)?;
    let diagnostic = synth_diagnostic(&run.cfg.diagnostic)?;
    let records = visit_records(&cohort_images(&cohort));
    write_images(run.output(IMAGES)?, &records)?;
    let mut w = run.create(BIOMARKERS)?;
    write_biomarkers(&mut w, &cohort.biomarker_rows())?;
    flush(w)?;
    write_labels(run.output(LABELS)?, &cohort.labels())?;
    write_images(run.output(DIAGNOSTIC)?, &diagnostic_records(&diagnostic))?;
    println!(
        "{} subjects ({} sMCI, {} pMCI), {} visit images; {} diagnostic images",
        cohort.subjects.len(),
        cohort.count(Label::Smci),
        cohort.count(Label::Pmci),
        records.len(),
        diagnostic.len()
    );
    run.finish()
}

pub fn train_extractor(g: &Global) -> Result<()> {
    let mut run = Run::start(g, "train-extractor")?;
    let images = diagnostic_from_records(read_images(run.input("synth", DIAGNOSTIC)?)?)?;
    let result = train::train_extractor(&images, &run.cfg.extractor.model, &run.cfg.extractor.train)?;
    result.best.save(run.output(EXTRACTOR_BEST)?)?;
    result.last.save(run.output("extractor/last.ckpt")?)?;
    let mut w = run.create("extractor/curves.csv")?;
    write_curves(&mut w, &result.curves)?;
    flush(w)?;
    println!(
        "extractor: best validation accuracy {:.4} at epoch {}",
        result.best.best_val_accuracy, result.best.epoch
    );
    run.finish()
}

pub fn extract(g: &Global) -> Result<()> {
    let mut run = Run::start(g, "extract")?;
    let labels = read_labels(run.input("synth", LABELS)?)?;
    let subjects = subjects_from_records(read_images(run.input("synth", IMAGES)?)?, &labels)?;
    let ckpt = Checkpoint::load(run.input("train-extractor", EXTRACTOR_BEST)?)?;
    let model = ExtractorModel::from_checkpoint(&ckpt)?;
    let n = subjects.len();
    let table = augment_and_extract(subjects, &model, run.cfg.rebalance_multiplier, run.cfg.synth.seed)?;
    save_feature_cache(run.output(FEATURES)?, &table)?;
    println!(
        "{} feature vectors for {} sequences ({n} subjects before augmentation)",
        table.len(),
        table.subjects().count()
    );
    run.finish()
}

fn load_sequences(run: &mut Run) -> Result<Vec<RawSequence>> {
    let features = load_feature_cache(run.input("extract", FEATURES)?)?;
    let biomarkers = load_biomarkers(run.input("synth", BIOMARKERS)?)?;
    let labels = read_labels(run.input("synth", LABELS)?)?;
    let (raw, excluded) = assemble_sequences(&features, &biomarkers, &labels)?;
    if !excluded.is_empty() {
        log::warn!("{} sequences excluded for lack of a baseline visit", excluded.len());
    }
    Ok(raw)
}

fn report_bytes(run: &train::PredictorRun) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    write_metric_report(&mut bytes, run)?;
    Ok(bytes)
}

pub fn train_predictor(g: &Global) -> Result<()> {
    let mut run = Run::start(g, "train-predictor")?;
    let raw = load_sequences(&mut run)?;
    let (model, cfg) = (run.cfg.predictor.model.clone(), run.cfg.predictor.train.clone());
    let result = train::train_predictor(&raw, &model, &cfg, g.jobs)?;

    let report = report_bytes(&result)?;
    run.write_bytes(PREDICTOR_METRICS, &report)?;
    let mut w = run.create("predictor/curves.csv")?;
    write_curves(&mut w, &result.curves)?;
    flush(w)?;
    let folds = cohort_folds(&raw, cfg.folds, cfg.seed)?;
    let labels = read_labels(g.out.join(LABELS))?;
    let mut w = run.create("predictor/folds.csv")?;
    write_fold_manifest(&mut w, &folds, &labels)?;
    flush(w)?;
    for f in &result.folds {
        f.last.save(run.output(&fold_checkpoint(f.fold, "last"))?)?;
        f.best.save(run.output(&fold_checkpoint(f.fold, "best"))?)?;
    }
    let train_json = serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n";
    run.write_bytes(PREDICTOR_TRAIN, train_json.as_bytes())?;
    print!("{}", String::from_utf8_lossy(&report));
    run.finish()
}

pub fn evaluate(g: &Global) -> Result<()> {
    let mut run = Run::start(g, "evaluate")?;
    let raw = load_sequences(&mut run)?;
    let cfg: TrainConfig = serde_json::from_slice(&fs::read(run.input("train-predictor", PREDICTOR_TRAIN)?)?)
        .context("parsing the saved training configuration")?;
    let stored = fs::read(run.input("train-predictor", PREDICTOR_METRICS)?)?;
    let folds = cohort_folds(&raw, cfg.folds, cfg.seed)?;
    let mut checkpoints = Vec::with_capacity(folds.len());
    for fold in &folds {
        let last = Checkpoint::load(run.input("train-predictor", &fold_checkpoint(fold.index, "last"))?)?;
        let best = Checkpoint::load(run.input("train-predictor", &fold_checkpoint(fold.index, "best"))?)?;
        checkpoints.push((last, best));
    }
    let result = evaluate_saved(&raw, &folds, &checkpoints, &cfg, "baseline")?;
    let report = report_bytes(&result)?;
    if report != stored {
        bail!("saved fold models do not reproduce {PREDICTOR_METRICS}");
    }
    run.write_bytes("predictor/evaluation.csv", &report)?;
    print!("{}", String::from_utf8_lossy(&report));
    run.finish()
}

pub fn ablate(g: &Global, modes: &[Ablation]) -> Result<()> {
    let mut run = Run::start(g, "ablate")?;
    let raw = load_sequences(&mut run)?;
    let modes = if modes.is_empty() { &Ablation::ALL[..] } else { modes };
    let (model, cfg): (BiLstmConfig, TrainConfig) = (run.cfg.predictor.model.clone(), run.cfg.predictor.train.clone());
    let baseline = train::train_predictor(&raw, &model, &cfg, g.jobs)?;
    run.write_bytes("ablation/baseline_metrics.csv", &report_bytes(&baseline)?)?;
    let mut reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        let report = run_ablation(mode, &raw, &model, &cfg, Some(&baseline), g.jobs)?;
        let mut w = run.create(&format!("ablation/{}.csv", mode.name()))?;
        write_ablation_table(&mut w, std::slice::from_ref(&report))?;
        flush(w)?;
        run.write_bytes(&format!("ablation/{}_metrics.csv", mode.name()), &report_bytes(&report.ablated)?)?;
        println!(
            "{}: accuracy {:.4} vs baseline {:.4}",
            mode.name(),
            report.ablated.mean_accuracy(),
            baseline.mean_accuracy()
        );
        reports.push(report);
    }
    let mut table = Vec::new();
    write_ablation_table(&mut table, &reports)?;
    run.write_bytes("ablation/summary.csv", &table)?;
    print!("{}", String::from_utf8_lossy(&table));
    run.finish()
}
