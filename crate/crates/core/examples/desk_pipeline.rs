//! Runs the whole desk-scale pipeline in one process and prints the
//! cross-validation report.
//!
//! ```text
//! cargo run --release -p mciprog --example desk_pipeline [predictor-epochs]
//! ```

use std::time::Instant;

use mciprog::config::PipelineConfig;
use mciprog::data::{synth_diagnostic, synth_generate};
use mciprog::pipeline::build_sequences;
use mciprog::train::report::write_metric_report;
use mciprog::train::{train_extractor, train_predictor};

fn main() -> mciprog::Result<()> {
    let mut cfg = PipelineConfig::desk();
    if let Some(epochs) = std::env::args().nth(1) {
        let epochs: usize = epochs
            .parse()
            .map_err(|_| mciprog::Error::Config(format!("not an epoch count: {epochs}")))?;
        cfg.predictor.train.epochs = epochs;
        cfg.predictor.train.switch_epoch = Some(epochs / 2);
    }
    let start = Instant::now();
    let cohort = synth_generate(&cfg.synth)?;
    let diagnostic = synth_diagnostic(&cfg.diagnostic)?;
    let extractor = train_extractor(&diagnostic, &cfg.extractor.model, &cfg.extractor.train)?;
    println!(
        "extractor: best validation accuracy {:.3} at epoch {}",
        extractor.best.best_val_accuracy, extractor.best.epoch
    );
    let (_, sequences) = build_sequences(&cohort, &extractor.model, cfg.rebalance_multiplier, cfg.synth.seed)?;
    let run = train_predictor(&sequences, &cfg.predictor.model, &cfg.predictor.train, 1)?;
    write_metric_report(std::io::stdout(), &run)?;
    println!("{} sequences, {:.0}s", sequences.len(), start.elapsed().as_secs_f64());
    Ok(())
}
