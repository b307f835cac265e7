//! Plain-text reports: training curves, per-fold metrics, ablation tables.

use std::io::Write;

use super::predictor::{AblationReport, PredictorRun};
use super::CurveRow;
use crate::error::{Error, Result};
use crate::metrics::{format_metric, Metrics};

fn flush<W: Write>(mut csv: csv::Writer<W>) -> Result<()> {
    csv.flush().map_err(|e| Error::io("<report>", e))
}

/// Columns `fold, epoch, lr, train_loss, val_loss, train_acc, val_acc`.
pub fn write_curves(writer: impl Write, rows: &[CurveRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    for row in rows {
        csv.serialize(row)?;
    }
    if rows.is_empty() {
        csv.write_record(["fold", "epoch", "lr", "train_loss", "val_loss", "train_acc", "val_acc"])?;
    }
    flush(csv)
}

fn metric_cells(m: &Metrics) -> [String; 4] {
    [
        format!("{:.6}", m.accuracy),
        format_metric(m.precision),
        format_metric(m.recall),
        format_metric(m.f1),
    ]
}

/// One row per fold plus a `mean` row: accuracy, precision, recall, F1,
/// validation loss and the confusion counts. Undefined values read
/// `undefined`.
pub fn write_metric_report(writer: impl Write, run: &PredictorRun) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["fold", "accuracy", "precision", "recall", "f1", "loss", "tp", "tn", "fp", "fn"])?;
    for f in &run.folds {
        let mut record = vec![f.fold.to_string()];
        record.extend(metric_cells(&f.metrics));
        record.push(format!("{:.6}", f.val_loss));
        let c = f.confusion;
        record.extend([c.tp, c.tn, c.fp, c.fn_].map(|n| n.to_string()));
        csv.write_record(&record)?;
    }
    let mut mean = vec!["mean".to_string()];
    mean.extend(metric_cells(&run.mean_metrics()));
    mean.push(format!("{:.6}", run.mean_val_loss()));
    let c = run.pooled_confusion();
    mean.extend([c.tp, c.tn, c.fp, c.fn_].map(|n| n.to_string()));
    csv.write_record(&mean)?;
    flush(csv)
}

/// Baseline and ablated mean metrics side by side, with recurrent
/// parameter counts.
pub fn write_ablation_table(writer: impl Write, reports: &[AblationReport]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["ablation", "model", "accuracy", "precision", "recall", "f1", "recurrent_params"])?;
    for r in reports {
        for run in [&r.baseline, &r.ablated] {
            let mut record = vec![r.mode.name().to_string(), run.name.clone()];
            record.extend(metric_cells(&run.mean_metrics()));
            record.push(run.recurrent_params()?.to_string());
            csv.write_record(&record)?;
        }
    }
    flush(csv)
}
