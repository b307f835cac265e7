//! Binary classification metrics with pMCI as the positive class.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn from_predictions(predictions: &[u8], labels: &[u8]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::input(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        if predictions.is_empty() {
            return Err(Error::input("no predictions to score"));
        }
        let mut cm = Self::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p, y) {
                (1, 1) => cm.tp += 1,
                (0, 0) => cm.tn += 1,
                (1, 0) => cm.fp += 1,
                (0, 1) => cm.fn_ += 1,
                _ => return Err(Error::input(format!("labels must be 0 or 1, got ({p}, {y})"))),
            }
        }
        Ok(cm)
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        Metrics {
            accuracy: ratio(self.tp + self.tn, self.total()).unwrap_or(0.0),
            precision,
            recall,
            f1,
        }
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "            pred sMCI  pred pMCI")?;
        writeln!(f, "true sMCI  {:>9}  {:>9}", self.tn, self.fp)?;
        write!(f, "true pMCI  {:>9}  {:>9}", self.fn_, self.tp)
    }
}

/// Accuracy, precision, recall and F1. A ratio whose denominator is zero is
/// `None` and prints as `undefined`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn format_metric(value: Option<f64>) -> String {
    value.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "accuracy {:.6}  precision {}  recall {}  f1 {}",
            self.accuracy,
            format_metric(self.precision),
            format_metric(self.recall),
            format_metric(self.f1)
        )
    }
}

pub fn confusion_and_metrics(predictions: &[u8], labels: &[u8]) -> Result<(ConfusionMatrix, Metrics)> {
    let cm = ConfusionMatrix::from_predictions(predictions, labels)?;
    Ok((cm, cm.metrics()))
}

/// Mean of the defined values, or `None` when none are defined.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}
