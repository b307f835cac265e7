//! Cross-entropy, focal and binary cross-entropy objectives.
//!
//! The value functions here validate their inputs and return plain numbers.
//! [`Objective`] builds the same quantities on a tape from raw logits for
//! training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recurrent::OutputMode;
use crate::tensor::{Tape, Tensor, Var};

pub use crate::tensor::PROB_FLOOR;

const SUM_TOLERANCE: f64 = 1e-9;

/// Focal-loss parameters. `alpha` holds one weight per class, or a single
/// weight applied to every class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalLossConfig {
    pub alpha: Vec<f64>,
    pub gamma: f64,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        Self {
            alpha: vec![1.0],
            gamma: 2.0,
        }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() || self.alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::config("focal alpha must be positive"));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::config("focal gamma must be non-negative"));
        }
        Ok(())
    }

    /// Per-class weights for `classes` classes.
    pub fn alphas(&self, classes: usize) -> Result<Vec<f64>> {
        self.validate()?;
        match self.alpha.len() {
            1 => Ok(vec![self.alpha[0]; classes]),
            n if n == classes => Ok(self.alpha.clone()),
            n => Err(Error::config(format!("{n} focal alphas for {classes} classes"))),
        }
    }
}

fn check_distribution(probs: &Tensor, onehot: &Tensor) -> Result<()> {
    if probs.ndim() != 1 || probs.shape() != onehot.shape() || probs.is_empty() {
        return Err(Error::Dimension {
            op: "loss",
            lhs: probs.shape().to_vec(),
            rhs: onehot.shape().to_vec(),
        });
    }
    if probs.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::input("probabilities must lie in [0, 1]"));
    }
    if (probs.sum() - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::input(format!("probabilities sum to {}, not 1", probs.sum())));
    }
    let ones = onehot.data().iter().filter(|&&y| y == 1.0).count();
    let zeros = onehot.data().iter().filter(|&&y| y == 0.0).count();
    if ones != 1 || ones + zeros != onehot.len() {
        return Err(Error::input("target is not one-hot"));
    }
    Ok(())
}

/// `−Σ y_c log ŷ_c`, with `ŷ` clamped to `[1e-12, 1]`.
pub fn cross_entropy(probs: &Tensor, onehot: &Tensor) -> Result<f64> {
    focal_loss(
        probs,
        onehot,
        &FocalLossConfig {
            alpha: vec![1.0],
            gamma: 0.0,
        },
    )
}

/// `−Σ α_c y_c (1 − ŷ_c)^γ log ŷ_c`, with `ŷ` clamped to `[1e-12, 1]`.
pub fn focal_loss(probs: &Tensor, onehot: &Tensor, cfg: &FocalLossConfig) -> Result<f64> {
    check_distribution(probs, onehot)?;
    let alpha = cfg.alphas(probs.len())?;
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let loss = tape.focal(p, onehot, &alpha, cfg.gamma)?;
    Ok(tape.value(loss).item())
}

/// `−[y log p + (1−y) log(1−p)]` with both logs clamped.
pub fn bce_loss(p: f64, y: u8) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) || y > 1 {
        return Err(Error::input(format!("bce needs p in [0,1] and y in {{0,1}}, got {p}, {y}")));
    }
    Ok(crate::tensor::bce_value(p, f64::from(y)))
}

/// Training objective applied to a batch of head logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    CrossEntropy,
    Focal(FocalLossConfig),
    Bce,
}

impl Default for Objective {
    fn default() -> Self {
        Self::Focal(FocalLossConfig::default())
    }
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Self::CrossEntropy => "cross_entropy",
            Self::Focal(_) => "focal",
            Self::Bce => "bce",
        }
    }

    /// Mean loss over a batch of logits.
    ///
    /// With a single logit `z`, the class distribution is `[1−σ(z), σ(z)]`;
    /// with two logits it is their softmax. Multi-class logits (`B×C`, or a
    /// single `C` vector) go through softmax.
    pub fn batch_loss(&self, tape: &mut Tape, logits: Var, labels: &[usize], mode: OutputMode) -> Result<Var> {
        let (rows, width) = tape.value(logits).dims2()?;
        if rows != labels.len() || rows == 0 {
            return Err(Error::input(format!("{} labels for {rows} logit rows", labels.len())));
        }
        let single = mode == OutputMode::SingleLogit && width == 1;
        let classes = if single { 2 } else { width };
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::input(format!("label {bad} out of range for {classes} classes")));
        }
        let total = match self {
            Self::Bce => {
                if !single {
                    return Err(Error::config("bce objective needs a single-logit head"));
                }
                let p = tape.sigmoid(logits);
                let targets: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
                tape.bce(p, &targets)?
            }
            Self::CrossEntropy | Self::Focal(_) => {
                let probs = if single {
                    let p = tape.sigmoid(logits);
                    let q = tape.affine(p, -1.0, 1.0);
                    tape.concat(&[q, p], 1)?
                } else {
                    tape.softmax(logits)?
                };
                let mut target = Tensor::zeros(tape.value(probs).shape());
                for (r, &l) in labels.iter().enumerate() {
                    target.data_mut()[r * classes + l] = 1.0;
                }
                let (alpha, gamma) = match self {
                    Self::Focal(cfg) => (cfg.alphas(classes)?, cfg.gamma),
                    _ => (vec![1.0; classes], 0.0),
                };
                tape.focal(probs, &target, &alpha, gamma)?
            }
        };
        Ok(tape.scale(total, 1.0 / rows as f64))
    }
}
