//! Cohort data: biomarker tables, visit bookkeeping, sequence assembly,
//! augmentation, fold splitting and the synthetic cohort generator.

mod augment;
mod biomarkers;
mod fill;
mod folds;
pub mod io;
mod sequence;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{normalize_image, random_angle, rebalance, rebalance_multiplier, rotate_augment, MAX_ROTATION_DEG};
pub use biomarkers::{load_biomarkers, read_biomarkers, write_biomarkers, BiomarkerRow};
pub use fill::{fill_cohort, forward_fill, FillRecord, Filled};
pub use folds::{kfold_split, Fold, FoldRole};
pub use sequence::{
    assemble_sequences, FeatureSequence, FeatureTable, Normalizer, RawSequence, IMAGE_FEATURES, STEP_WIDTH,
};
pub use synth::{
    synth_diagnostic, synth_generate, BiomarkerTrend, ClassProfile, Spread, BIOMARKER_TRENDS, IMAGE_CHANNELS, DiagnosticCohortConfig, DiagnosticImage, SyntheticCohort,
    SyntheticCohortConfig, SyntheticSubject,
};

/// The 17 biomarker columns, in sequence order.
pub const BIOMARKERS: [&str; 17] = [
    "CDRSB",
    "ADAS11",
    "ADAS13",
    "ADASQ4",
    "MMSE",
    "RAVLT_immediate",
    "RAVLT_learning",
    "RAVLT_forgetting",
    "RAVLT_perc_forgetting",
    "FAQ",
    "Ventricles",
    "Hippocampus",
    "WholeBrain",
    "Entorhinal",
    "Fusiform",
    "MidTemp",
    "ICV",
];

pub const NUM_BIOMARKERS: usize = BIOMARKERS.len();

/// Scheduled visits: baseline, then months 6, 12 and 18.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Visit {
    Bl,
    M06,
    M12,
    M18,
}

impl Visit {
    pub const ALL: [Visit; 4] = [Visit::Bl, Visit::M06, Visit::M12, Visit::M18];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            Visit::Bl => "bl",
            Visit::M06 => "m06",
            Visit::M12 => "m12",
            Visit::M18 => "m18",
        }
    }

    pub fn months(self) -> f64 {
        6.0 * self.index() as f64
    }
}

impl fmt::Display for Visit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Visit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Visit::ALL
            .into_iter()
            .find(|v| v.code() == s)
            .ok_or_else(|| Error::input(format!("unknown visit code {s:?}")))
    }
}

/// Conversion outcome over the follow-up window. `Pmci` is the positive
/// class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "sMCI")]
    Smci,
    #[serde(rename = "pMCI")]
    Pmci,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Smci),
            1 => Ok(Label::Pmci),
            _ => Err(Error::input(format!("label index {i} is not 0 or 1"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Smci => "sMCI",
            Label::Pmci => "pMCI",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sMCI" | "0" => Ok(Label::Smci),
            "pMCI" | "1" => Ok(Label::Pmci),
            _ => Err(Error::input(format!("unknown label {s:?}"))),
        }
    }
}

/// Phase-1 diagnostic classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "MCI")]
    Mci,
    #[serde(rename = "AD")]
    Ad,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 3] = [Diagnosis::Cn, Diagnosis::Mci, Diagnosis::Ad];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Diagnosis::Cn => "CN",
            Diagnosis::Mci => "MCI",
            Diagnosis::Ad => "AD",
        }
    }
}

impl FromStr for Diagnosis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Diagnosis::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::input(format!("unknown diagnosis {s:?}")))
    }
}

/// Id of the original subject behind an augmented copy (`S001+rot2` → `S001`).
pub fn source_subject(id: &str) -> &str {
    id.split_once('+').map_or(id, |(src, _)| src)
}

/// Id given to the `k`-th rotated copy of `source`.
pub fn augmented_id(source: &str, k: usize) -> String {
    format!("{source}+rot{k}")
}
