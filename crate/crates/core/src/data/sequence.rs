use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::fill::{forward_fill, FillRecord};
use super::{source_subject, BiomarkerRow, Label, Visit, NUM_BIOMARKERS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Image features per timepoint.
pub const IMAGE_FEATURES: usize = crate::stem::FEATURE_WIDTH;
/// Values per timepoint: image features, then biomarkers in [`super::BIOMARKERS`] order.
pub const STEP_WIDTH: usize = IMAGE_FEATURES + NUM_BIOMARKERS;

const STD_FLOOR: f64 = 1e-8;

/// Image feature vectors keyed by subject id and visit. Augmented copies
/// appear under their own ids (see [`super::augmented_id`]).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    rows: BTreeMap<String, [Option<Vec<f64>>; Visit::COUNT]>,
}

impl FeatureTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, subject_id: &str, visit: Visit, features: Vec<f64>) -> Result<()> {
        if features.len() != IMAGE_FEATURES {
            return Err(Error::Dimension {
                op: "feature table",
                lhs: vec![features.len()],
                rhs: vec![IMAGE_FEATURES],
            });
        }
        self.rows.entry(subject_id.to_string()).or_default()[visit.index()] = Some(features);
        Ok(())
    }

    pub fn get(&self, subject_id: &str, visit: Visit) -> Option<&[f64]> {
        self.rows.get(subject_id)?[visit.index()].as_deref()
    }

    pub fn subjects(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    /// Number of stored (subject, visit) vectors.
    pub fn len(&self) -> usize {
        self.rows.values().map(|v| v.iter().flatten().count()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Visit, &[f64])> {
        self.rows.iter().flat_map(|(id, visits)| {
            Visit::ALL
                .into_iter()
                .zip(visits)
                .filter_map(move |(v, f)| f.as_deref().map(|f| (id.as_str(), v, f)))
        })
    }
}

/// An assembled sequence before normalization. `None` marks a biomarker
/// that no visit up to and including this one recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSequence {
    pub subject_id: String,
    pub source: String,
    pub label: Label,
    pub augmented: bool,
    /// `4 × STEP_WIDTH`, row-major by timepoint.
    pub values: Vec<Option<f64>>,
    pub fills: Vec<FillRecord>,
}

/// A normalized model input of `4 × width` finite values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub subject_id: String,
    pub source: String,
    pub label: Label,
    pub augmented: bool,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureSequence {
    pub fn steps(&self) -> usize {
        self.values.len() / self.width
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.values[t * self.width..(t + 1) * self.width]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.steps(), self.width], self.values.clone()).expect("sequence length is steps × width")
    }

    /// The same sequence with the biomarker columns removed.
    pub fn image_only(&self) -> Self {
        let keep = self.width.min(IMAGE_FEATURES);
        let values = (0..self.steps()).flat_map(|t| self.step(t)[..keep].to_vec()).collect();
        Self {
            width: keep,
            values,
            ..self.clone()
        }
    }
}

/// Joins image features and biomarkers into one sequence per feature-table
/// id. Missing visits are forward-filled per modality; a biomarker value
/// recorded as missing at a present visit takes the latest earlier recorded
/// value, and stays missing if there is none.
///
/// Subjects without a baseline in either modality are excluded and returned
/// in the second list. A subject present in only one modality, or without a
/// label, is an error.
pub fn assemble_sequences(
    features: &FeatureTable,
    biomarkers: &[BiomarkerRow],
    labels: &BTreeMap<String, Label>,
) -> Result<(Vec<RawSequence>, Vec<String>)> {
    let mut by_subject: BTreeMap<&str, [Option<&BiomarkerRow>; Visit::COUNT]> = BTreeMap::new();
    for row in biomarkers {
        by_subject.entry(row.subject_id.as_str()).or_default()[row.visit.index()] = Some(row);
    }
    let feature_sources: std::collections::BTreeSet<&str> = features.subjects().map(source_subject).collect();
    if let Some(orphan) = by_subject.keys().find(|s| !feature_sources.contains(*s)) {
        return Err(Error::input(format!("{orphan}: biomarkers present but no image features")));
    }

    let mut sequences = Vec::new();
    let mut excluded = Vec::new();
    for (id, visits) in &features.rows {
        let source = source_subject(id);
        let marker_visits = by_subject
            .get(source)
            .ok_or_else(|| Error::input(format!("{id}: image features present but no biomarkers")))?;
        let label = *labels
            .get(source)
            .ok_or_else(|| Error::input(format!("{source}: no label")))?;
        let filled_images = forward_fill(id, visits.clone());
        let filled_markers = forward_fill(id, marker_visits.map(|r| r.map(|r| r.values)));
        let (images, markers) = match (filled_images, filled_markers) {
            (Ok(i), Ok(m)) => (i, m),
            (Err(e), _) | (_, Err(e)) => {
                log::warn!("excluding subject: {e}");
                excluded.push(id.clone());
                continue;
            }
        };

        let mut values = Vec::with_capacity(Visit::COUNT * STEP_WIDTH);
        let mut carried = [None; NUM_BIOMARKERS];
        for (image, marker) in images.visits.iter().zip(&markers.visits) {
            values.extend(image.iter().map(|&x| Some(x)));
            for (c, m) in carried.iter_mut().zip(marker) {
                if m.is_some() {
                    *c = *m;
                }
            }
            values.extend(carried);
        }
        let mut fills = images.fills;
        fills.extend(markers.fills);
        sequences.push(RawSequence {
            subject_id: id.clone(),
            source: source.to_string(),
            label,
            augmented: id.as_str() != source,
            values,
            fills,
        });
    }
    Ok((sequences, excluded))
}

/// Per-feature z-score statistics, pooled over timepoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits on the given sequences only, which must be the training split.
    /// Missing values are skipped.
    pub fn fit<'a>(train: impl IntoIterator<Item = &'a RawSequence>) -> Result<Self> {
        let train: Vec<&RawSequence> = train.into_iter().collect();
        if train.is_empty() {
            return Err(Error::input("cannot fit normalization on an empty split"));
        }
        let mut mean = vec![0.0; STEP_WIDTH];
        let mut count = vec![0usize; STEP_WIDTH];
        for seq in &train {
            for (j, v) in seq.values.iter().enumerate() {
                if let Some(x) = v {
                    mean[j % STEP_WIDTH] += x;
                    count[j % STEP_WIDTH] += 1;
                }
            }
        }
        for (m, &n) in mean.iter_mut().zip(&count) {
            *m = if n > 0 { *m / n as f64 } else { 0.0 };
        }
        let mut var = vec![0.0; STEP_WIDTH];
        for seq in &train {
            for (j, v) in seq.values.iter().enumerate() {
                if let Some(x) = v {
                    let f = j % STEP_WIDTH;
                    var[f] += (x - mean[f]).powi(2);
                }
            }
        }
        let std = var
            .iter()
            .zip(&count)
            .map(|(&v, &n)| if n > 0 { (v / n as f64).sqrt() } else { 0.0 })
            .collect();
        Ok(Self { mean, std })
    }

    /// Maps a raw sequence to z-scores. Missing values and zero-variance
    /// features become 0, the training mean.
    pub fn apply(&self, raw: &RawSequence) -> FeatureSequence {
        let values = raw
            .values
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let f = j % STEP_WIDTH;
                match v {
                    Some(x) if self.std[f] > STD_FLOOR => (x - self.mean[f]) / self.std[f],
                    _ => 0.0,
                }
            })
            .collect();
        FeatureSequence {
            subject_id: raw.subject_id.clone(),
            source: raw.source.clone(),
            label: raw.label,
            augmented: raw.augmented,
            width: STEP_WIDTH,
            values,
        }
    }
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            mean: vec![0.0; STEP_WIDTH],
            std: vec![1.0; STEP_WIDTH],
        }
    }
}
