//! Glue from a synthetic cohort to assembled sequences, and between
//! in-memory cohorts and the on-disk image stores.

use std::collections::BTreeMap;

use crate::data::io::ImageRecord;
use crate::data::{
    assemble_sequences, DiagnosticImage, Diagnosis, FeatureTable, Label, RawSequence, SyntheticCohort, Visit,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
pub use crate::train::SubjectImages;
use crate::train::{augment_cohort, extract_features, ExtractorModel};

pub fn cohort_images(cohort: &SyntheticCohort) -> Vec<SubjectImages> {
    cohort
        .subjects
        .iter()
        .map(|s| (s.id.clone(), s.label, s.images.clone()))
        .collect()
}

/// One record per present visit image, tagged with the visit index.
pub fn visit_records(subjects: &[SubjectImages]) -> Vec<ImageRecord> {
    subjects
        .iter()
        .flat_map(|(id, _, images)| {
            Visit::ALL.into_iter().zip(images).filter_map(move |(v, img)| {
                img.as_ref().map(|img| ImageRecord {
                    id: id.clone(),
                    tag: v.index() as u8,
                    image: img.clone(),
                })
            })
        })
        .collect()
}

/// Inverse of [`visit_records`]. Every record's subject needs a label.
pub fn subjects_from_records(records: Vec<ImageRecord>, labels: &BTreeMap<String, Label>) -> Result<Vec<SubjectImages>> {
    let mut by_id: BTreeMap<String, [Option<Tensor>; Visit::COUNT]> = BTreeMap::new();
    for r in records {
        let visit = *Visit::ALL
            .get(usize::from(r.tag))
            .ok_or_else(|| Error::input(format!("{}: visit tag {} out of range", r.id, r.tag)))?;
        let slot = &mut by_id.entry(r.id.clone()).or_default()[visit.index()];
        if slot.is_some() {
            return Err(Error::input(format!("{}: two images for visit {visit}", r.id)));
        }
        *slot = Some(r.image);
    }
    by_id
        .into_iter()
        .map(|(id, images)| {
            let label = *labels.get(&id).ok_or_else(|| Error::input(format!("{id}: no label")))?;
            Ok((id, label, images))
        })
        .collect()
}

pub fn diagnostic_records(images: &[DiagnosticImage]) -> Vec<ImageRecord> {
    images
        .iter()
        .map(|i| ImageRecord {
            id: i.id.clone(),
            tag: i.diagnosis.index() as u8,
            image: i.image.clone(),
        })
        .collect()
}

pub fn diagnostic_from_records(records: Vec<ImageRecord>) -> Result<Vec<DiagnosticImage>> {
    records
        .into_iter()
        .map(|r| {
            let diagnosis = *Diagnosis::ALL
                .get(usize::from(r.tag))
                .ok_or_else(|| Error::input(format!("{}: diagnosis tag {} out of range", r.id, r.tag)))?;
            Ok(DiagnosticImage {
                id: r.id,
                diagnosis,
                image: r.image,
            })
        })
        .collect()
}

/// Rebalances with rotated copies, then extracts features for every visit
/// image of every subject and copy.
pub fn augment_and_extract(
    subjects: Vec<SubjectImages>,
    extractor: &ExtractorModel,
    multiplier: Option<usize>,
    seed: u64,
) -> Result<FeatureTable> {
    let augmented = augment_cohort(subjects, multiplier, seed)?;
    let images: Vec<_> = augmented.into_iter().map(|(id, _, imgs)| (id, imgs)).collect();
    extract_features(extractor, &images)
}

/// [`augment_and_extract`] followed by assembly with the biomarkers.
pub fn build_sequences(
    cohort: &SyntheticCohort,
    extractor: &ExtractorModel,
    multiplier: Option<usize>,
    seed: u64,
) -> Result<(FeatureTable, Vec<RawSequence>)> {
    let table = augment_and_extract(cohort_images(cohort), extractor, multiplier, seed)?;
    let (sequences, excluded) = assemble_sequences(&table, &cohort.biomarker_rows(), &cohort.labels())?;
    if !excluded.is_empty() {
        log::warn!("{} subjects excluded during assembly", excluded.len());
    }
    Ok((table, sequences))
}
