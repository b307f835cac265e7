use serde::{Deserialize, Serialize};

use super::Visit;
use crate::error::{Error, Result};

/// A visit that was absent and copied from an earlier one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FillRecord {
    pub subject_id: String,
    pub filled: Visit,
    pub from: Visit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Filled<T> {
    pub visits: [T; Visit::COUNT],
    pub fills: Vec<FillRecord>,
}

/// Replaces each missing visit with the most recent earlier one, so a
/// missing m18 takes the m12 data. Only earlier visits are ever read.
///
/// Fails when the baseline is absent, since nothing precedes it.
pub fn forward_fill<T: Clone>(subject_id: &str, visits: [Option<T>; Visit::COUNT]) -> Result<Filled<T>> {
    let mut fills = Vec::new();
    let mut last: Option<(Visit, T)> = None;
    let mut out = Vec::with_capacity(Visit::COUNT);
    for (visit, value) in Visit::ALL.into_iter().zip(visits) {
        match (value, &last) {
            (Some(v), _) => {
                last = Some((visit, v.clone()));
                out.push(v);
            }
            (None, Some((from, v))) => {
                log::debug!("{subject_id}: {visit} filled from {from}");
                fills.push(FillRecord {
                    subject_id: subject_id.to_string(),
                    filled: visit,
                    from: *from,
                });
                out.push(v.clone());
            }
            (None, None) => {
                return Err(Error::input(format!("{subject_id}: no baseline visit")));
            }
        }
    }
    let visits = out
        .try_into()
        .unwrap_or_else(|_| unreachable!("exactly one value per visit"));
    Ok(Filled { visits, fills })
}

/// Applies [`forward_fill`] to every subject, dropping (and logging) the
/// ones without a baseline. Returns the kept subjects and the excluded ids.
pub fn fill_cohort<T: Clone>(
    subjects: Vec<(String, [Option<T>; Visit::COUNT])>,
) -> (Vec<(String, Filled<T>)>, Vec<String>) {
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (id, visits) in subjects {
        match forward_fill(&id, visits) {
            Ok(filled) => kept.push((id, filled)),
            Err(e) => {
                log::warn!("excluding subject: {e}");
                excluded.push(id);
            }
        }
    }
    (kept, excluded)
}
