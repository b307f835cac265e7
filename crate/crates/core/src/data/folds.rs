use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::source_subject;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldRole {
    Train,
    Val,
}

/// One cross-validation partition of subject ids, each list sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl Fold {
    /// Role of a subject, or of an augmented copy through its source id.
    pub fn role(&self, id: &str) -> Option<FoldRole> {
        let src = source_subject(id).to_string();
        if self.val.binary_search(&src).is_ok() {
            Some(FoldRole::Val)
        } else if self.train.binary_search(&src).is_ok() {
            Some(FoldRole::Train)
        } else {
            None
        }
    }

    /// Splits items by the fold role of their id. Items whose subject is in
    /// neither list are an error.
    pub fn partition<'a, T>(&self, items: &'a [T], id_of: impl Fn(&T) -> &str) -> Result<(Vec<&'a T>, Vec<&'a T>)> {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for item in items {
            match self.role(id_of(item)) {
                Some(FoldRole::Train) => train.push(item),
                Some(FoldRole::Val) => val.push(item),
                None => return Err(Error::input(format!("{} is in no fold", id_of(item)))),
            }
        }
        Ok((train, val))
    }
}

/// Stratified subject-level k-fold split. Each class is shuffled with the
/// seed and dealt round-robin, the dealing position carrying over from one
/// class to the next, so fold sizes differ by at most one overall and per
/// class.
pub fn kfold_split<K: Ord + Copy + std::fmt::Debug>(subjects: &[(String, K)], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::config(format!("k = {k}; need at least 2 folds")));
    }
    if subjects.len() < k {
        return Err(Error::input(format!("{} subjects for {k} folds", subjects.len())));
    }
    let mut seen = BTreeSet::new();
    let mut classes: BTreeMap<K, Vec<&str>> = BTreeMap::new();
    for (id, class) in subjects {
        if id.contains('+') {
            return Err(Error::input(format!("{id}: split on source subjects, not augmented copies")));
        }
        if !seen.insert(id.as_str()) {
            return Err(Error::input(format!("{id} listed twice")));
        }
        classes.entry(*class).or_default().push(id);
    }
    for (class, ids) in &classes {
        if ids.len() < k {
            return Err(Error::input(format!(
                "class {class:?} has {} subjects, too few for {k} stratified folds; use a smaller k",
                ids.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut slot = 0;
    for ids in classes.values_mut() {
        ids.shuffle(&mut rng);
        for id in ids.iter() {
            val[slot].push(id.to_string());
            slot = (slot + 1) % k;
        }
    }
    Ok(val
        .into_iter()
        .enumerate()
        .map(|(index, mut v)| {
            v.sort();
            let mut train: Vec<String> = subjects
                .iter()
                .map(|(id, _)| id.clone())
                .filter(|id| v.binary_search(id).is_err())
                .collect();
            train.sort();
            Fold { index, train, val: v }
        })
        .collect())
}
