//! Patient-grouped five-fold cross-validation with 75/25 train/validation
//! sub-splits, plus stratified label-fraction subsampling with monotone
//! nesting across fractions.

use std::collections::BTreeMap;
use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::taxonomy::{DatasetManifest, GlomClass, ManifestEntry};

pub const N_FOLDS: usize = 5;
/// Share of non-test patients that goes to training (train count rounds up).
pub const TRAIN_SHARE: f64 = 0.75;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("need at least {N_FOLDS} distinct patients, got {0}")]
    InsufficientGroups(usize),
    #[error("fraction {0} outside (0, 1]")]
    BadFraction(f64),
}

/// One cross-validation fold: disjoint patient-id sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub test: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Five folds whose test sets partition the patient universe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fold plan serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

/// Build the five-fold plan: seeded shuffle of the distinct patient ids,
/// partition into five near-equal test chunks (sizes differ by at most
/// one), and for each fold split the remaining patients 75/25 into train
/// and validation, rounding the train count up.
pub fn make_folds(patient_ids: &[String], seed: u64) -> Result<FoldPlan, SplitError> {
    let mut unique: Vec<String> = patient_ids
        .iter()
        .cloned()
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    unique.sort();
    if unique.len() < N_FOLDS {
        return Err(SplitError::InsufficientGroups(unique.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);

    let n = unique.len();
    let base = n / N_FOLDS;
    let extra = n % N_FOLDS;
    let mut chunks: Vec<Vec<String>> = Vec::with_capacity(N_FOLDS);
    let mut cursor = 0;
    for i in 0..N_FOLDS {
        let size = base + usize::from(i < extra);
        chunks.push(unique[cursor..cursor + size].to_vec());
        cursor += size;
    }

    let mut folds = Vec::with_capacity(N_FOLDS);
    for i in 0..N_FOLDS {
        let test = chunks[i].clone();
        let rest: Vec<String> = (0..N_FOLDS)
            .filter(|&j| j != i)
            .flat_map(|j| chunks[j].iter().cloned())
            .collect();
        let n_train = (TRAIN_SHARE * rest.len() as f64).ceil() as usize;
        folds.push(Fold {
            test,
            train: rest[..n_train].to_vec(),
            val: rest[n_train..].to_vec(),
        });
    }
    Ok(FoldPlan { seed, folds })
}

/// Select the entries of a manifest whose patient ids belong to a set.
pub fn entries_for_patients<'a>(
    manifest: &'a DatasetManifest,
    patients: &[String],
) -> Vec<&'a ManifestEntry> {
    let set: HashSet<&String> = patients.iter().collect();
    manifest.entries().iter().filter(|e| set.contains(&e.patient_id)).collect()
}

fn nesting_hash(seed: u64, id: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(id.as_bytes());
    hasher.finalize().into()
}

/// Stratified subsample over `(id, class)` items: per class keep
/// `max(1, round(f * n_class))` items. Items within a class are ordered by
/// a seeded hash of their id and taken as a prefix, so the subset at `f`
/// is contained in the subset at any larger fraction under the same seed.
///
/// Returns indices into `items` in their original order.
pub fn stratified_subsample<C: Ord + Copy>(
    items: &[(String, C)],
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>, SplitError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SplitError::BadFraction(fraction));
    }
    if fraction == 1.0 {
        return Ok((0..items.len()).collect());
    }
    let mut by_class: BTreeMap<C, Vec<usize>> = BTreeMap::new();
    for (i, (_, class)) in items.iter().enumerate() {
        by_class.entry(*class).or_default().push(i);
    }
    let mut chosen = Vec::new();
    for (_, mut idxs) in by_class {
        let keep = ((fraction * idxs.len() as f64).round() as usize).max(1);
        idxs.sort_by_key(|&i| (nesting_hash(seed, &items[i].0), i));
        chosen.extend(idxs.into_iter().take(keep));
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Subsample result for manifest entries, with the classes that were
/// absent from the input recorded for reporting.
#[derive(Debug, Clone)]
pub struct Subsample {
    pub entries: Vec<ManifestEntry>,
    pub absent_classes: Vec<GlomClass>,
}

/// Stratified fraction subsample of a labeled training set. Classes absent
/// from the input are skipped silently but listed in the result metadata.
pub fn subsample_fraction(
    train: &[ManifestEntry],
    fraction: f64,
    seed: u64,
) -> Result<Subsample, SplitError> {
    let items: Vec<(String, GlomClass)> =
        train.iter().map(|e| (e.patch_id.clone(), e.label)).collect();
    let chosen = stratified_subsample(&items, fraction, seed)?;
    let present: HashSet<GlomClass> = train.iter().map(|e| e.label).collect();
    let absent_classes = GlomClass::ALL.iter().copied().filter(|c| !present.contains(c)).collect();
    Ok(Subsample {
        entries: chosen.into_iter().map(|i| train[i].clone()).collect(),
        absent_classes,
    })
}
