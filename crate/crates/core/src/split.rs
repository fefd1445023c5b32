//! Deterministic patient-level train/test partitioning.
//!
//! Splitting by patient rather than by sample keeps every record from one
//! person on the same side of the divide, so a model can never be scored
//! on a scan whose sibling scans it trained on.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from building or checking a split.
#[derive(Clone, Debug, PartialEq, Error)]
pub enum SplitError {
    #[error("duplicate patient id {0:?}")]
    DuplicateId(String),
    #[error("train ratio must lie in 0.0..=1.0, got {0}")]
    BadRatio(f64),
    #[error("no patient ids to split")]
    Empty,
    #[error("patient id {0:?} appears on both sides of the split")]
    Leakage(String),
}

/// A reproducible partition of patient ids.
///
/// Both sides keep the shuffle order, so the split can be re-derived or
/// extended from the same `(seed, train_ratio)` pair alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub train_ratio: f64,
}

impl PatientSplit {
    /// Total number of patients across both sides.
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.test.is_empty()
    }
}

/// Splits patient ids into train and test sets.
///
/// The ids are shuffled with a ChaCha8 generator seeded from `seed`, then
/// the first `floor(train_ratio * n)` go to train and the rest to test.
/// The floor runs on the `f64` product, so a ratio that is not exactly
/// representable (such as 0.7) truncates on its binary value. Duplicate
/// ids are rejected rather than silently collapsed, because a duplicate
/// usually means two records disagree about which patient they belong to.
pub fn split_patients<I, S>(ids: I, train_ratio: f64, seed: u64) -> Result<PatientSplit, SplitError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    if !(0.0..=1.0).contains(&train_ratio) {
        return Err(SplitError::BadRatio(train_ratio));
    }
    let mut pool: Vec<String> = ids.into_iter().map(Into::into).collect();
    if pool.is_empty() {
        return Err(SplitError::Empty);
    }
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for id in &pool {
        if !seen.insert(id.as_str()) {
            return Err(SplitError::DuplicateId(id.clone()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);

    let n_train = (train_ratio * pool.len() as f64) as usize;
    let test = pool.split_off(n_train);
    Ok(PatientSplit { train: pool, test, seed, train_ratio })
}

/// Confirms no patient id appears on both sides.
///
/// Takes the id lists as they appear on records, so callers can check a
/// materialized split without rebuilding it.
pub fn verify_patient_disjoint<'a>(
    train: impl IntoIterator<Item = &'a str>,
    test: impl IntoIterator<Item = &'a str>,
) -> Result<(), SplitError> {
    let train: BTreeSet<&str> = train.into_iter().collect();
    for id in test {
        if train.contains(id) {
            return Err(SplitError::Leakage(id.to_string()));
        }
    }
    Ok(())
}
