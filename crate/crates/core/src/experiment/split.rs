use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scan indices of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Subject-level fold assignment. All scans of a subject land in the same
/// fold, and the validation subjects of a fold are drawn from its training
/// subjects only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub seed: u64,
    /// Subject id → test fold.
    pub assignment: BTreeMap<String, usize>,
    pub folds: Vec<FoldSplit>,
}

impl SplitPlan {
    /// Subjects whose scans form the test set of `fold`.
    pub fn test_subjects(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        (0..self.k).map(|f| self.test_subjects(f).len()).collect()
    }
}

/// Number of validation subjects carved out of `train` training subjects:
/// one fifth, rounded, and at least one whenever two or more are available.
fn validation_count(train: usize) -> usize {
    if train < 2 {
        0
    } else {
        ((train as f64 / 5.0).round() as usize).clamp(1, train - 1)
    }
}

/// Splits scans into `k` folds by subject. `scan_subjects[i]` is the subject
/// of scan `i`. Subjects are shuffled with `seed` and dealt round-robin, so
/// fold sizes differ by at most one.
pub fn make_subject_folds(scan_subjects: &[&str], k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {k}")));
    }
    let unique: BTreeSet<&str> = scan_subjects.iter().copied().collect();
    if unique.len() < k {
        return Err(Error::config(format!(
            "{} subjects cannot fill {k} folds",
            unique.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects: Vec<&str> = unique.into_iter().collect();
    subjects.shuffle(&mut rng);
    let assignment: BTreeMap<String, usize> =
        subjects.iter().enumerate().map(|(i, s)| (s.to_string(), i % k)).collect();

    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let mut train_subjects: Vec<&str> = subjects.iter().copied().filter(|s| assignment[*s] != fold).collect();
        train_subjects.shuffle(&mut rng);
        let val_subjects: BTreeSet<&str> =
            train_subjects[..validation_count(train_subjects.len())].iter().copied().collect();
        let mut split = FoldSplit {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (i, s) in scan_subjects.iter().enumerate() {
            if assignment[*s] == fold {
                split.test.push(i);
            } else if val_subjects.contains(s) {
                split.val.push(i);
            } else {
                split.train.push(i);
            }
        }
        folds.push(split);
    }
    Ok(SplitPlan {
        k,
        seed,
        assignment,
        folds,
    })
}
