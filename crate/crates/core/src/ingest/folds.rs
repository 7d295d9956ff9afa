//! Subject-level k-fold plans with train/validation/test splits.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::IoContext;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl Fold {
    pub fn is_test_subject(&self, subject: &str) -> bool {
        self.test.iter().any(|s| s == subject)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub ratios: SplitRatios,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("fold plan serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn fold(&self, index: usize) -> Result<&Fold> {
        self.folds
            .get(index)
            .ok_or_else(|| Error::Bounds(format!("fold {index} of {}", self.k)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("fold plan serializes");
        std::fs::write(path, text).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Consistency(format!("{}: {e}", path.display())))
    }
}

/// Splits subjects (never slices) into `k` folds whose test sets partition the
/// subject set. Validation takes `round(n * ratios.validation)` subjects (at
/// least one when the ratio is positive) from the remainder; the rest train.
///
/// Subject ids are sorted before the seeded shuffle, so input order does not
/// affect the assignment.
pub fn make_folds(subjects: &[String], k: usize, ratios: SplitRatios, seed: u64) -> Result<FoldPlan> {
    let sum = ratios.train + ratios.validation + ratios.test;
    if (sum - 1.0).abs() > 1e-9 || [ratios.train, ratios.validation, ratios.test].iter().any(|r| *r < 0.0) {
        return Err(Error::Config(format!("split ratios must be non-negative and sum to 1, got {sum}")));
    }
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if (ratios.test - 1.0 / k as f64).abs() > 0.05 {
        return Err(Error::Config(format!(
            "test ratio {} is inconsistent with {k} folds whose test sets partition the subjects",
            ratios.test
        )));
    }
    let mut ids: Vec<String> = subjects.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() != subjects.len() {
        return Err(Error::Config("duplicate subject ids".into()));
    }
    let n = ids.len();
    if n < k {
        return Err(Error::Config(format!("{n} subjects cannot fill {k} test folds")));
    }
    let n_val = if ratios.validation > 0.0 {
        ((n as f64 * ratios.validation).round() as usize).max(1)
    } else {
        0
    };
    let max_test = n.div_ceil(k);
    if n_val + max_test >= n {
        return Err(Error::Config(format!(
            "{n} subjects leave no training subjects with {max_test} test and {n_val} validation"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    // Contiguous chunks: the first n % k chunks get one extra subject.
    let mut bounds = Vec::with_capacity(k + 1);
    bounds.push(0);
    for i in 0..k {
        let size = n / k + usize::from(i < n % k);
        bounds.push(bounds[i] + size);
    }

    let folds = (0..k)
        .map(|i| {
            let test: Vec<String> = ids[bounds[i]..bounds[i + 1]].to_vec();
            // Remaining subjects in rotation order, starting after the test chunk.
            let rest: Vec<String> = (0..n - test.len())
                .map(|j| ids[(bounds[i + 1] + j) % n].clone())
                .collect();
            let mut validation = rest[..n_val].to_vec();
            let mut train = rest[n_val..].to_vec();
            let mut test = test;
            train.sort();
            validation.sort();
            test.sort();
            Fold {
                index: i,
                train,
                validation,
                test,
            }
        })
        .collect();
    Ok(FoldPlan { k, seed, ratios, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("sub-{i:03}")).collect()
    }

    fn check_invariants(plan: &FoldPlan, subjects: &[String]) {
        let all: BTreeSet<_> = subjects.iter().cloned().collect();
        let mut tests = BTreeSet::new();
        for fold in &plan.folds {
            let (tr, va, te): (BTreeSet<_>, BTreeSet<_>, BTreeSet<_>) = (
                fold.train.iter().cloned().collect(),
                fold.validation.iter().cloned().collect(),
                fold.test.iter().cloned().collect(),
            );
            assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            let union: BTreeSet<_> = tr.union(&va).cloned().chain(te.iter().cloned()).collect();
            assert_eq!(union, all);
            for t in &te {
                assert!(tests.insert(t.clone()), "subject tested twice");
            }
        }
        assert_eq!(tests, all);
    }

    #[test]
    fn fifty_subjects_split_35_5_10() {
        let s = ids(50);
        let plan = make_folds(&s, 5, SplitRatios::default(), 7).unwrap();
        for f in &plan.folds {
            assert_eq!((f.train.len(), f.validation.len(), f.test.len()), (35, 5, 10));
        }
        check_invariants(&plan, &s);
    }

    #[test]
    fn ten_subjects_test_size_two() {
        let s = ids(10);
        let plan = make_folds(&s, 5, SplitRatios::default(), 1).unwrap();
        for f in &plan.folds {
            assert_eq!((f.train.len(), f.validation.len(), f.test.len()), (7, 1, 2));
        }
        check_invariants(&plan, &s);
    }

    #[test]
    fn too_few_subjects() {
        assert!(matches!(make_folds(&ids(4), 5, SplitRatios::default(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let r = SplitRatios {
            train: 0.7,
            validation: 0.2,
            test: 0.2,
        };
        assert!(make_folds(&ids(10), 5, r, 0).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = make_folds(&ids(10), 5, SplitRatios::default(), 3).unwrap();
        let b = make_folds(&ids(10), 5, SplitRatios::default(), 3).unwrap();
        let c = make_folds(&ids(10), 5, SplitRatios::default(), 4).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    proptest! {
        #[test]
        fn invariants_hold_and_order_is_irrelevant(n in 5usize..40, seed in any::<u64>(), rot in 0usize..40) {
            let s = ids(n);
            let plan = make_folds(&s, 5, SplitRatios::default(), seed).unwrap();
            check_invariants(&plan, &s);
            let mut permuted = s.clone();
            permuted.rotate_left(rot % n);
            permuted.reverse();
            prop_assert_eq!(make_folds(&permuted, 5, SplitRatios::default(), seed).unwrap(), plan);
        }
    }
}
