//! Stratified k-fold plans where every item is tested once and validated once.
//!
//! Round `r` tests on fold `r`, validates on fold `(r + 1) mod k` and trains
//! on the remaining `k - 2` folds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub test_fold: usize,
    pub val_fold: usize,
    pub train_folds: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub seed: u64,
    /// Fold id of every item, indexed like the input labels.
    pub fold_of: Vec<usize>,
    pub rounds: Vec<Round>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SplitPlan {
    pub fn len(&self) -> usize {
        self.fold_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fold_of.is_empty()
    }

    pub fn fold_members(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn test_indices(&self, round: usize) -> Vec<usize> {
        self.fold_members(self.rounds[round].test_fold)
    }

    pub fn val_indices(&self, round: usize) -> Vec<usize> {
        self.fold_members(self.rounds[round].val_fold)
    }

    pub fn train_indices(&self, round: usize) -> Vec<usize> {
        let r = &self.rounds[round];
        (0..self.fold_of.len()).filter(|&i| r.train_folds.contains(&self.fold_of[i])).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }
}

/// Fold positions that receive one of the `m` larger folds, spread evenly
/// around the cycle so adjacent (test, val) pairs never both come up short
/// or both come up long unless unavoidable.
fn large_fold_positions(k: usize, m: usize) -> Vec<bool> {
    (0..k).map(|p| (p + 1) * m / k - p * m / k == 1).collect()
}

pub fn build_split_plan(labels: &[u8], k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 3 {
        return Err(Error::invalid(format!("k must be at least 3 for disjoint train/val/test, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::invalid(format!("{} items cannot fill {k} folds", labels.len())));
    }
    if let Some(l) = labels.iter().find(|l| **l > 1) {
        return Err(Error::invalid(format!("label {l} is not binary")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut dealt = Vec::with_capacity(labels.len());
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if !members.is_empty() && members.len() < k {
            let msg = format!("class {class} has {} items for {k} folds; some folds will lack it", members.len());
            log::warn!("{msg}");
            warnings.push(msg);
        }
        members.shuffle(&mut rng);
        dealt.extend(members);
    }

    // Dealing one continuing round-robin over both classes keeps per-class and
    // total fold sizes within one; slot j is large iff j < n mod k.
    let n = labels.len();
    let m = n % k;
    let large = large_fold_positions(k, m);
    let slot_to_fold: Vec<usize> = (0..k).filter(|&p| large[p]).chain((0..k).filter(|&p| !large[p])).collect();
    let mut fold_of = vec![0; n];
    for (j, &item) in dealt.iter().enumerate() {
        fold_of[item] = slot_to_fold[j % k];
    }

    let rounds = (0..k)
        .map(|r| {
            let val = (r + 1) % k;
            Round { test_fold: r, val_fold: val, train_folds: (0..k).filter(|&f| f != r && f != val).collect() }
        })
        .collect();
    Ok(SplitPlan { k, seed, fold_of, rounds, warnings })
}
