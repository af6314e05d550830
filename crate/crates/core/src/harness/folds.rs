use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;

pub const DEFAULT_FOLDS: usize = 5;

/// Disjoint test index sets that together cover `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub n: usize,
    pub stratified: bool,
    /// Sorted test indices per fold.
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Complement of the test set, ascending.
    pub fn train(&self, fold: usize) -> Vec<usize> {
        let mut in_test = vec![false; self.n];
        for &i in &self.folds[fold] {
            in_test[i] = true;
        }
        (0..self.n).filter(|&i| !in_test[i]).collect()
    }
}

/// Seeded shuffle followed by round-robin assignment.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    check(n, k)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut SeedStream::new(seed).rng("folds"));
    Ok(assign(n, k, seed, false, &idx))
}

/// Like [`make_folds`] but shuffles event and censored subjects separately
/// so each fold receives a near-equal share of events.
pub fn make_folds_stratified(events: &[bool], k: usize, seed: u64) -> Result<FoldPlan> {
    let n = events.len();
    check(n, k)?;
    let mut rng = SeedStream::new(seed).rng("folds");
    let mut with: Vec<usize> = (0..n).filter(|&i| events[i]).collect();
    let mut without: Vec<usize> = (0..n).filter(|&i| !events[i]).collect();
    with.shuffle(&mut rng);
    without.shuffle(&mut rng);
    with.extend(without);
    Ok(assign(n, k, seed, true, &with))
}

fn check(n: usize, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidInput(format!("cannot split {n} samples into {k} folds")));
    }
    Ok(())
}

fn assign(n: usize, k: usize, seed: u64, stratified: bool, order: &[usize]) -> FoldPlan {
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, &i) in order.iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    FoldPlan {
        seed,
        n,
        stratified,
        folds,
    }
}
