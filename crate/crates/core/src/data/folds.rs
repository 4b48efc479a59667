use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Assignment of every record to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub stratified: bool,
    /// Fold index per record, in record order.
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    /// Record indices of fold `f`, ascending.
    pub fn fold(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == f).collect()
    }

    /// Record indices outside fold `f`, ascending.
    pub fn training(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != f).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.assignment {
            s[f] += 1;
        }
        s
    }
}

/// Seeded k-fold split of records with the given class labels. Records are
/// shuffled (within each class when stratified) and dealt round-robin, the
/// second class continuing where the first stopped, so fold sizes differ by
/// at most one and each fold's class counts differ by at most one.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64, stratified: bool) -> Result<FoldPlan> {
    let n = labels.len();
    if k < 2 || k > n {
        return Err(Error::Config(format!("k = {k} outside [2, {n}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<usize> = if stratified {
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut order = Vec::with_capacity(n);
        for c in 0..classes {
            let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            members.shuffle(&mut rng);
            order.extend(members);
        }
        order
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    };
    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % k;
    }
    Ok(FoldPlan {
        k,
        stratified,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_sizes() {
        let plan = kfold_split(&[0; 7], 3, 0, false).unwrap();
        assert_eq!(plan.sizes(), [3, 2, 2]);
        assert_eq!(plan.fold(0).len() + plan.training(0).len(), 7);
    }

    #[test]
    fn second_class_continues_the_deal() {
        // 3 + 3 over 2 folds: a restart at fold 0 would give 4/2
        let plan = kfold_split(&[0, 0, 0, 1, 1, 1], 2, 5, true).unwrap();
        assert_eq!(plan.sizes(), [3, 3]);
    }
}
