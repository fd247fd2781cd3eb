use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{HarnessError, Result};

/// Index sets of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fraction of each fold's training indices held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Shuffled k-fold partition of `n` examples. Test partitions differ in size
/// by at most one; validation takes 10% of the remaining indices (at least
/// one) and training keeps the rest.
pub fn kfold_indices(n: usize, folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if folds < 2 {
        return Err(HarnessError::Config(format!("folds = {folds}, need at least 2")));
    }
    if n < folds {
        return Err(HarnessError::TooFewExamples { have: n, folds });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut bounds = vec![0];
    for f in 0..folds {
        bounds.push(bounds[f] + n / folds + usize::from(f < n % folds));
    }
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let test = order[bounds[f]..bounds[f + 1]].to_vec();
        let mut rest: Vec<usize> = order[..bounds[f]].iter().chain(&order[bounds[f + 1]..]).copied().collect();
        rest.shuffle(&mut rng);
        let n_val = ((rest.len() as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, rest.len().saturating_sub(1).max(1));
        let val = rest.split_off(rest.len() - n_val);
        out.push(FoldSplit { train: rest, val, test });
    }
    Ok(out)
}

/// [`kfold_indices`] materialized over a slice.
pub fn kfold_split<T: Clone>(examples: &[T], folds: usize, seed: u64) -> Result<Vec<(Vec<T>, Vec<T>, Vec<T>)>> {
    let pick = |ix: &[usize]| ix.iter().map(|&i| examples[i].clone()).collect::<Vec<T>>();
    Ok(kfold_indices(examples.len(), folds, seed)?
        .into_iter()
        .map(|s| (pick(&s.train), pick(&s.val), pick(&s.test)))
        .collect())
}
