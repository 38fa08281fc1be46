use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub folds: Vec<Vec<String>>,
}

impl SplitPlan {
    /// Training ids (all other folds) and validation ids (fold `i`).
    pub fn fold(&self, i: usize) -> Result<(Vec<String>, Vec<String>)> {
        let val = self
            .folds
            .get(i)
            .ok_or_else(|| Error::Config(format!("fold {i} out of range for {} folds", self.folds.len())))?
            .clone();
        let train =
            self.folds.iter().enumerate().filter(|&(j, _)| j != i).flat_map(|(_, f)| f.iter().cloned()).collect();
        Ok((train, val))
    }
}

fn shuffled(ids: &[String], seed: u64) -> Result<Vec<String>> {
    let mut v = ids.to_vec();
    v.sort();
    if v.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Data("sample ids are not unique".into()));
    }
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(v)
}

/// Number of validation ids for a fraction: `ceil(fraction * n)`, keeping at
/// least one training id.
pub fn val_count(n: usize, fraction: f64) -> usize {
    (((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n.saturating_sub(1))
}

/// Random hold-out split, deterministic per seed and independent of input order.
pub fn split_train_val(ids: &[String], val_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction must be in (0, 1), got {val_fraction}")));
    }
    if ids.len() < 2 {
        return Err(Error::Data(format!("need at least 2 samples to split, got {}", ids.len())));
    }
    let mut v = shuffled(ids, seed)?;
    let train = v.split_off(val_count(ids.len(), val_fraction));
    Ok(SplitPlan { seed, train, val: v, folds: Vec::new() })
}

/// `k` near-equal folds; the first `n % k` folds get one extra id.
pub fn kfold(ids: &[String], k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::Data(format!("{} samples cannot fill {k} folds", ids.len())));
    }
    let v = shuffled(ids, seed)?;
    let (base, extra) = (v.len() / k, v.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        folds.push(v[start..start + len].to_vec());
        start += len;
    }
    Ok(SplitPlan { seed, train: Vec::new(), val: Vec::new(), folds })
}
