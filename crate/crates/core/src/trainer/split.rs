use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::MetricsError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum SplitScheme {
    /// One stratified train/val/test split; `test` takes the remainder.
    Holdout { train: f64, val: f64 },
    /// `k` folds; fold `i` is the test set and fold `i+1` the validation set.
    KFold { k: usize },
    /// `n` independent holdout splits with seeds `seed..seed+n`.
    Repeated { n: usize, train: f64, val: f64 },
}

impl Default for SplitScheme {
    fn default() -> Self {
        SplitScheme::Holdout {
            train: 0.7,
            val: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Sample indices grouped by label, each group shuffled.
fn shuffled_groups(labels: &[usize], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
        .into_values()
        .map(|mut g| {
            g.shuffle(rng);
            g
        })
        .collect()
}

fn holdout(labels: &[usize], train: f64, val: f64, seed: u64) -> Result<Split, MetricsError> {
    if !(train > 0.0 && val >= 0.0 && train + val <= 1.0) {
        return Err(MetricsError::Split {
            n: labels.len(),
            k: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for g in shuffled_groups(labels, &mut rng) {
        let n = g.len() as f64;
        let n_train = (train * n).round() as usize;
        let n_val = ((val * n).round() as usize).min(g.len() - n_train);
        s.train.extend_from_slice(&g[..n_train]);
        s.val.extend_from_slice(&g[n_train..n_train + n_val]);
        s.test.extend_from_slice(&g[n_train + n_val..]);
    }
    s.train.sort_unstable();
    s.val.sort_unstable();
    s.test.sort_unstable();
    Ok(s)
}

/// Stratified folds: each class is shuffled and dealt round-robin, continuing
/// the deal across classes so fold sizes differ by at most one.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>, MetricsError> {
    if k < 2 || labels.len() < k {
        return Err(MetricsError::Split { n: labels.len(), k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for g in shuffled_groups(labels, &mut rng) {
        if g.len() < k {
            warn!("a class has {} samples for {k} folds; stratification is best-effort", g.len());
        }
        for i in g {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Deterministic, stratified splits of the samples with the given labels.
pub fn split(labels: &[usize], scheme: &SplitScheme, seed: u64) -> Result<Vec<Split>, MetricsError> {
    match *scheme {
        SplitScheme::Holdout { train, val } => Ok(vec![holdout(labels, train, val, seed)?]),
        SplitScheme::Repeated { n, train, val } => (0..n as u64)
            .map(|r| holdout(labels, train, val, seed.wrapping_add(r)))
            .collect(),
        SplitScheme::KFold { k } => {
            // one fold tests, the next validates, so training needs a third
            if k < 3 {
                return Err(MetricsError::Split { n: labels.len(), k });
            }
            let folds = stratified_folds(labels, k, seed)?;
            Ok((0..k)
                .map(|i| {
                    let v = (i + 1) % k;
                    let mut train: Vec<usize> = (0..k)
                        .filter(|&f| f != i && f != v)
                        .flat_map(|f| folds[f].iter().copied())
                        .collect();
                    train.sort_unstable();
                    Split {
                        train,
                        val: folds[v].clone(),
                        test: folds[i].clone(),
                    }
                })
                .collect())
        }
    }
}
