//! Preference pairs from scored mutant libraries, and structure-level splits.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::world::{MutantRecord, PreferencePair};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingConfig {
    pub top_frac: f64,
    pub bottom_frac: f64,
    pub pairs_per_structure: usize,
    pub seed: u64,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self {
            top_frac: 0.3,
            bottom_frac: 0.3,
            pairs_per_structure: 50,
            seed: 0,
        }
    }
}

impl PairingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("top_frac", self.top_frac), ("bottom_frac", self.bottom_frac)] {
            if !(f > 0.0 && f <= 0.5) {
                return Err(Error::config(format!("{name} must lie in (0, 0.5], got {f}")));
            }
        }
        Ok(())
    }
}

/// `ceil(frac * n)`, tolerant of representation error such as
/// `0.3 * 10 = 3.0000000000000004`.
fn pool_size(frac: f64, n: usize) -> usize {
    ((frac * n as f64) - 1e-9).ceil().max(0.0) as usize
}

fn record_order(a: &MutantRecord, b: &MutantRecord) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn pairs_for_group(
    records: &mut [&MutantRecord],
    cfg: &PairingConfig,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    records.sort_by(|a, b| record_order(a, b));
    let n = records.len();
    let (top, bottom) = (pool_size(cfg.top_frac, n), pool_size(cfg.bottom_frac, n));
    if top == 0 || bottom == 0 {
        return Err(Error::Pairing(format!(
            "empty quantile pool for {} ({n} records)",
            records[0].structure_id
        )));
    }
    let winners = &records[..top];
    let losers = &records[n - bottom..];
    let want = cfg.pairs_per_structure;
    let mut rng = rng::stream(seed);
    let picks: Vec<(usize, usize)> = if top * bottom >= want {
        sample(&mut rng, top * bottom, want)
            .into_iter()
            .map(|c| (c / bottom, c % bottom))
            .collect()
    } else {
        (0..want)
            .map(|_| (rng.gen_range(0..top), rng.gen_range(0..bottom)))
            .collect()
    };
    Ok(picks
        .into_iter()
        .filter_map(|(w, l)| {
            let (w, l) = (winners[w], losers[l]);
            (w.score < l.score).then(|| PreferencePair {
                structure_id: w.structure_id.clone(),
                winner: w.tokens.clone(),
                loser: l.tokens.clone(),
                ddg_label: w.score - l.score,
            })
        })
        .collect())
}

/// Pairs top-quantile winners with bottom-quantile losers, per structure.
///
/// Lower scores are better. Records are grouped by structure and sorted by
/// `(score, tokens)`, so the output does not depend on input order. Pairs
/// are drawn without replacement when the pools allow it; ties are dropped.
/// `ddg_label = score(winner) - score(loser)`.
pub fn build_pairs(records: &[MutantRecord], cfg: &PairingConfig) -> Result<Vec<PreferencePair>> {
    cfg.validate()?;
    let mut groups: BTreeMap<&str, Vec<&MutantRecord>> = BTreeMap::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(Error::Pairing(format!("non-finite score for {}", r.structure_id)));
        }
        groups.entry(r.structure_id.as_str()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (id, mut group) in groups {
        if group.len() < 2 {
            return Err(Error::Pairing(format!("structure {id} has fewer than 2 records")));
        }
        let seed = rng::derive_seed(cfg.seed, rng::label(id));
        out.extend(pairs_for_group(&mut group, cfg, seed)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn shuffled(ids: &[String], seed: u64) -> Vec<String> {
    let mut v = ids.to_vec();
    v.sort();
    v.dedup();
    v.shuffle(&mut rng::stream(seed));
    v
}

/// Disjoint shuffled partition. Validation and test sizes are
/// `floor(frac * n)`; the remainder goes to training.
pub fn split_by_structure(ids: &[String], fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (ftr, fva, fte) = fractions;
    if [ftr, fva, fte].iter().any(|f| !(0.0..=1.0).contains(f)) || (ftr + fva + fte - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions must be in [0, 1] and sum to 1, got ({ftr}, {fva}, {fte})"
        )));
    }
    let v = shuffled(ids, seed);
    let n = v.len();
    let nonzero = [ftr, fva, fte].iter().filter(|&&f| f > 0.0).count();
    if n < nonzero {
        return Err(Error::config(format!("{n} ids cannot fill {nonzero} splits")));
    }
    let floor = |f: f64| (f * n as f64 + 1e-9).floor() as usize;
    let mut n_val = floor(fva);
    let mut n_test = floor(fte);
    // every requested split gets at least one id
    if fva > 0.0 && n_val == 0 {
        n_val = 1;
    }
    if fte > 0.0 && n_test == 0 {
        n_test = 1;
    }
    if ftr > 0.0 && n_val + n_test >= n {
        return Err(Error::config(format!("{n} ids leave no training structures")));
    }
    let n_train = n - n_val - n_test;
    Ok(Split {
        train: v[..n_train].to_vec(),
        val: v[n_train..n_train + n_val].to_vec(),
        test: v[n_train + n_val..].to_vec(),
    })
}

/// Near-equal folds; the first `n mod k` folds take one extra id.
pub fn kfold_by_structure(ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k < 2 {
        return Err(Error::config("k-fold needs k >= 2"));
    }
    let v = shuffled(ids, seed);
    if k > v.len() {
        return Err(Error::config(format!("{k} folds from {} ids", v.len())));
    }
    let (base, extra) = (v.len() / k, v.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(v[start..start + size].to_vec());
        start += size;
    }
    Ok(folds)
}
