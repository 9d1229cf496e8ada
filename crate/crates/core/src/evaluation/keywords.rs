use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-slot hit flags: slot `k` hits when its keyword is one of the
/// caption's tokens.
pub fn slot_hits(tokens: &[usize], keywords: &[usize]) -> Vec<bool> {
    let set: BTreeSet<usize> = tokens.iter().copied().collect();
    keywords.iter().map(|k| set.contains(k)).collect()
}

/// Mean hit rate of each slot over samples.
pub fn hit_rates(hits: &[Vec<bool>]) -> Result<Vec<f64>> {
    let Some(first) = hits.first() else {
        return Err(Error::Parameter("hit rate over zero samples".into()));
    };
    let k = first.len();
    if hits.iter().any(|h| h.len() != k) {
        return Err(Error::Parameter("samples disagree on the number of keyword slots".into()));
    }
    Ok((0..k)
        .map(|s| hits.iter().filter(|h| h[s]).count() as f64 / hits.len() as f64)
        .collect())
}

/// Probability that a keyword drawn uniformly from `vocab` ids lands in a
/// caption whose length is uniform on `[min_len, max_len]` and whose tokens
/// are uniform: `E[#distinct tokens] / V`.
pub fn chance_hit_rate(min_len: usize, max_len: usize, vocab: usize) -> f64 {
    let miss = 1.0 - 1.0 / vocab as f64;
    let lens = min_len..=max_len;
    let n = lens.clone().count() as f64;
    lens.map(|l| 1.0 - miss.powi(l as i32)).sum::<f64>() / n
}

/// `E[|caption|] / V` for lengths uniform on `[min_len, max_len]`; an upper
/// bound on [`chance_hit_rate`] that ignores repeated tokens.
pub fn nominal_chance_level(min_len: usize, max_len: usize, vocab: usize) -> f64 {
    (min_len + max_len) as f64 / 2.0 / vocab as f64
}

/// `(id, count)` pairs, count descending then id ascending, at most `limit`.
pub fn top_counts(counts: &BTreeMap<usize, usize>, limit: usize) -> Vec<(usize, usize)> {
    let mut v: Vec<(usize, usize)> = counts.iter().map(|(&id, &c)| (id, c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(limit);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordRecord {
    pub image_id: usize,
    pub caption_seed: u64,
    pub tokens: Vec<usize>,
    pub keywords: Vec<usize>,
    pub hits: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordReport {
    pub keywords: usize,
    pub vocab: usize,
    pub samples: usize,
    pub slot_hit_rate: Vec<f64>,
    pub average_hit_rate: f64,
    /// Uniform-keyword chance level, `E[#distinct caption tokens] / V`.
    pub chance_hit_rate: f64,
    /// `E[|caption|] / V`.
    pub nominal_chance_level: f64,
    /// Per slot, the ten most frequent correctly retrieved ids with counts.
    pub top_hits: Vec<Vec<(usize, usize)>>,
    pub records: Vec<KeywordRecord>,
}
