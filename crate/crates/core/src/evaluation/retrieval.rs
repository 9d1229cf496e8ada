use serde::{Deserialize, Serialize};

use crate::diffcore::NORM_EPSILON;
use crate::error::{Error, Result};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
pub const BASELINE_CONVENTION: &str = "min(1, k / groups)";

/// 0-based rank of the best-ranked gallery item sharing each query's group.
///
/// Ranking is by cosine similarity, higher first, with the lower gallery
/// index winning ties. `None` when no gallery item shares the group.
pub fn first_match_ranks(
    queries: &[Vec<f64>],
    gallery: &[Vec<f64>],
    query_groups: &[usize],
    gallery_groups: &[usize],
) -> Result<Vec<Option<usize>>> {
    if gallery.is_empty() {
        return Err(Error::Parameter("retrieval gallery is empty".into()));
    }
    if queries.len() != query_groups.len() || gallery.len() != gallery_groups.len() {
        return Err(Error::Dimension {
            op: "recall_at_k",
            left: vec![queries.len(), gallery.len()],
            right: vec![query_groups.len(), gallery_groups.len()],
        });
    }
    let q = normalize_all(queries, "recall_at_k query")?;
    let g = normalize_all(gallery, "recall_at_k gallery")?;
    let d = g[0].len();
    if q.iter().chain(&g).any(|v| v.len() != d) {
        return Err(Error::Dimension {
            op: "recall_at_k",
            left: vec![q.first().map_or(0, Vec::len)],
            right: vec![d],
        });
    }
    Ok(q.iter()
        .zip(query_groups)
        .map(|(qv, &qg)| {
            let scores: Vec<f64> = g.iter().map(|gv| dot(qv, gv)).collect();
            // Best-ranked match: highest score, lowest index on ties.
            let best = (0..g.len())
                .filter(|&j| gallery_groups[j] == qg)
                .fold(None::<usize>, |acc, j| match acc {
                    Some(a) if scores[a] >= scores[j] => Some(a),
                    _ => Some(j),
                })?;
            let s = scores[best];
            Some(
                scores
                    .iter()
                    .enumerate()
                    .filter(|&(j, &v)| v > s || (v == s && j < best))
                    .count(),
            )
        })
        .collect())
}

/// Fraction of queries whose top `k` gallery items include one of the same
/// group.
pub fn recall_at_k(
    queries: &[Vec<f64>],
    gallery: &[Vec<f64>],
    query_groups: &[usize],
    gallery_groups: &[usize],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Parameter("recall@k needs k >= 1".into()));
    }
    let ranks = first_match_ranks(queries, gallery, query_groups, gallery_groups)?;
    Ok(recall_from_ranks(&ranks, k))
}

pub fn recall_from_ranks(ranks: &[Option<usize>], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|r| matches!(r, Some(r) if *r < k)).count() as f64 / ranks.len() as f64
}

pub fn random_baseline(k: usize, groups: usize) -> f64 {
    (k as f64 / groups as f64).min(1.0)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_all(rows: &[Vec<f64>], op: &'static str) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|r| {
            let n = dot(r, r).sqrt();
            if !(n > NORM_EPSILON) {
                return Err(Error::DegenerateVector {
                    op,
                    norm: n,
                    epsilon: NORM_EPSILON,
                });
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub label: String,
    pub queries: usize,
    pub gallery: usize,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub random_baseline: Vec<f64>,
}

impl DirectionReport {
    pub fn from_ranks(label: &str, ranks: &[Option<usize>], gallery: usize, groups: usize) -> Self {
        Self {
            label: label.to_string(),
            queries: ranks.len(),
            gallery,
            ks: RECALL_KS.to_vec(),
            recall: RECALL_KS.iter().map(|&k| recall_from_ranks(ranks, k)).collect(),
            random_baseline: RECALL_KS.iter().map(|&k| random_baseline(k, groups)).collect(),
        }
    }

    /// Recall at one of [`RECALL_KS`].
    pub fn recall_at(&self, k: usize) -> f64 {
        let i = self.ks.iter().position(|&x| x == k).expect("k is one of the reported cut-offs");
        self.recall[i]
    }

    pub fn baseline_at(&self, k: usize) -> f64 {
        let i = self.ks.iter().position(|&x| x == k).expect("k is one of the reported cut-offs");
        self.random_baseline[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub task: String,
    pub model: String,
    /// Distinct images in the split.
    pub groups: usize,
    pub baseline_convention: String,
    pub directions: Vec<DirectionReport>,
}

impl RetrievalReport {
    /// Speech as the query side (speech→image or speech→text).
    pub fn speech_to_image(&self) -> &DirectionReport {
        &self.directions[0]
    }

    /// The reverse direction.
    pub fn image_to_speech(&self) -> &DirectionReport {
        &self.directions[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(v: &[[f64; 2]]) -> Vec<Vec<f64>> {
        v.iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let g = rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [-1.0, 0.2]]);
        let ids = [0, 1, 2, 3];
        assert_eq!(recall_at_k(&g, &g, &ids, &ids, 1).unwrap(), 1.0);
    }

    #[test]
    fn exhaustive_k_is_perfect() {
        let q = rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let g = rows(&[[0.0, 1.0], [1.0, 0.1], [-1.0, 0.0]]);
        assert_eq!(recall_at_k(&q, &g, &[2, 0], &[0, 1, 2], 3).unwrap(), 1.0);
    }

    /// Three queries against four gallery items, ranked by hand:
    /// q0 = (1,0): scores g0 .. g3 = 1, 0.6, 0, -1 → order 0,1,2,3; group 7
    ///   sits at g1 → rank 1.
    /// q1 = (0,1): scores 0, 0.8, 1, 0 → order 2,1,0,3 (g0 before g3 on the
    ///   tie); group 9 sits at g3 → rank 3.
    /// q2 = (0.6,0.8): scores 0.6, 1, 0.8, -0.6 → order 1,2,0,3; group 5 sits
    ///   at g0 → rank 2.
    #[test]
    fn hand_ranked_case() {
        let q = rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        let g = rows(&[[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [-1.0, 0.0]]);
        let qg = [7, 9, 5];
        let gg = [5, 7, 8, 9];
        let ranks = first_match_ranks(&q, &g, &qg, &gg).unwrap();
        assert_eq!(ranks, vec![Some(1), Some(3), Some(2)]);
        assert_eq!(recall_at_k(&q, &g, &qg, &gg, 1).unwrap(), 0.0);
        assert!((recall_at_k(&q, &g, &qg, &gg, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((recall_at_k(&q, &g, &qg, &gg, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at_k(&q, &g, &qg, &gg, 4).unwrap(), 1.0);
    }

    #[test]
    fn ties_prefer_lower_gallery_index() {
        let q = rows(&[[1.0, 0.0]]);
        let g = rows(&[[1.0, 0.0], [2.0, 0.0]]);
        assert_eq!(first_match_ranks(&q, &g, &[1], &[0, 1]).unwrap(), vec![Some(1)]);
        assert_eq!(first_match_ranks(&q, &g, &[0], &[0, 1]).unwrap(), vec![Some(0)]);
    }

    #[test]
    fn errors() {
        let q = rows(&[[1.0, 0.0]]);
        assert!(matches!(recall_at_k(&q, &[], &[0], &[], 1), Err(Error::Parameter(_))));
        assert!(recall_at_k(&q, &q, &[0], &[0], 0).is_err());
        let z = rows(&[[0.0, 0.0]]);
        assert!(matches!(recall_at_k(&z, &q, &[0], &[0], 1), Err(Error::DegenerateVector { .. })));
    }

    #[test]
    fn baseline_convention() {
        assert_eq!(random_baseline(1, 100), 0.01);
        assert_eq!(random_baseline(10, 5), 1.0);
    }

    proptest! {
        #[test]
        fn monotone_in_k_and_scale_invariant(seed in 0u64..200, scale in 0.01f64..100.0) {
            use crate::rng::{normal_vec, seeded};
            let mut rng = seeded(seed);
            let q: Vec<Vec<f64>> = (0..12).map(|_| normal_vec(&mut rng, 4, 1.0)).collect();
            let g: Vec<Vec<f64>> = (0..15).map(|_| normal_vec(&mut rng, 4, 1.0)).collect();
            let qg: Vec<usize> = (0..12).map(|i| i % 5).collect();
            let gg: Vec<usize> = (0..15).map(|i| i % 5).collect();
            let mut prev = 0.0;
            for k in 1..=15 {
                let r = recall_at_k(&q, &g, &qg, &gg, k).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
            let qs: Vec<Vec<f64>> = q.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
            for k in [1, 3, 5] {
                prop_assert_eq!(
                    recall_at_k(&q, &g, &qg, &gg, k).unwrap(),
                    recall_at_k(&qs, &g, &qg, &gg, k).unwrap()
                );
            }
        }
    }
}
