//! Retrieval metrics, candidate pools and ranked evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{EncodedCode, EncodedSeq};
use crate::encoder::FeatureMatrix;
use crate::model::{Model, ModelError};
use crate::tensor::Scalar;

/// Reciprocal-rank and NDCG cutoff.
pub const CUTOFF: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no queries to evaluate")]
    EmptyQuerySet,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check(ranks: &[Option<usize>], k: usize) -> Result<(), EvalError> {
    if ranks.is_empty() {
        Err(EvalError::EmptyQuerySet)
    } else if k == 0 {
        Err(EvalError::InvalidK)
    } else {
        Ok(())
    }
}

fn mean(ranks: &[Option<usize>], per_query: impl Fn(usize) -> f64) -> f64 {
    ranks.iter().map(|r| r.map_or(0.0, &per_query)).sum::<f64>() / ranks.len() as f64
}

/// Fraction of queries whose ground truth is in the top `k`. Ranks are
/// 1-based; `None` means the ground truth was not retrieved.
pub fn recall_at_k(ranks: &[Option<usize>], k: usize) -> Result<f64, EvalError> {
    check(ranks, k)?;
    Ok(mean(ranks, |r| if r <= k { 1.0 } else { 0.0 }))
}

/// Mean reciprocal rank with reciprocal ranks beyond `k` counted as zero.
pub fn mrr(ranks: &[Option<usize>], k: usize) -> Result<f64, EvalError> {
    check(ranks, k)?;
    Ok(mean(ranks, |r| if r <= k { 1.0 / r as f64 } else { 0.0 }))
}

/// Mean NDCG@k with a single relevant item per query.
pub fn ndcg(ranks: &[Option<usize>], k: usize) -> Result<f64, EvalError> {
    check(ranks, k)?;
    Ok(mean(ranks, |r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 }))
}

/// Aggregate retrieval quality over a query set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub label: String,
    pub query_count: usize,
    /// Candidates per query (largest pool when pools differ).
    pub pool_size: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub mrr: f64,
    pub ndcg: f64,
    #[serde(skip)]
    pub ranks: Vec<Option<usize>>,
}

impl EvalReport {
    pub fn from_ranks(label: impl Into<String>, ranks: Vec<Option<usize>>, pool_size: usize) -> Result<Self, EvalError> {
        Ok(Self {
            label: label.into(),
            query_count: ranks.len(),
            pool_size,
            recall_at_1: recall_at_k(&ranks, 1)?,
            recall_at_5: recall_at_k(&ranks, 5)?,
            recall_at_10: recall_at_k(&ranks, 10)?,
            mrr: mrr(&ranks, CUTOFF)?,
            ndcg: ndcg(&ranks, CUTOFF)?,
            ranks,
        })
    }

    /// One JSON object on a single line.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Aligned text table, one row per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>8}  {:>9}  {:>6}  {:>6}  {:>7}  {:>5}",
        "model", "Recall@1", "Recall@5", "Recall@10", "MRR", "NDCG", "queries", "pool"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.3}  {:>8.3}  {:>9.3}  {:>6.3}  {:>6.3}  {:>7}  {:>5}",
            r.label, r.recall_at_1, r.recall_at_5, r.recall_at_10, r.mrr, r.ndcg, r.query_count, r.pool_size
        );
    }
    out
}

/// Candidate positions sorted by descending score. Equal scores keep their
/// input order.
pub fn rank_pool(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// How candidate pools are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[derive(Default)]
pub struct PoolSpec {
    /// Candidates per query including the ground truth; 0 means every code.
    pub size: usize,
    pub seed: u64,
}


/// One pool per query: the ground truth plus distinct distractors drawn
/// uniformly from the other candidates, in seeded random order.
pub fn build_pools(truths: &[usize], candidates: usize, spec: PoolSpec) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    truths
        .iter()
        .map(|&t| {
            let mut pool: Vec<usize> = if spec.size == 0 || spec.size >= candidates {
                (0..candidates).collect()
            } else {
                let others: Vec<usize> = (0..candidates).filter(|&c| c != t).collect();
                let mut pool: Vec<usize> = others.choose_multiple(&mut rng, spec.size - 1).copied().collect();
                pool.push(t);
                pool
            };
            pool.shuffle(&mut rng);
            pool
        })
        .collect()
}

/// 1-based rank of `truth` within `pool` under `scores` (aligned with `pool`).
pub fn rank_of(pool: &[usize], scores: &[f64], truth: usize) -> Option<usize> {
    rank_pool(scores).iter().position(|&i| pool[i] == truth).map(|p| p + 1)
}

/// Encoded features of every query and candidate, computed once.
pub struct FeatureCache<T> {
    pub queries: Vec<FeatureMatrix<T>>,
    pub codes: Vec<FeatureMatrix<T>>,
}

impl<T: Scalar> FeatureCache<T> {
    pub fn build(model: &Model<T>, queries: &[&EncodedSeq], codes: &[&EncodedCode]) -> Result<Self, ModelError> {
        let queries = queries
            .par_iter()
            .map(|q| model.desc_features(q))
            .collect::<Result<Vec<_>, _>>()?;
        let codes = codes
            .par_iter()
            .map(|c| model.code_features(c))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { queries, codes })
    }
}

/// Scores every candidate of `pool` against query `q`.
pub fn score_pool<T: Scalar>(
    model: &Model<T>,
    cache: &FeatureCache<T>,
    q: usize,
    pool: &[usize],
) -> Result<Vec<f64>, ModelError> {
    pool.par_iter()
        .map(|&c| model.score_features(&cache.queries[q], &cache.codes[c]))
        .collect()
}

/// Ranks each query's ground truth within its pool.
///
/// `truths[i]` is the index into `codes` of query `i`'s ground truth.
pub fn evaluate<T: Scalar>(
    label: &str,
    model: &Model<T>,
    queries: &[&EncodedSeq],
    codes: &[&EncodedCode],
    truths: &[usize],
    spec: PoolSpec,
) -> Result<EvalReport, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }
    if codes.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let cache = FeatureCache::build(model, queries, codes)?;
    let pools = build_pools(truths, codes.len(), spec);
    let ranks = pools
        .iter()
        .enumerate()
        .map(|(q, pool)| Ok(rank_of(pool, &score_pool(model, &cache, q, pool)?, truths[q])))
        .collect::<Result<Vec<_>, ModelError>>()?;
    let pool_size = pools.iter().map(Vec::len).max().unwrap_or(0);
    EvalReport::from_ranks(label, ranks, pool_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        let r = [Some(1), Some(2), Some(11)];
        assert!((recall_at_k(&r, 10).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let m = mrr(&[Some(1), Some(2), Some(4)], 10).unwrap();
        assert!((m - 1.75 / 3.0).abs() < 1e-15);
        assert!((m - 0.5833).abs() < 1e-4);
        assert_eq!(ndcg(&[Some(3)], 10).unwrap(), 0.5);
        assert_eq!(ndcg(&[Some(1)], 10).unwrap(), 1.0);
        assert_eq!(mrr(&[Some(11)], 10).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[Some(1); 4], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[None], 5).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(mrr(&[], 10), Err(EvalError::EmptyQuerySet)));
        assert!(matches!(recall_at_k(&[Some(1)], 0), Err(EvalError::InvalidK)));
    }

    #[test]
    fn ties_keep_input_order() {
        assert_eq!(rank_pool(&[0.5, 0.9, 0.5, 0.9]), [1, 3, 0, 2]);
        assert_eq!(rank_pool(&[0.3]), [0]);
        assert_eq!(rank_of(&[7], &[0.1], 7), Some(1));
    }

    #[test]
    fn pools_hold_truth_and_distinct_distractors() {
        let truths: Vec<usize> = (0..30).collect();
        let pools = build_pools(&truths, 30, PoolSpec { size: 11, seed: 4 });
        for (t, pool) in truths.iter().zip(&pools) {
            assert_eq!(pool.len(), 11);
            assert!(pool.contains(t));
            let mut sorted = pool.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 11);
        }
        assert_eq!(pools, build_pools(&truths, 30, PoolSpec { size: 11, seed: 4 }));
        let full = build_pools(&[2], 5, PoolSpec::default());
        assert_eq!(full[0].len(), 5);
    }

    #[test]
    fn table_and_json_have_every_column() {
        let r = EvalReport::from_ranks("full", vec![Some(1), Some(3)], 11).unwrap();
        let table = render_table(std::slice::from_ref(&r));
        for col in ["Recall@1", "Recall@5", "Recall@10", "MRR", "NDCG"] {
            assert!(table.contains(col));
        }
        let v: serde_json::Value = serde_json::from_str(&r.to_json_line()).unwrap();
        assert_eq!(v["recall_at_5"], 1.0);
        assert_eq!(v["label"], "full");
    }
}
