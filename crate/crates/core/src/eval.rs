//! Full-ranking top-N evaluation: Recall@N and NDCG@N.
//!
//! Every non-excluded item is scored before the top N is taken; there is no
//! candidate sampling. Ties are broken by ascending item index so rankings
//! are reproducible. Users whose relevant set is empty are skipped from the
//! means, not scored zero.

use std::collections::HashSet;
use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::SplitDataset;
use crate::models::{EmbeddingModel, Scorer};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need {needed} rankable items but only {available} are not excluded")]
    NotEnoughItems { needed: usize, available: usize },
    #[error("relevant set is empty")]
    EmptyRelevant,
}

/// Exact top-`n` items for one user over all non-excluded items, ordered by
/// descending score with ties broken by ascending item index.
pub fn rank_topn_scored(
    scorer: &Scorer,
    user: usize,
    n: usize,
    excluded: &[u32],
) -> Result<Vec<u32>, EvalError> {
    assert!(n >= 1, "n must be >= 1");
    let scores = scorer.user_scores(user);
    let excluded: HashSet<u32> = excluded.iter().copied().collect();
    let mut candidates: Vec<(f64, u32)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(&(*i as u32)))
        .map(|(i, &s)| (s, i as u32))
        .collect();
    if candidates.len() < n {
        return Err(EvalError::NotEnoughItems {
            needed: n,
            available: candidates.len(),
        });
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(candidates.into_iter().take(n).map(|(_, i)| i).collect())
}

/// Convenience wrapper that builds a fresh scorer; evaluation loops should
/// build the scorer once and call [`rank_topn_scored`].
pub fn rank_topn(
    model: &EmbeddingModel,
    user: usize,
    n: usize,
    excluded: &[u32],
) -> Result<Vec<u32>, EvalError> {
    rank_topn_scored(&model.scorer(), user, n, excluded)
}

/// |topN ∩ relevant| / |relevant|
pub fn recall_at_n(result: &[u32], relevant: &[u32]) -> Result<f64, EvalError> {
    if relevant.is_empty() {
        return Err(EvalError::EmptyRelevant);
    }
    let relevant_set: HashSet<u32> = relevant.iter().copied().collect();
    let hits = result.iter().filter(|i| relevant_set.contains(i)).count();
    Ok(hits as f64 / relevant_set.len() as f64)
}

/// Binary-relevance NDCG: DCG sums 1/log2(p+1) over hit positions p
/// (1-based); IDCG places min(N, |relevant|) hits at the top.
pub fn ndcg_at_n(result: &[u32], relevant: &[u32]) -> Result<f64, EvalError> {
    if relevant.is_empty() {
        return Err(EvalError::EmptyRelevant);
    }
    let relevant_set: HashSet<u32> = relevant.iter().copied().collect();
    let mut dcg = 0.0;
    for (idx, item) in result.iter().enumerate() {
        if relevant_set.contains(item) {
            dcg += 1.0 / ((idx + 2) as f64).log2();
        }
    }
    let ideal_hits = result.len().min(relevant_set.len());
    let idcg: f64 = (0..ideal_hits).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    Ok(if idcg == 0.0 { 0.0 } else { dcg / idcg })
}

/// Which split supplies the relevant items; test evaluation additionally
/// excludes validation items from the candidate pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTarget {
    Validation,
    Test,
}

/// Mean metrics over users with nonempty relevant sets.
#[derive(Debug, Clone)]
pub struct MetricTable {
    pub ns: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub evaluated_users: usize,
}

impl MetricTable {
    pub fn recall_at(&self, n: usize) -> Option<f64> {
        self.ns.iter().position(|&m| m == n).map(|i| self.recall[i])
    }

    pub fn ndcg_at(&self, n: usize) -> Option<f64> {
        self.ns.iter().position(|&m| m == n).map(|i| self.ndcg[i])
    }

    /// `metric,N,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,N,value\n");
        for (i, n) in self.ns.iter().enumerate() {
            out.push_str(&format!("recall,{},{}\n", n, self.recall[i]));
        }
        for (i, n) in self.ns.iter().enumerate() {
            out.push_str(&format!("ndcg,{},{}\n", n, self.ndcg[i]));
        }
        out
    }
}

impl fmt::Display for MetricTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "evaluated users: {}", self.evaluated_users)?;
        for (i, n) in self.ns.iter().enumerate() {
            writeln!(
                f,
                "Recall@{n} = {:.6}   NDCG@{n} = {:.6}",
                self.recall[i], self.ndcg[i]
            )?;
        }
        Ok(())
    }
}

/// Full-ranking evaluation of `model` against one split target.
///
/// Exclusions per user: the training items, plus the validation items when
/// evaluating the test split. Parallelizes over users; the reduction runs in
/// user order so results do not depend on thread count.
pub fn evaluate(
    model: &EmbeddingModel,
    split: &SplitDataset,
    target: EvalTarget,
    ns: &[usize],
) -> MetricTable {
    let scorer = model.scorer();
    let train_items = split.train.items_by_user();
    let val_items = split.validation.items_by_user();
    let test_items = split.test.items_by_user();
    let max_n = ns.iter().copied().max().unwrap_or(20);

    let per_user: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..split.n_users())
        .into_par_iter()
        .map(|u| {
            let relevant = match target {
                EvalTarget::Validation => &val_items[u],
                EvalTarget::Test => &test_items[u],
            };
            if relevant.is_empty() {
                return None;
            }
            let mut excluded = train_items[u].clone();
            if target == EvalTarget::Test {
                excluded.extend_from_slice(&val_items[u]);
            }
            let available = split.n_items() - excluded.len();
            let depth = max_n.min(available.max(1));
            let ranked = rank_topn_scored(&scorer, u, depth, &excluded).ok()?;
            let mut recalls = Vec::with_capacity(ns.len());
            let mut ndcgs = Vec::with_capacity(ns.len());
            for &n in ns {
                let prefix = &ranked[..n.min(ranked.len())];
                recalls.push(recall_at_n(prefix, relevant).expect("relevant nonempty"));
                ndcgs.push(ndcg_at_n(prefix, relevant).expect("relevant nonempty"));
            }
            Some((recalls, ndcgs))
        })
        .collect();

    let mut recall = vec![0.0; ns.len()];
    let mut ndcg = vec![0.0; ns.len()];
    let mut evaluated_users = 0usize;
    for entry in per_user.into_iter().flatten() {
        evaluated_users += 1;
        for i in 0..ns.len() {
            recall[i] += entry.0[i];
            ndcg[i] += entry.1[i];
        }
    }
    if evaluated_users > 0 {
        for i in 0..ns.len() {
            recall[i] /= evaluated_users as f64;
            ndcg[i] /= evaluated_users as f64;
        }
    }
    MetricTable {
        ns: ns.to_vec(),
        recall,
        ndcg,
        evaluated_users,
    }
}
