//! Top-K ranking metrics over all non-interacted items.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Scoring;
use crate::error::{Error, Result};
use crate::graph::Table;
use crate::learn::cosine_sim;

fn score(scoring: Scoring, u: &[f64], i: &[f64]) -> f64 {
    let s: f64 = match scoring {
        Scoring::Cosine => cosine_sim(u, i),
        Scoring::Inner => u.iter().zip(i).map(|(a, b)| a * b).sum(),
    };
    // -0.0 must tie with 0.0 under total_cmp
    s + 0.0
}

/// Top-`k` items outside `exclude` (sorted ascending) by score, ties broken
/// by ascending item id. Shorter than `k` when there are fewer candidates.
pub fn rank_candidates(
    user: &[f64],
    items: &Table,
    exclude: &[u32],
    k: usize,
    scoring: Scoring,
) -> Vec<u32> {
    let mut scored: Vec<(f64, u32)> = (0..items.rows() as u32)
        .filter(|i| exclude.binary_search(i).is_err())
        .map(|i| (score(scoring, user, items.row(i as usize)), i))
        .collect();
    let order = |a: &(f64, u32), b: &(f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if scored.len() > k && k > 0 {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    scored.truncate(k);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Fraction of `relevant` found in `ranked`; 0 when `relevant` is empty.
pub fn recall_at_k(ranked: &[u32], relevant: &[u32]) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked.iter().filter(|i| relevant.contains(i)).count();
    hits as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG with discount `1 / log2(p + 1)` at 1-indexed
/// position `p`; the ideal ordering is truncated at `min(len(ranked), |relevant|)`.
pub fn ndcg_at_k(ranked: &[u32], relevant: &[u32]) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let discount = |p: usize| 1.0 / ((p + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(p, _)| discount(p))
        .sum();
    let ideal: f64 = (0..ranked.len().min(relevant.len())).map(discount).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: u32,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub k: usize,
    /// Users with a nonempty relevant set, ascending.
    pub per_user: Vec<UserMetrics>,
    pub recall: f64,
    pub ndcg: f64,
}

impl EvalResult {
    pub fn from_users(k: usize, per_user: Vec<UserMetrics>) -> Self {
        let n = per_user.len().max(1) as f64;
        let recall = per_user.iter().map(|m| m.recall).sum::<f64>() / n;
        let ndcg = per_user.iter().map(|m| m.ndcg).sum::<f64>() / n;
        EvalResult {
            k,
            per_user,
            recall,
            ndcg,
        }
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let k = self.k;
        writeln!(f, "user\trecall@{k}\tndcg@{k}").map_err(|e| Error::io(path, e))?;
        for m in &self.per_user {
            writeln!(f, "{}\t{:.6}\t{:.6}", m.user, m.recall, m.ndcg).map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }
}

/// Macro-averaged Recall@K and NDCG@K. `user_vecs` has one row per user;
/// `relevant` and `train` hold each user's sorted item lists.
pub fn evaluate(
    user_vecs: &Table,
    items: &Table,
    train: &[Vec<u32>],
    relevant: &[Vec<u32>],
    k: usize,
    scoring: Scoring,
) -> EvalResult {
    let per_user: Vec<UserMetrics> = (0..user_vecs.rows())
        .into_par_iter()
        .filter(|&u| !relevant[u].is_empty())
        .map(|u| {
            let ranked = rank_candidates(user_vecs.row(u), items, &train[u], k, scoring);
            UserMetrics {
                user: u as u32,
                recall: recall_at_k(&ranked, &relevant[u]),
                ndcg: ndcg_at_k(&ranked, &relevant[u]),
            }
        })
        .collect();
    EvalResult::from_users(k, per_user)
}
