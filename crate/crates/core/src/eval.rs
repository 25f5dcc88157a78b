//! Full-ranking top-N metrics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{InteractionSet, Split};
use crate::error::{Error, Result};
use crate::model::Representations;

const USER_BLOCK: usize = 256;

fn by_score(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Scores every unmasked item for `user` and sorts by descending score, lower id first on ties.
pub fn rank_items(reps: &Representations, user: usize, masked: &[&[usize]]) -> Vec<usize> {
    let scores: Vec<f64> = (0..reps.items.rows())
        .map(|i| reps.score(user, i))
        .collect();
    let mut scored = candidates(&scores, masked);
    scored.sort_by(by_score);
    scored.into_iter().map(|(_, i)| i).collect()
}

fn candidates(scores: &[f64], masked: &[&[usize]]) -> Vec<(f64, usize)> {
    scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !masked.iter().any(|m| m.binary_search(i).is_ok()))
        .map(|(i, &s)| (s, i))
        .collect()
}

/// The first `n` entries of the full ranking, computed without sorting every candidate.
fn top_n(mut scored: Vec<(f64, usize)>, n: usize) -> Vec<usize> {
    if scored.len() > n {
        scored.select_nth_unstable_by(n - 1, by_score);
        scored.truncate(n);
    }
    scored.sort_by(by_score);
    scored.into_iter().map(|(_, i)| i).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopN {
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// Recall, precision and NDCG of the first `n` ranked items against a sorted `truth`.
pub fn metrics_at(ranked: &[usize], truth: &[usize], n: usize) -> TopN {
    assert!(n >= 1, "cutoff must be at least 1");
    assert!(
        !truth.is_empty(),
        "users without held-out items are excluded before scoring"
    );
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(n).enumerate() {
        if truth.contains(item) {
            hits += 1;
            dcg += discount(pos + 1);
        }
    }
    let idcg: f64 = (1..=truth.len().min(n)).map(discount).sum();
    TopN {
        recall: hits as f64 / truth.len() as f64,
        precision: hits as f64 / n as f64,
        ndcg: dcg / idcg,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsAt {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(flatten)]
    pub values: TopN,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsResult {
    pub split: Split,
    pub at: Vec<MetricsAt>,
    pub users_evaluated: usize,
}

impl MetricsResult {
    pub fn get(&self, n: usize) -> Option<&TopN> {
        self.at.iter().find(|m| m.n == n).map(|m| &m.values)
    }

    pub fn recall_at(&self, n: usize) -> f64 {
        self.get(n).map_or(0.0, |m| m.recall)
    }
}

/// Mean metrics over users with at least one item in `split`.
///
/// Candidates exclude training positives, and validation positives too when
/// scoring the test split.
pub fn evaluate(
    reps: &Representations,
    set: &InteractionSet,
    split: Split,
    cutoffs: &[usize],
) -> Result<MetricsResult> {
    if split == Split::Train {
        return Err(Error::Config("evaluation split must be val or test".into()));
    }
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::Config("cutoffs must be at least 1".into()));
    }
    let max_n = *cutoffs.iter().max().expect("non-empty");
    let mut sums = vec![
        TopN {
            recall: 0.0,
            precision: 0.0,
            ndcg: 0.0,
        };
        cutoffs.len()
    ];
    let mut users = 0usize;
    let truths = set.split(split);
    let eligible: Vec<usize> = (0..truths.len())
        .filter(|&u| !truths[u].is_empty())
        .collect();
    for block in eligible.chunks(USER_BLOCK) {
        let scores = reps.users.gather_rows(block).matmul_t(&reps.items);
        for (row, &u) in block.iter().enumerate() {
            let masked: Vec<&[usize]> = match split {
                Split::Test => vec![&set.train[u], &set.val[u]],
                _ => vec![&set.train[u]],
            };
            let ranked = top_n(candidates(scores.row(row), &masked), max_n);
            for (acc, &n) in sums.iter_mut().zip(cutoffs) {
                let m = metrics_at(&ranked, &truths[u], n);
                acc.recall += m.recall;
                acc.precision += m.precision;
                acc.ndcg += m.ndcg;
            }
            users += 1;
        }
    }
    let denom = users.max(1) as f64;
    Ok(MetricsResult {
        split,
        at: cutoffs
            .iter()
            .zip(sums)
            .map(|(&n, s)| MetricsAt {
                n,
                values: TopN {
                    recall: s.recall / denom,
                    precision: s.precision / denom,
                    ndcg: s.ndcg / denom,
                },
            })
            .collect(),
        users_evaluated: users,
    })
}

/// One row of the metrics JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub split: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
    pub users_evaluated: usize,
    pub config_hash: String,
    pub seed: u64,
}

pub fn metrics_records(result: &MetricsResult, config_hash: &str, seed: u64) -> Vec<MetricsRecord> {
    result
        .at
        .iter()
        .map(|m| MetricsRecord {
            split: result.split.name().to_string(),
            n: m.n,
            recall: m.values.recall,
            precision: m.values.precision,
            ndcg: m.values.ndcg,
            users_evaluated: result.users_evaluated,
            config_hash: config_hash.to_string(),
            seed,
        })
        .collect()
}
