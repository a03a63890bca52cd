//! Link-prediction ranking metrics (MRR, HITS@k) with pessimistic ties and
//! the filtered setting.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// `(?, r, t)`: `anchor` is the tail.
    HeadPrediction,
    /// `(h, r, ?)`: `anchor` is the head.
    TailPrediction,
}

/// One query over an entity vocabulary indexed `0..scores.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankQuery {
    pub mode: QueryMode,
    pub relation: usize,
    pub anchor: usize,
    pub gold: usize,
    /// Higher is better.
    pub scores: Vec<f64>,
}

/// Known true `(head, relation, tail)` index triples used for filtering.
pub type KnownTriples = HashSet<(usize, usize, usize)>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub queries: usize,
}

impl RankQuery {
    fn triple_with(&self, candidate: usize) -> (usize, usize, usize) {
        match self.mode {
            QueryMode::HeadPrediction => (candidate, self.relation, self.anchor),
            QueryMode::TailPrediction => (self.anchor, self.relation, candidate),
        }
    }
}

/// 1 + number of competing candidates scoring at least as high as the gold
/// entity (ties and NaN count against the gold). In filtered mode,
/// candidates forming a known true triple are not competitors.
pub fn gold_rank(query: &RankQuery, filter: Option<&KnownTriples>) -> usize {
    let gold = query.scores[query.gold];
    let mut rank = 1;
    for (c, &s) in query.scores.iter().enumerate() {
        if c == query.gold {
            continue;
        }
        if let Some(known) = filter {
            if known.contains(&query.triple_with(c)) {
                continue;
            }
        }
        if s.partial_cmp(&gold) != Some(std::cmp::Ordering::Less) {
            rank += 1;
        }
    }
    rank
}

pub fn metrics_from_ranks(ranks: &[usize]) -> RankMetrics {
    let n = ranks.len().max(1) as f64;
    let hits = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    RankMetrics {
        mrr: 100.0 * ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        hits1: hits(1),
        hits3: hits(3),
        hits10: hits(10),
        queries: ranks.len(),
    }
}

/// MRR and HITS@{1,3,10} as percentages.
pub fn rank_metrics(queries: &[RankQuery], filtered: bool, known: &KnownTriples) -> Result<RankMetrics> {
    let filter = filtered.then_some(known);
    let mut ranks = Vec::with_capacity(queries.len());
    for (i, q) in queries.iter().enumerate() {
        if q.gold >= q.scores.len() {
            return Err(Error::GoldMissing(i));
        }
        ranks.push(gold_rank(q, filter));
    }
    Ok(metrics_from_ranks(&ranks))
}
