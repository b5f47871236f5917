//! Local contexts → global context.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::rerank::{RelevanceScorer, RerankError};
use crate::protocol::{rank_order, RetrievalResponse, ScoreKind, ScoredChunk, Strategy};

/// The final ranked context handed to the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSet {
    pub chunks: Vec<ScoredChunk>,
    pub strategy: Strategy,
    /// Number of chunks returned by providers before dedup and down-selection.
    pub candidate_count: usize,
}

/// Pools every returned chunk. With `dedup`, only the best-ranked chunk per
/// content digest survives. Output is in rank order.
pub fn pool_candidates(responses: &[RetrievalResponse], dedup: bool) -> (Vec<ScoredChunk>, usize) {
    let all = responses
        .iter()
        .flat_map(|r| r.per_product.values())
        .flatten();
    let mut count = 0;
    let mut pool: Vec<ScoredChunk> = if dedup {
        let mut best: HashMap<&str, &ScoredChunk> = HashMap::new();
        for sc in all {
            count += 1;
            match best.entry(sc.chunk.content_digest.as_str()) {
                Entry::Vacant(v) => {
                    v.insert(sc);
                }
                Entry::Occupied(mut o) => {
                    if rank_order(sc, o.get()).is_lt() {
                        o.insert(sc);
                    }
                }
            }
        }
        best.into_values().cloned().collect()
    } else {
        let v: Vec<ScoredChunk> = all.cloned().collect();
        count = v.len();
        v
    };
    pool.sort_by(rank_order);
    (pool, count)
}

pub fn aggregate_embedding_rank(responses: &[RetrievalResponse], n: usize, dedup: bool) -> ContextSet {
    let (mut pool, candidate_count) = pool_candidates(responses, dedup);
    pool.truncate(n);
    ContextSet {
        chunks: pool,
        strategy: Strategy::EmbeddingRank,
        candidate_count,
    }
}

/// Re-scores every pooled candidate against the query and keeps the best `n`.
pub fn aggregate_rerank(
    query_text: &str,
    responses: &[RetrievalResponse],
    scorer: &dyn RelevanceScorer,
    n: usize,
    dedup: bool,
) -> Result<ContextSet, RerankError> {
    let (pool, candidate_count) = pool_candidates(responses, dedup);
    let passages: Vec<&str> = pool.iter().map(|sc| sc.chunk.text.as_str()).collect();
    let scores = scorer.score_batch(query_text, &passages)?;
    if scores.len() != pool.len() {
        return Err(RerankError(format!(
            "scorer returned {} scores for {} candidates",
            scores.len(),
            pool.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(RerankError(format!("non-finite score {bad}")));
    }
    let mut chunks: Vec<ScoredChunk> = pool
        .into_iter()
        .zip(scores)
        .map(|(sc, score)| ScoredChunk {
            chunk: sc.chunk,
            score,
            score_kind: ScoreKind::Rerank,
        })
        .collect();
    chunks.sort_by(rank_order);
    chunks.truncate(n);
    Ok(ContextSet {
        chunks,
        strategy: Strategy::Rerank,
        candidate_count,
    })
}
