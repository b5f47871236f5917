//! Pairwise (query, passage) relevance scorers used for global re-ranking.

use std::collections::HashSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embedding::tokenize;
use crate::par::{self, ExecMode};

pub const OVERLAP_SCORER_ID: &str = "overlap-v1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("rerank failed: {0}")]
pub struct RerankError(pub String);

pub trait RelevanceScorer: Send + Sync {
    fn scorer_id(&self) -> &str;

    /// One finite score per passage, in input order.
    fn score_batch(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>, RerankError>;
}

/// Normalized token-set overlap: `|Q ∩ P| / sqrt(|Q| · |P|)`, 0 when either set is empty.
pub fn score_rerank(query_text: &str, passage_text: &str) -> f64 {
    let q: HashSet<String> = tokenize(query_text).into_iter().collect();
    overlap_with(&q, passage_text)
}

fn overlap_with(q: &HashSet<String>, passage_text: &str) -> f64 {
    let p: HashSet<String> = tokenize(passage_text).into_iter().collect();
    if q.is_empty() || p.is_empty() {
        return 0.0;
    }
    let shared = q.intersection(&p).count() as f64;
    shared / ((q.len() * p.len()) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapScorer {
    pub mode: Option<ExecMode>,
}

impl RelevanceScorer for OverlapScorer {
    fn scorer_id(&self) -> &str {
        OVERLAP_SCORER_ID
    }

    fn score_batch(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>, RerankError> {
        let q: HashSet<String> = tokenize(query).into_iter().collect();
        let mode = self.mode.unwrap_or_else(ExecMode::preferred);
        Ok(par::map(mode, passages, |p| overlap_with(&q, p)))
    }
}

#[derive(Serialize)]
struct RerankRequest<'a> {
    model: &'a str,
    query: &'a str,
    passages: &'a [&'a str],
}

#[derive(Deserialize)]
struct RerankResponse {
    scores: Vec<f64>,
}

/// Cross-encoder served over HTTP: `POST {endpoint}/rerank`,
/// body `{"model","query","passages"}`, response `{"scores": [float]}`.
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    pub endpoint: String,
    pub model_id: String,
}

impl RelevanceScorer for RemoteScorer {
    fn scorer_id(&self) -> &str {
        &self.model_id
    }

    fn score_batch(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>, RerankError> {
        if passages.is_empty() {
            return Ok(Vec::new());
        }
        let url = format!("{}/rerank", self.endpoint.trim_end_matches('/'));
        let resp: RerankResponse = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(60))
            .build()
            .post(&url)
            .send_json(RerankRequest {
                model: &self.model_id,
                query,
                passages,
            })
            .map_err(|e| RerankError(e.to_string()))?
            .into_json()
            .map_err(|e| RerankError(format!("bad response body: {e}")))?;
        if resp.scores.len() != passages.len() {
            return Err(RerankError(format!(
                "{} scores for {} passages",
                resp.scores.len(),
                passages.len()
            )));
        }
        Ok(resp.scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_examples() {
        assert_eq!(score_rerank("heart attack", "Attack, heart!"), 1.0);
        assert_eq!(score_rerank("a b", "c d"), 0.0);
        assert_eq!(score_rerank("a b", "b c"), 0.5);
        assert_eq!(score_rerank("", "b c"), 0.0);
        // Sets, not bags: repetition does not change the score.
        assert_eq!(score_rerank("a b", "b b b b c"), 0.5);
    }

    #[test]
    fn batch_matches_pairwise() {
        let passages = ["alpha beta", "beta gamma delta", "", "alpha"];
        let got = OverlapScorer::default()
            .score_batch("alpha beta", &passages)
            .unwrap();
        let want: Vec<f64> = passages.iter().map(|p| score_rerank("alpha beta", p)).collect();
        assert_eq!(got, want);
    }
}
