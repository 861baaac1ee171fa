//! Exact cosine k-NN over a claim's vector store, followed by maximal
//! marginal relevance reranking.
//!
//! ```text
//! MMR(d) = lambda * sim(d, q) - (1 - lambda) * max_{s in S} sim(d, s)
//! ```
//!
//! Both terms use cosine similarity. All ties resolve to the lower index.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embedding::{embed_one, EmbeddingError, EmbeddingProvider};
use crate::knowledge_store::{EmbeddedChunk, VectorStore};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RetrievalError {
    #[error("query has dimension {got}, store has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid retrieval parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredChunk {
    /// Position of the entry in its store.
    pub index: usize,
    pub entry: EmbeddedChunk,
    /// Cosine similarity to the query.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalParams {
    /// Nearest neighbours fetched before reranking.
    pub k: usize,
    /// Results kept after reranking.
    pub l: usize,
    /// Weight of query similarity against diversity.
    pub lambda: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self { k: 20, l: 7, lambda: 0.8 }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k == 0 || self.l == 0 {
            return Err(RetrievalError::InvalidParams("k and l must be positive".into()));
        }
        if self.l > self.k {
            return Err(RetrievalError::InvalidParams(format!("l={} exceeds k={}", self.l, self.k)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(RetrievalError::InvalidParams(format!("lambda={} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Cosine similarity in f64. Zero vectors (and non-finite results) score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let sim = dot / (na.sqrt() * nb.sqrt());
    if sim.is_finite() {
        sim
    } else {
        0.0
    }
}

fn by_score_then_index(a: &ScoredChunk, b: &ScoredChunk) -> Ordering {
    b.score.total_cmp(&a.score).then(a.index.cmp(&b.index))
}

/// Full scan returning the `k` entries most cosine-similar to `query`.
pub fn knn_search(store: &VectorStore, query: &[f32], k: usize) -> Result<Vec<ScoredChunk>, RetrievalError> {
    if query.len() != store.dim {
        return Err(RetrievalError::DimensionMismatch { expected: store.dim, got: query.len() });
    }
    let mut scored: Vec<(usize, f64)> = store
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (i, cosine(&e.vector, query)))
        .collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    let k = k.min(scored.len());
    if k > 0 && k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Ok(scored
        .into_iter()
        .map(|(index, score)| ScoredChunk { index, entry: store.entries[index].clone(), score })
        .collect())
}

/// Greedy MMR selection of `min(l, candidates.len())` items.
///
/// The first pick is always the most query-similar candidate. Returned
/// items keep their original query-similarity `score`.
pub fn mmr_rerank(
    candidates: &[ScoredChunk],
    query: &[f32],
    lambda: f64,
    l: usize,
) -> Result<Vec<ScoredChunk>, RetrievalError> {
    if let Some(bad) = candidates.iter().find(|c| c.entry.vector.len() != query.len()) {
        return Err(RetrievalError::DimensionMismatch { expected: query.len(), got: bad.entry.vector.len() });
    }
    let n = candidates.len();
    let take = l.min(n);
    if take == 0 {
        return Ok(Vec::new());
    }
    let relevance: Vec<f64> = candidates.iter().map(|c| cosine(&c.entry.vector, query)).collect();
    // max similarity of each candidate to the selected set so far
    let mut redundancy = vec![f64::NEG_INFINITY; n];
    let mut chosen = vec![false; n];
    let mut order = Vec::with_capacity(take);

    for step in 0..take {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !chosen[i]) {
            let value = if step == 0 {
                relevance[i]
            } else {
                lambda * relevance[i] - (1.0 - lambda) * redundancy[i]
            };
            if best.is_none_or(|(_, b)| value > b) {
                best = Some((i, value));
            }
        }
        let (pick, _) = best.expect("at least one candidate remains");
        chosen[pick] = true;
        order.push(pick);
        for i in (0..n).filter(|&i| !chosen[i]) {
            let sim = cosine(&candidates[i].entry.vector, &candidates[pick].entry.vector);
            redundancy[i] = redundancy[i].max(sim);
        }
    }
    Ok(order.into_iter().map(|i| candidates[i].clone()).collect())
}

/// Embeds the query, runs k-NN, then reranks to at most `l` results.
pub fn retrieve_text_sources(
    store: &VectorStore,
    query_text: &str,
    embedder: &dyn EmbeddingProvider,
    params: &RetrievalParams,
) -> Result<Vec<ScoredChunk>, RetrievalError> {
    params.validate()?;
    if store.is_empty() {
        return Ok(Vec::new());
    }
    let query = embed_one(embedder, query_text)?;
    let candidates = knn_search(store, &query, params.k)?;
    mmr_rerank(&candidates, &query, params.lambda, params.l)
}

/// Sorts in place by descending score, ties by ascending index.
pub fn sort_scored(items: &mut [ScoredChunk]) {
    items.sort_by(by_score_then_index);
}
