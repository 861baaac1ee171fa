//! Few-shot example selection: Okapi BM25 over train-set claim texts.
//!
//! ```text
//! score(D, Q) = sum_{q in Q} IDF(q) * tf(q,D) * (k1 + 1)
//!                              / (tf(q,D) + k1 * (1 - b + b * |D| / avgdl))
//! IDF(q)      = ln(1 + (N - n(q) + 0.5) / (n(q) + 0.5))
//! ```
//!
//! Repeated query tokens contribute once per occurrence.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::claim::{AnswerType, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainQa {
    pub question: String,
    pub answer: String,
    pub answer_type: AnswerType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub claim_text: String,
    pub gold_label: Verdict,
    pub qa_pairs: Vec<TrainQa>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FewshotError {
    #[error("few-shot corpus is empty")]
    EmptyCorpus,
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Term statistics over a fixed corpus.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    doc_terms: Vec<HashMap<String, u32>>,
    doc_lens: Vec<usize>,
    doc_freq: HashMap<String, u32>,
    avg_len: f64,
}

impl Bm25Index {
    pub fn new<S: AsRef<str>>(docs: &[S], params: Bm25Params) -> Self {
        let mut doc_terms = Vec::with_capacity(docs.len());
        let mut doc_lens = Vec::with_capacity(docs.len());
        let mut doc_freq: HashMap<String, u32> = HashMap::new();
        for d in docs {
            let toks = tokenize(d.as_ref());
            doc_lens.push(toks.len());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            doc_terms.push(tf);
        }
        let total: usize = doc_lens.iter().sum();
        let avg_len = if docs.is_empty() { 0.0 } else { total as f64 / docs.len() as f64 };
        Self { params, doc_terms, doc_lens, doc_freq, avg_len }
    }

    pub fn len(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lens.is_empty()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = f64::from(self.doc_freq.get(term).copied().unwrap_or(0));
        let total = self.len() as f64;
        (1.0 + (total - n + 0.5) / (n + 0.5)).ln()
    }

    /// BM25 score of every document for `query`, in corpus order.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let Bm25Params { k1, b } = self.params;
        let query = tokenize(query);
        let idfs: Vec<f64> = query.iter().map(|t| self.idf(t)).collect();
        self.doc_terms
            .iter()
            .zip(&self.doc_lens)
            .map(|(tf, &len)| {
                let rel_len = if self.avg_len > 0.0 { len as f64 / self.avg_len } else { 1.0 };
                let norm = k1 * (1.0 - b + b * rel_len);
                query
                    .iter()
                    .zip(&idfs)
                    .map(|(t, idf)| match tf.get(t) {
                        Some(&f) => {
                            let f = f64::from(f);
                            idf * f * (k1 + 1.0) / (f + norm)
                        }
                        None => 0.0,
                    })
                    .sum()
            })
            .collect()
    }

    /// Indices of the `top_n` best documents: descending score, ties in
    /// corpus order.
    pub fn rank(&self, query: &str, top_n: usize) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self.scores(query).into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(top_n);
        ranked
    }
}

pub fn bm25_rank<'a>(
    query: &str,
    corpus: &'a [TrainExample],
    params: Bm25Params,
    top_n: usize,
) -> Vec<&'a TrainExample> {
    let texts: Vec<&str> = corpus.iter().map(|e| e.claim_text.as_str()).collect();
    Bm25Index::new(&texts, params)
        .rank(query, top_n)
        .into_iter()
        .map(|(i, _)| &corpus[i])
        .collect()
}

/// A train-set corpus with its BM25 index built once.
#[derive(Debug, Clone)]
pub struct FewshotSelector {
    corpus: Vec<TrainExample>,
    index: Bm25Index,
}

impl FewshotSelector {
    pub fn new(corpus: Vec<TrainExample>, params: Bm25Params) -> Self {
        let texts: Vec<&str> = corpus.iter().map(|e| e.claim_text.as_str()).collect();
        let index = Bm25Index::new(&texts, params);
        Self { corpus, index }
    }

    pub fn corpus(&self) -> &[TrainExample] {
        &self.corpus
    }

    pub fn select(&self, claim_text: &str, n_claims: usize) -> Result<Vec<TrainExample>, FewshotError> {
        if self.corpus.is_empty() {
            return Err(FewshotError::EmptyCorpus);
        }
        Ok(self
            .index
            .rank(claim_text, n_claims)
            .into_iter()
            .map(|(i, _)| self.corpus[i].clone())
            .collect())
    }
}

pub fn select_fewshot(
    claim_text: &str,
    corpus: &[TrainExample],
    n_claims: usize,
) -> Result<Vec<TrainExample>, FewshotError> {
    if corpus.is_empty() {
        return Err(FewshotError::EmptyCorpus);
    }
    Ok(bm25_rank(claim_text, corpus, Bm25Params::default(), n_claims)
        .into_iter()
        .cloned()
        .collect())
}

#[derive(Deserialize)]
struct RawAnswer {
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    answer_type: Option<String>,
}

#[derive(Deserialize)]
struct RawQuestion {
    question: String,
    #[serde(default)]
    answers: Vec<RawAnswer>,
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    answer_type: Option<String>,
}

#[derive(Deserialize)]
struct RawTrain {
    #[serde(alias = "claim")]
    claim_text: String,
    #[serde(alias = "gold_label", alias = "verdict")]
    label: String,
    #[serde(default, alias = "qa_pairs")]
    questions: Vec<RawQuestion>,
}

/// Loads the shared-task train file. Both the nested
/// `questions[].answers[]` layout and flat `qa_pairs` are accepted.
/// Claims with an unknown label and answers with an unknown answer type
/// are skipped.
pub fn load_train_set(path: &Path) -> Result<Vec<TrainExample>, FewshotError> {
    let text = fs::read_to_string(path).map_err(|source| FewshotError::Io { path: path.into(), source })?;
    let raw: Vec<RawTrain> =
        serde_json::from_str(&text).map_err(|source| FewshotError::Json { path: path.into(), source })?;
    let mut out = Vec::with_capacity(raw.len());
    for r in raw {
        let Ok(gold_label) = r.label.parse::<Verdict>() else {
            tracing::warn!(label = %r.label, "skipping train claim with unknown label");
            continue;
        };
        let mut qa_pairs = Vec::new();
        for q in r.questions {
            let answers = if q.answers.is_empty() {
                vec![RawAnswer { answer: q.answer, answer_type: q.answer_type }]
            } else {
                q.answers
            };
            for a in answers {
                let Some(answer_type) = a.answer_type.as_deref().and_then(|t| t.parse().ok()) else {
                    continue;
                };
                qa_pairs.push(TrainQa {
                    question: q.question.clone(),
                    answer: a.answer.unwrap_or_default(),
                    answer_type,
                });
            }
        }
        out.push(TrainExample { claim_text: r.claim_text, gold_label, qa_pairs });
    }
    Ok(out)
}
