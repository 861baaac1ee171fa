//! Per-claim vector stores built from the text-only knowledge store.
//!
//! Documents are cut into fixed-width, non-overlapping chunks of at most
//! `max_len` Unicode scalar values. Each chunk carries a window of the
//! neighbouring chunks' text as context.

mod persist;

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingError, EmbeddingProvider};

pub use persist::{load_store, save_store, store_path, StoreError, FORMAT_VERSION};

pub const DEFAULT_CHUNK_LEN: usize = 2048;
pub const DEFAULT_CONTEXT_WINDOW: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub url: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_url: String,
    pub index: usize,
    pub text: String,
    pub context_before: String,
    pub context_after: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedChunk {
    pub chunk: Chunk,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    pub claim_id: String,
    pub dim: usize,
    pub entries: Vec<EmbeddedChunk>,
}

impl VectorStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Byte offsets of every chunk boundary, including 0 and `text.len()`.
fn chunk_boundaries(text: &str, max_len: usize) -> Vec<usize> {
    let mut bounds = vec![0];
    let mut count = 0;
    for (idx, _) in text.char_indices() {
        if count == max_len {
            bounds.push(idx);
            count = 0;
        }
        count += 1;
    }
    if !text.is_empty() {
        bounds.push(text.len());
    }
    bounds
}

fn tail_chars(s: &str, n: usize) -> &str {
    if n == 0 {
        return "";
    }
    match s.char_indices().rev().nth(n - 1) {
        Some((idx, _)) => &s[idx..],
        None => s,
    }
}

fn head_chars(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}

/// Splits a document into chunks of at most `max_len` characters.
///
/// # Panics
///
/// Panics if `max_len` is zero.
pub fn chunk_document(doc: &SourceDocument, max_len: usize, context_window: usize) -> Vec<Chunk> {
    assert!(max_len > 0, "max_len must be positive");
    let bounds = chunk_boundaries(&doc.text, max_len);
    let pieces: Vec<&str> = bounds.windows(2).map(|w| &doc.text[w[0]..w[1]]).collect();
    pieces
        .iter()
        .enumerate()
        .map(|(i, text)| Chunk {
            doc_url: doc.url.clone(),
            index: i,
            text: (*text).to_string(),
            context_before: i
                .checked_sub(1)
                .map(|p| tail_chars(pieces[p], context_window).to_string())
                .unwrap_or_default(),
            context_after: pieces
                .get(i + 1)
                .map(|n| head_chars(n, context_window).to_string())
                .unwrap_or_default(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreOptions {
    pub max_len: usize,
    pub context_window: usize,
    /// Texts per embedding request.
    pub batch_size: usize,
    /// Concurrent embedding requests.
    pub parallelism: usize,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            max_len: DEFAULT_CHUNK_LEN,
            context_window: DEFAULT_CONTEXT_WINDOW,
            batch_size: 32,
            parallelism: 4,
        }
    }
}

pub fn build_store(
    claim_id: &str,
    docs: &[SourceDocument],
    embedder: &dyn EmbeddingProvider,
) -> Result<VectorStore, EmbeddingError> {
    build_store_with(claim_id, docs, embedder, &StoreOptions::default())
}

pub fn build_store_with(
    claim_id: &str,
    docs: &[SourceDocument],
    embedder: &dyn EmbeddingProvider,
    opts: &StoreOptions,
) -> Result<VectorStore, EmbeddingError> {
    let chunks: Vec<Chunk> = docs
        .iter()
        .flat_map(|d| chunk_document(d, opts.max_len, opts.context_window))
        .collect();
    let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    let batches: Vec<&[String]> = texts.chunks(opts.batch_size.max(1)).collect();

    let mut results: Vec<Option<Result<Vec<Vec<f32>>, EmbeddingError>>> = vec![None; batches.len()];
    let workers = opts.parallelism.max(1).min(batches.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(batch) = batches.get(i) else { break };
                let res = embedder.embed(batch).and_then(|vs| {
                    if vs.len() == batch.len() {
                        Ok(vs)
                    } else {
                        Err(EmbeddingError::Count { expected: batch.len(), got: vs.len() })
                    }
                });
                slots.lock().unwrap()[i] = Some(res);
            });
        }
    });

    let mut vectors = Vec::with_capacity(chunks.len());
    for res in results {
        vectors.extend(res.expect("every batch is processed")?);
    }

    let dim = match vectors.first() {
        Some(v) => v.len(),
        None => match embedder.dimension() {
            Some(d) => d,
            None => crate::embedding::embed_one(embedder, " ")?.len(),
        },
    };
    if dim == 0 {
        return Err(EmbeddingError::ZeroDimension);
    }
    if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
        return Err(EmbeddingError::Dimension { expected: dim, got: bad.len() });
    }

    Ok(VectorStore {
        claim_id: claim_id.to_string(),
        dim,
        entries: chunks
            .into_iter()
            .zip(vectors)
            .map(|(chunk, vector)| EmbeddedChunk { chunk, vector })
            .collect(),
    })
}

#[derive(Debug, Deserialize)]
struct RawKnowledgeDoc {
    url: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    url2text: Option<Vec<String>>,
}

/// Reads a knowledge-store file: JSON lines, one document per line, with
/// either `text` or `url2text` (a list of sentences joined by newlines).
/// Lines without a URL are skipped.
pub fn load_knowledge_file(path: &Path) -> Result<Vec<SourceDocument>, StoreError> {
    let file = fs::File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut docs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawKnowledgeDoc = serde_json::from_str(&line)
            .map_err(|e| StoreError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if raw.url.trim().is_empty() {
            continue;
        }
        let text = match (raw.text, raw.url2text) {
            (Some(t), _) => t,
            (None, Some(parts)) => parts.join("\n"),
            (None, None) => String::new(),
        };
        docs.push(SourceDocument { url: raw.url, text });
    }
    Ok(docs)
}

/// Lists `(claim_id, path)` for every `*.jsonl` / `*.json` file in a
/// knowledge-store directory, sorted by claim id.
pub fn knowledge_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, StoreError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| StoreError::io(dir, e))? {
        let path = entry.map_err(|e| StoreError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if matches!(ext, Some("jsonl") | Some("json")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashingEmbedder;
    use proptest::prelude::*;

    fn doc(text: &str) -> SourceDocument {
        SourceDocument { url: "https://example.org/a".into(), text: text.into() }
    }

    struct Stub(Vec<Vec<f32>>);
    impl EmbeddingProvider for Stub {
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
            Ok(texts
                .iter()
                .map(|t| self.0[t.starts_with('b') as usize].clone())
                .collect())
        }
    }

    #[test]
    fn fixed_width_segmentation() {
        let text = "x".repeat(5000);
        let chunks = chunk_document(&doc(&text), 2048, 256);
        let lens: Vec<usize> = chunks.iter().map(|c| c.text.chars().count()).collect();
        assert_eq!(lens, vec![2048, 2048, 904]);
    }

    #[test]
    fn empty_document() {
        assert!(chunk_document(&doc(""), 2048, 256).is_empty());
    }

    #[test]
    fn single_chunk_has_no_context() {
        let chunks = chunk_document(&doc(&"y".repeat(2048)), 2048, 256);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].context_before, "");
        assert_eq!(chunks[0].context_after, "");
    }

    #[test]
    fn context_windows() {
        let chunks = chunk_document(&doc("abcdefghij"), 4, 2);
        assert_eq!(chunks.iter().map(|c| c.text.as_str()).collect::<Vec<_>>(), ["abcd", "efgh", "ij"]);
        assert_eq!(chunks[1].context_before, "cd");
        assert_eq!(chunks[1].context_after, "ij");
        assert_eq!(chunks[2].context_before, "gh");
        assert_eq!(chunks[0].context_after, "ef");
        let wide = chunk_document(&doc("abcdefghij"), 4, 10);
        assert_eq!(wide[1].context_before, "abcd");
        assert_eq!(wide[1].context_after, "ij");
        let none = chunk_document(&doc("abcdefghij"), 4, 0);
        assert!(none.iter().all(|c| c.context_before.is_empty() && c.context_after.is_empty()));
    }

    #[test]
    fn multibyte_characters_count_once() {
        let text = "é".repeat(5);
        let chunks = chunk_document(&doc(&text), 2, 1);
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[0].text, "éé");
        assert_eq!(chunks[2].text, "é");
    }

    #[test]
    fn build_with_stub() {
        let docs = [
            SourceDocument { url: "u1".into(), text: "alpha".into() },
            SourceDocument { url: "u2".into(), text: "beta".into() },
        ];
        let store = build_store("c1", &docs, &Stub(vec![vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        assert_eq!(store.dim, 2);
        assert_eq!(store.len(), 2);
        assert_eq!(store.entries[0].vector, vec![1.0, 0.0]);
        assert_eq!(store.entries[1].vector, vec![0.0, 1.0]);
    }

    #[test]
    fn build_empty() {
        let store = build_store("c1", &[], &HashingEmbedder::new(8)).unwrap();
        assert!(store.is_empty());
        assert_eq!(store.dim, 8);
    }

    #[test]
    fn build_reconstructs_long_document() {
        let text: String = (0..4096).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let store = build_store("c", &[doc(&text)], &HashingEmbedder::new(8)).unwrap();
        assert_eq!(store.len(), 2);
        let joined: String = store.entries.iter().map(|e| e.chunk.text.as_str()).collect();
        assert_eq!(joined, text);
    }

    struct Ragged;
    impl EmbeddingProvider for Ragged {
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
            Ok(texts.iter().map(|t| vec![0.5; 1 + t.len() % 2]).collect())
        }
    }

    #[test]
    fn inconsistent_dimensions_rejected() {
        let docs = [doc("ab"), doc("abc")];
        let err = build_store_with("c", &docs, &Ragged, &StoreOptions { batch_size: 1, ..Default::default() });
        assert!(matches!(err, Err(EmbeddingError::Dimension { .. })));
    }

    struct Failing;
    impl EmbeddingProvider for Failing {
        fn embed(&self, _: &[String]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
            Err(crate::provider::ProviderError::fatal("embedding", "down").into())
        }
    }

    #[test]
    fn provider_failure_aborts() {
        assert!(matches!(build_store("c", &[doc("a")], &Failing), Err(EmbeddingError::Provider(_))));
    }

    #[test]
    fn knowledge_file_formats() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("12.jsonl");
        std::fs::write(
            &p,
            "{\"url\": \"u1\", \"url2text\": [\"a\", \"b\"]}\n\n{\"url\": \"u2\", \"text\": \"t\"}\n{\"url\": \"\", \"text\": \"skip\"}\n",
        )
        .unwrap();
        let docs = load_knowledge_file(&p).unwrap();
        assert_eq!(docs, vec![
            SourceDocument { url: "u1".into(), text: "a\nb".into() },
            SourceDocument { url: "u2".into(), text: "t".into() },
        ]);
        assert_eq!(knowledge_files(dir.path()).unwrap(), vec![("12".to_string(), p)]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn chunks_reconstruct_input(text in any::<String>(), max_len in 1usize..64, window in 0usize..16) {
            let chunks = chunk_document(&doc(&text), max_len, window);
            let joined: String = chunks.iter().map(|c| c.text.as_str()).collect();
            prop_assert_eq!(joined, text.clone());
            let n = text.chars().count();
            prop_assert_eq!(chunks.len(), n.div_ceil(max_len));
            for (i, c) in chunks.iter().enumerate() {
                let len = c.text.chars().count();
                prop_assert!(len <= max_len);
                if i + 1 < chunks.len() {
                    prop_assert_eq!(len, max_len);
                    prop_assert_eq!(&c.context_after, head_chars(&chunks[i + 1].text, window));
                }
                if i > 0 {
                    prop_assert_eq!(&c.context_before, tail_chars(&chunks[i - 1].text, window));
                }
            }
        }
    }
}
