//! Binary store files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "IMFVSTOR"
//! header_len u32
//! header     JSON      {format_version, claim_id, dim, count, chunks}
//! vectors    count * dim * f32
//! checksum   32 bytes  SHA-256 of everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Chunk, EmbeddedChunk, VectorStore};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"IMFVSTOR";
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed store: {0}")]
    Format(String),
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    claim_id: String,
    dim: usize,
    count: usize,
    chunks: Vec<Chunk>,
}

/// File name for a claim's store inside the store directory. Characters
/// outside `[A-Za-z0-9._-]` are replaced so any claim id maps to one file.
pub fn store_path(dir: &Path, claim_id: &str) -> PathBuf {
    let safe: String = claim_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect();
    dir.join(format!("{safe}.vstore"))
}

pub fn encode_store(store: &VectorStore) -> Result<Vec<u8>, StoreError> {
    if let Some(bad) = store.entries.iter().find(|e| e.vector.len() != store.dim) {
        return Err(StoreError::Format(format!(
            "entry {}#{} has dimension {}, store has {}",
            bad.chunk.doc_url,
            bad.chunk.index,
            bad.vector.len(),
            store.dim
        )));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        claim_id: store.claim_id.clone(),
        dim: store.dim,
        count: store.entries.len(),
        chunks: store.entries.iter().map(|e| e.chunk.clone()).collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| StoreError::Format(e.to_string()))?;
    let header_len = u32::try_from(header.len()).map_err(|_| StoreError::Format("header exceeds 4 GiB".into()))?;

    let mut buf = Vec::with_capacity(12 + header.len() + store.entries.len() * store.dim * 4 + CHECKSUM_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&header_len.to_le_bytes());
    buf.extend_from_slice(&header);
    for e in &store.entries {
        for x in &e.vector {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn decode_store(bytes: &[u8]) -> Result<VectorStore, StoreError> {
    let bad = |m: &str| StoreError::Format(m.to_string());
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(bad("file too short"));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(bad("checksum mismatch (truncated or corrupted file)"));
    }
    let header_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&end| end <= body.len())
        .ok_or_else(|| bad("header length exceeds file"))?;
    let header: Header =
        serde_json::from_slice(&body[12..header_end]).map_err(|e| StoreError::Format(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(StoreError::Format(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.dim == 0 {
        return Err(bad("dimension is zero"));
    }
    if header.chunks.len() != header.count {
        return Err(bad("chunk count does not match header"));
    }
    let floats = &body[header_end..];
    let expected = header
        .count
        .checked_mul(header.dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("vector block size overflows"))?;
    if floats.len() != expected {
        return Err(bad("vector block has wrong length"));
    }
    let entries = header
        .chunks
        .into_iter()
        .zip(floats.chunks_exact(header.dim * 4))
        .map(|(chunk, raw)| EmbeddedChunk {
            chunk,
            vector: raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        })
        .collect();
    Ok(VectorStore { claim_id: header.claim_id, dim: header.dim, entries })
}

/// Writes the store atomically (temp file + rename).
pub fn save_store(store: &VectorStore, path: &Path) -> Result<(), StoreError> {
    let bytes = encode_store(store)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    }
    let tmp = path.with_extension("vstore.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| StoreError::io(&tmp, e))?;
        f.sync_all().map_err(|e| StoreError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))
}

pub fn load_store(path: &Path) -> Result<VectorStore, StoreError> {
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    decode_store(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(n: usize, dim: usize) -> VectorStore {
        VectorStore {
            claim_id: "claim-1".into(),
            dim,
            entries: (0..n)
                .map(|i| EmbeddedChunk {
                    chunk: Chunk {
                        doc_url: format!("https://e.org/{i}"),
                        index: i,
                        text: format!("chunk {i} ünïcode"),
                        context_before: "before".into(),
                        context_after: String::new(),
                    },
                    vector: (0..dim).map(|j| (i * dim + j) as f32 * 0.1 - 1.0).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn round_trip_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let store = sample(3, 5);
        let path = store_path(dir.path(), &store.claim_id);
        save_store(&store, &path).unwrap();
        assert_eq!(load_store(&path).unwrap(), store);
    }

    #[test]
    fn empty_store_round_trips() {
        let store = sample(0, 7);
        assert_eq!(decode_store(&encode_store(&store).unwrap()).unwrap(), store);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let bytes = encode_store(&sample(2, 3)).unwrap();
        for cut in [0, 5, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_store(&bytes[..cut]), Err(StoreError::Format(_))), "cut at {cut}");
        }
    }

    #[test]
    fn flipped_bit_is_format_error() {
        let mut bytes = encode_store(&sample(2, 3)).unwrap();
        let n = bytes.len();
        bytes[n - CHECKSUM_LEN - 3] ^= 0x10;
        assert!(matches!(decode_store(&bytes), Err(StoreError::Format(_))));
    }

    #[test]
    fn version_mismatch_is_format_error() {
        let store = sample(1, 2);
        let header = serde_json::to_vec(&serde_json::json!({
            "format_version": 99, "claim_id": "x", "dim": 2, "count": 1,
            "chunks": [store.entries[0].chunk],
        }))
        .unwrap();
        let mut buf = MAGIC.to_vec();
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&[0u8; 8]);
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        let err = decode_store(&buf).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_store(Path::new("/nonexistent/x.vstore")), Err(StoreError::Io { .. })));
    }

    #[test]
    fn claim_ids_are_sanitized() {
        let p = store_path(Path::new("/s"), "a/b c");
        assert_eq!(p, PathBuf::from("/s/a_b_c.vstore"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn encode_decode_identity(
            dim in 1usize..12,
            rows in prop::collection::vec(prop::collection::vec(any::<u32>(), 12), 0..10),
            claim_id in "[a-z0-9]{1,10}",
        ) {
            // arbitrary bit patterns including NaN payloads must survive
            let store = VectorStore {
                claim_id,
                dim,
                entries: rows.iter().enumerate().map(|(i, r)| EmbeddedChunk {
                    chunk: Chunk { doc_url: "u".into(), index: i, text: "t".into(),
                        context_before: String::new(), context_after: String::new() },
                    vector: r[..dim].iter().map(|b| f32::from_bits(*b)).collect(),
                }).collect(),
            };
            let back = decode_store(&encode_store(&store).unwrap()).unwrap();
            prop_assert_eq!(&back.claim_id, &store.claim_id);
            prop_assert_eq!(back.dim, store.dim);
            prop_assert_eq!(back.entries.len(), store.entries.len());
            for (a, b) in back.entries.iter().zip(&store.entries) {
                prop_assert_eq!(&a.chunk, &b.chunk);
                let abits: Vec<u32> = a.vector.iter().map(|x| x.to_bits()).collect();
                let bbits: Vec<u32> = b.vector.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(abits, bbits);
            }
        }
    }
}
