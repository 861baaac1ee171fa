//! Append-only JSON-lines journal of completed claims, used to resume an
//! interrupted run.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::cost::CostEntry;
use super::output::{ClaimDiagnostics, ClaimOutput};

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("journal {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("journal {path} line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub claim_id: String,
    pub output_sha256: String,
    pub output: ClaimOutput,
    pub cost: CostEntry,
    pub diagnostics: ClaimDiagnostics,
}

impl JournalRecord {
    pub fn new(output: ClaimOutput, cost: CostEntry, diagnostics: ClaimDiagnostics) -> Self {
        Self { claim_id: output.claim_id.clone(), output_sha256: output.sha256(), output, cost, diagnostics }
    }
}

pub struct Journal {
    path: PathBuf,
    file: Mutex<File>,
}

fn parse_record(line: &str) -> Result<JournalRecord, String> {
    let rec: JournalRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if rec.claim_id != rec.output.claim_id {
        return Err("claim_id does not match its output".into());
    }
    if rec.output.sha256() != rec.output_sha256 {
        return Err("output hash mismatch".into());
    }
    Ok(rec)
}

impl Journal {
    /// Opens or creates a journal and returns the records already in it.
    /// An unterminated or unparseable last line (a write cut short) is
    /// discarded and the file truncated before it; a bad line anywhere
    /// else is an error.
    pub fn open(path: &Path) -> Result<(Self, Vec<JournalRecord>), JournalError> {
        let io = |source| JournalError::Io { path: path.to_path_buf(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(path).map_err(io)?;

        let mut lines = Vec::new();
        let mut reader = BufReader::new(&mut file);
        let mut offset = 0u64;
        loop {
            let mut buf = String::new();
            let n = reader.read_line(&mut buf).map_err(io)?;
            if n == 0 {
                break;
            }
            lines.push((offset, buf));
            offset += n as u64;
        }

        let mut records = Vec::new();
        let mut keep_len = offset;
        let count = lines.len();
        for (i, (start, line)) in lines.iter().enumerate() {
            let is_last = i + 1 == count;
            if line.trim().is_empty() {
                continue;
            }
            let parsed = if line.ends_with('\n') { parse_record(line) } else { Err("unterminated line".into()) };
            match parsed {
                Ok(rec) => records.push(rec),
                Err(message) if is_last => {
                    tracing::warn!(journal = %path.display(), "discarding incomplete last line: {message}");
                    keep_len = *start;
                }
                Err(message) => {
                    return Err(JournalError::Corrupt { path: path.to_path_buf(), line: i + 1, message });
                }
            }
        }
        file.set_len(keep_len).map_err(io)?;
        file.seek(SeekFrom::End(0)).map_err(io)?;
        Ok((Self { path: path.to_path_buf(), file: Mutex::new(file) }, records))
    }

    /// Appends one record and syncs it to disk before returning.
    pub fn append(&self, record: &JournalRecord) -> Result<(), JournalError> {
        let mut line = serde_json::to_string(record).expect("journal records serialize");
        line.push('\n');
        let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
        let io = |source| JournalError::Io { path: self.path.clone(), source };
        file.write_all(line.as_bytes()).map_err(io)?;
        file.flush().map_err(io)?;
        file.sync_data().map_err(io)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Reads a journal without modifying it; a cut-short last line is skipped.
pub fn read_journal(path: &Path) -> Result<Vec<JournalRecord>, JournalError> {
    let text = std::fs::read_to_string(path).map_err(|source| JournalError::Io { path: path.to_path_buf(), source })?;
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let mut records = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = if line.ends_with('\n') { parse_record(line) } else { Err("unterminated line".into()) };
        match parsed {
            Ok(r) => records.push(r),
            Err(_) if i + 1 == lines.len() => {}
            Err(message) => return Err(JournalError::Corrupt { path: path.to_path_buf(), line: i + 1, message }),
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::cost::{CostEntry, Usage};
    use crate::pipeline::PriceTable;
    use rust_decimal::Decimal;

    fn record(id: &str) -> JournalRecord {
        let prices = PriceTable {
            ris_per_search_usd: Decimal::new(3, 3),
            scrape_per_page_usd: Decimal::new(6, 3),
            llm_input_per_token_usd: Decimal::ZERO,
            llm_output_per_token_usd: Decimal::ZERO,
            llm_discount_factor: Decimal::ONE,
        };
        JournalRecord::new(
            ClaimOutput::failed(id, "llm", "x"),
            CostEntry::new(id, Usage { ris_searches: 1, ..Default::default() }, &prices),
            ClaimDiagnostics { claim_id: id.into(), ..Default::default() },
        )
    }

    #[test]
    fn append_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let (j, existing) = Journal::open(&path).unwrap();
        assert!(existing.is_empty());
        j.append(&record("1")).unwrap();
        j.append(&record("2")).unwrap();
        drop(j);
        let (_, recs) = Journal::open(&path).unwrap();
        assert_eq!(recs, vec![record("1"), record("2")]);
        assert_eq!(read_journal(&path).unwrap().len(), 2);
    }

    #[test]
    fn truncated_tail_is_discarded_and_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let full = serde_json::to_string(&record("1")).unwrap() + "\n";
        let partial = serde_json::to_string(&record("2")).unwrap();
        std::fs::write(&path, format!("{full}{}", &partial[..partial.len() / 2])).unwrap();
        assert_eq!(read_journal(&path).unwrap().len(), 1);
        let (j, recs) = Journal::open(&path).unwrap();
        assert_eq!(recs.len(), 1);
        j.append(&record("3")).unwrap();
        drop(j);
        let ids: Vec<_> = read_journal(&path).unwrap().into_iter().map(|r| r.claim_id).collect();
        assert_eq!(ids, ["1", "3"]);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let full = serde_json::to_string(&record("1")).unwrap() + "\n";
        std::fs::write(&path, format!("{{garbage}}\n{full}")).unwrap();
        assert!(matches!(Journal::open(&path), Err(JournalError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn tampered_output_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let mut r = record("1");
        r.output.failure = None;
        let line = serde_json::to_string(&r).unwrap() + "\n";
        std::fs::write(&path, format!("{line}{line}")).unwrap();
        assert!(matches!(Journal::open(&path), Err(JournalError::Corrupt { .. })));
    }
}
