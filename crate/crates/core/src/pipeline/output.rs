//! Submission records, diagnostics, and the files they are written to.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cost::{CostEntry, CostSummary};
use crate::claim::Verdict;
use crate::generation::{EvidenceItem, VeracityLikert};
use crate::provider::ProviderError;

pub const SUBMISSION_SCHEMA: &str = include_str!("../../assets/submission.schema.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: String,
    pub message: String,
}

/// One claim's entry in the submission file. Failed claims carry
/// `failure` and no label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimOutput {
    pub claim_id: String,
    pub questions: Vec<String>,
    pub evidence: Vec<EvidenceItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub justification: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureRecord>,
}

impl ClaimOutput {
    pub fn failed(claim_id: impl Into<String>, stage: &str, message: impl Into<String>) -> Self {
        Self {
            claim_id: claim_id.into(),
            questions: Vec::new(),
            evidence: Vec::new(),
            label: None,
            justification: None,
            failure: Some(FailureRecord { stage: stage.into(), message: message.into() }),
        }
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn sha256(&self) -> String {
        let json = serde_json::to_vec(self).expect("claim output serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Everything about a claim's run that is not part of the submission.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClaimDiagnostics {
    pub claim_id: String,
    pub warnings: Vec<String>,
    pub provider_errors: Vec<ProviderError>,
    pub timings_ms: BTreeMap<String, u64>,
    pub llm_attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub likert: Option<VeracityLikert>,
    pub text_sources: usize,
    pub image_sources: usize,
}

/// Orders numeric ids numerically and everything else lexically, numeric
/// ids first.
pub fn compare_claim_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u128>(), b.parse::<u128>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

pub fn submission_json(outputs: &[ClaimOutput]) -> String {
    let mut s = serde_json::to_string_pretty(outputs).expect("claim outputs serialize");
    s.push('\n');
    s
}

pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}

pub fn write_submission(path: &Path, outputs: &[ClaimOutput]) -> std::io::Result<()> {
    write_atomic(path, submission_json(outputs).as_bytes())
}

pub fn read_submission(path: &Path) -> Result<Vec<ClaimOutput>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub claims: Vec<ClaimDiagnostics>,
    pub costs: Vec<CostEntry>,
    pub cost_summary: CostSummary,
}

pub fn write_diagnostics(path: &Path, report: &DiagnosticsReport) -> std::io::Result<()> {
    let mut s = serde_json::to_string_pretty(report).expect("diagnostics serialize");
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::Thumbnail;
    use serde_json::Value;

    #[test]
    fn id_ordering() {
        let mut ids = vec!["10", "2", "b", "1", "a", "02"];
        ids.sort_by(|a, b| compare_claim_ids(a, b));
        assert_eq!(ids, ["1", "02", "2", "10", "a", "b"]);
    }

    fn sample() -> ClaimOutput {
        ClaimOutput {
            claim_id: "7".into(),
            questions: vec!["Who?".into()],
            evidence: vec![EvidenceItem {
                text: "Who? X. [IMG_1]".into(),
                image: Some(Thumbnail { media_type: "image/jpeg".into(), data: "AA==".into() }),
            }],
            label: Some(Verdict::Refuted),
            justification: Some("j".into()),
            failure: None,
        }
    }

    fn check_against_schema(value: &Value, schema: &Value) {
        let obj = value.as_object().unwrap();
        let props = schema["properties"].as_object().unwrap();
        for key in obj.keys() {
            assert!(props.contains_key(key), "field {key} not in schema");
        }
        for req in schema["required"].as_array().unwrap() {
            assert!(obj.contains_key(req.as_str().unwrap()), "missing {req}");
        }
    }

    #[test]
    fn outputs_match_pinned_schema() {
        let schema: Value = serde_json::from_str(SUBMISSION_SCHEMA).unwrap();
        let item = &schema["items"];
        let evidence_schema = &item["properties"]["evidence"]["items"];
        for out in [sample(), ClaimOutput::failed("8", "llm", "boom")] {
            let v = serde_json::to_value(&out).unwrap();
            check_against_schema(&v, item);
            for e in v["evidence"].as_array().unwrap() {
                check_against_schema(e, evidence_schema);
            }
        }
        let labels: Vec<&str> = item["properties"]["label"]["enum"]
            .as_array()
            .unwrap()
            .iter()
            .map(|l| l.as_str().unwrap())
            .collect();
        assert_eq!(labels, Verdict::ALL.map(Verdict::as_str));
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = sample();
        assert_eq!(a.sha256(), sample().sha256());
        let mut b = sample();
        b.justification = Some("k".into());
        assert_ne!(a.sha256(), b.sha256());
    }
}
