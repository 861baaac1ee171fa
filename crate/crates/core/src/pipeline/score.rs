//! Verdict accuracy, the thresholded combined score, and label counts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::output::ClaimOutput;
use crate::claim::Verdict;

/// A correct verdict counts toward the combined score only when the
/// claim's evidence score is at least this.
pub const EVIDENCE_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AlignmentError {
    #[error("claim ids without gold label: {0:?}")]
    MissingGold(Vec<String>),
    #[error("gold claim ids without output: {0:?}")]
    MissingOutput(Vec<String>),
    #[error("claim ids without evidence score: {0:?}")]
    MissingEvidenceScore(Vec<String>),
    #[error("duplicate claim id {0:?}")]
    Duplicate(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub claims: usize,
    pub failed: usize,
    pub correct_verdicts: usize,
    pub verdict_accuracy: f64,
    /// Claims with a correct verdict and evidence score at or above the
    /// threshold; present only when evidence scores were supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combined_hits: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combined_score: Option<f64>,
    pub labels: BTreeMap<String, LabelCounts>,
}

fn unique_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<BTreeSet<&'a str>, AlignmentError> {
    let mut set = BTreeSet::new();
    for id in ids {
        if !set.insert(id) {
            return Err(AlignmentError::Duplicate(id.to_string()));
        }
    }
    Ok(set)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn score_report(
    outputs: &[ClaimOutput],
    gold: &[(String, Verdict)],
    evidence_scores: Option<&BTreeMap<String, f64>>,
) -> Result<ScoreReport, AlignmentError> {
    let out_ids = unique_ids(outputs.iter().map(|o| o.claim_id.as_str()))?;
    let gold_ids = unique_ids(gold.iter().map(|(id, _)| id.as_str()))?;
    let no_gold: Vec<String> = out_ids.difference(&gold_ids).map(|s| s.to_string()).collect();
    if !no_gold.is_empty() {
        return Err(AlignmentError::MissingGold(no_gold));
    }
    let no_output: Vec<String> = gold_ids.difference(&out_ids).map(|s| s.to_string()).collect();
    if !no_output.is_empty() {
        return Err(AlignmentError::MissingOutput(no_output));
    }
    if let Some(scores) = evidence_scores {
        let missing: Vec<String> = out_ids.iter().filter(|id| !scores.contains_key(**id)).map(|s| s.to_string()).collect();
        if !missing.is_empty() {
            return Err(AlignmentError::MissingEvidenceScore(missing));
        }
    }

    let gold_map: BTreeMap<&str, Verdict> = gold.iter().map(|(id, v)| (id.as_str(), *v)).collect();
    let mut labels: BTreeMap<String, LabelCounts> =
        Verdict::ALL.iter().map(|v| (v.as_str().to_string(), LabelCounts::default())).collect();
    let mut correct = 0;
    let mut failed = 0;
    let mut combined = 0;
    for out in outputs {
        let g = gold_map[out.claim_id.as_str()];
        labels.get_mut(g.as_str()).unwrap().gold += 1;
        let Some(pred) = out.label else {
            failed += 1;
            continue;
        };
        labels.get_mut(pred.as_str()).unwrap().predicted += 1;
        if pred == g {
            correct += 1;
            labels.get_mut(g.as_str()).unwrap().correct += 1;
            if evidence_scores.is_some_and(|s| s[&out.claim_id] >= EVIDENCE_THRESHOLD) {
                combined += 1;
            }
        }
    }
    let n = outputs.len();
    Ok(ScoreReport {
        claims: n,
        failed,
        correct_verdicts: correct,
        verdict_accuracy: ratio(correct, n),
        combined_hits: evidence_scores.map(|_| combined),
        combined_score: evidence_scores.map(|_| ratio(combined, n)),
        labels,
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawScores {
    Map(BTreeMap<String, f64>),
    List(Vec<RawScore>),
}

#[derive(Deserialize)]
struct RawScore {
    #[serde(alias = "id")]
    claim_id: serde_json::Value,
    #[serde(alias = "evidence_score")]
    score: f64,
}

/// Reads per-claim evidence scores from `{"id": score}` or
/// `[{"claim_id", "score"}]`.
pub fn load_evidence_scores(path: &Path) -> Result<BTreeMap<String, f64>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let raw: RawScores = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(match raw {
        RawScores::Map(m) => m,
        RawScores::List(list) => list
            .into_iter()
            .map(|r| {
                let id = match r.claim_id {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                (id, r.score)
            })
            .collect(),
    })
}
