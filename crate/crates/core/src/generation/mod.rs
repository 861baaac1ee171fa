//! Parsing and validating the model's JSON verdict, attaching cited
//! thumbnails, and converting QA pairs into submission evidence.

mod llm;

use std::collections::BTreeMap;
use std::sync::LazyLock;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::claim::{AnswerType, Verdict};
use crate::image_retrieval::thumbs::ThumbnailCache;
use crate::prompt::{SourceBlock, SourceKind};

pub use llm::{
    call_llm, chat_request_body, parse_chat_response, LlmError, LlmProvider, LlmResponse, OpenAiChat, Usage,
    DEFAULT_ENDPOINT, DEFAULT_MODEL,
};

pub const MAX_QA_PAIRS: usize = 10;
pub const IMAGE_TAG: &str = "[IMG_1]";

static IMG_TAG_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s*\[IMG_\d+\]").unwrap());
static FENCE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)```[A-Za-z0-9_-]*[ \t]*\r?\n?(.*?)```").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ResponseError {
    #[error("malformed JSON: {0}")]
    Parse(String),
    #[error("schema violation: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("declarative evidence requested but QA pair {index} has no evidence field")]
    ModeMismatch { index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thumbnail {
    pub media_type: String,
    /// Base64-encoded image bytes.
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub source: u32,
    pub answer_type: AnswerType,
    /// Self-contained evidence sentence, present only with the declarative
    /// prompt variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
    /// Set when `source` is not in the claim's source table.
    #[serde(default)]
    pub unknown_source: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail: Option<Thumbnail>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VeracityLikert {
    pub supported: u8,
    pub refuted: u8,
    pub not_enough_evidence: u8,
    pub conflicting: u8,
}

impl VeracityLikert {
    pub fn get(&self, verdict: Verdict) -> u8 {
        match verdict {
            Verdict::Supported => self.supported,
            Verdict::Refuted => self.refuted,
            Verdict::NotEnoughEvidence => self.not_enough_evidence,
            Verdict::ConflictingEvidence => self.conflicting,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum GenerationWarning {
    UnknownSource { pair: usize, source: u32 },
    MissingSource { pair: usize },
    Truncated { kept: usize, dropped: usize },
    TagStripped { field: String },
    ThumbnailUnavailable { source: u32, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub qa_pairs: Vec<QaPair>,
    pub likert: VeracityLikert,
    pub verdict: Verdict,
    pub justification: String,
    pub warnings: Vec<GenerationWarning>,
}

/// Returns the JSON object text inside `raw`: the first fenced block if
/// there is one, otherwise the span from the first `{` to the last `}`.
pub fn extract_json(raw: &str) -> &str {
    let body = FENCE_RE.captures(raw).and_then(|c| c.get(1)).map_or(raw, |m| m.as_str());
    let body = body.trim();
    match (body.find('{'), body.rfind('}')) {
        (Some(start), Some(end)) if start < end => &body[start..=end],
        _ => body,
    }
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value, ResponseError> {
    obj.get(name).ok_or_else(|| ResponseError::Schema(format!("missing field {name:?}")))
}

fn string_field(obj: &Map<String, Value>, name: &str) -> Result<String, ResponseError> {
    match field(obj, name)? {
        Value::String(s) => Ok(s.clone()),
        other => Err(ResponseError::Schema(format!("{name:?} must be a string, got {other}"))),
    }
}

fn likert_value(v: &Value, label: &str) -> Result<u8, ResponseError> {
    let n = match v {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => {
            let t = s.trim();
            if !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit()) {
                t.parse::<u64>().ok()
            } else {
                None
            }
        }
        _ => None,
    };
    match n {
        Some(n @ 1..=5) => Ok(n as u8),
        _ => Err(ResponseError::Schema(format!("Likert rating for {label:?} must be 1..5, got {v}"))),
    }
}

fn parse_likert(v: &Value) -> Result<VeracityLikert, ResponseError> {
    let obj = v
        .as_object()
        .ok_or_else(|| ResponseError::Schema("\"claim_veracity\" must be an object".into()))?;
    let mut ratings = [0u8; 4];
    for (slot, verdict) in ratings.iter_mut().zip(Verdict::ALL) {
        let value = obj
            .iter()
            .find(|(k, _)| k.parse::<Verdict>() == Ok(verdict))
            .map(|(_, v)| v)
            .ok_or_else(|| ResponseError::Schema(format!("missing Likert rating for {:?}", verdict.as_str())))?;
        *slot = likert_value(value, verdict.as_str())?;
    }
    Ok(VeracityLikert {
        supported: ratings[0],
        refuted: ratings[1],
        not_enough_evidence: ratings[2],
        conflicting: ratings[3],
    })
}

fn parse_source(v: Option<&Value>) -> Option<u32> {
    match v? {
        Value::Number(n) => n.as_u64().and_then(|n| u32::try_from(n).ok()),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn strip_tags(text: &str, field: &str, warnings: &mut Vec<GenerationWarning>) -> String {
    if IMG_TAG_RE.is_match(text) {
        warnings.push(GenerationWarning::TagStripped { field: field.to_string() });
        IMG_TAG_RE.replace_all(text, "").trim().to_string()
    } else {
        text.to_string()
    }
}

/// Parses and validates one model response against the claim's source table.
pub fn parse_response(
    raw: &str,
    source_table: &BTreeMap<u32, SourceBlock>,
) -> Result<ParsedResponse, ResponseError> {
    let value: Value = serde_json::from_str(extract_json(raw)).map_err(|e| ResponseError::Parse(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ResponseError::Schema("top level is not an object".into()))?;
    let mut warnings = Vec::new();

    let questions = field(obj, "questions")?
        .as_array()
        .ok_or_else(|| ResponseError::Schema("\"questions\" must be an array".into()))?;
    let mut qa_pairs = Vec::new();
    for (i, q) in questions.iter().enumerate() {
        let q = q
            .as_object()
            .ok_or_else(|| ResponseError::Schema(format!("question {i} is not an object")))?;
        let question = strip_tags(&string_field(q, "question")?, "question", &mut warnings);
        let answer = strip_tags(&string_field(q, "answer")?, "answer", &mut warnings);
        let answer_type = string_field(q, "answer_type")?
            .parse::<AnswerType>()
            .map_err(ResponseError::Schema)?;
        let evidence = match q.get("evidence") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(other) => return Err(ResponseError::Schema(format!("\"evidence\" must be a string, got {other}"))),
        };
        let Some(source) = parse_source(q.get("source")) else {
            warnings.push(GenerationWarning::MissingSource { pair: i });
            continue;
        };
        let unknown_source = !source_table.contains_key(&source);
        if unknown_source {
            warnings.push(GenerationWarning::UnknownSource { pair: i, source });
        }
        qa_pairs.push(QaPair { question, answer, source, answer_type, evidence, unknown_source, thumbnail: None });
    }
    if qa_pairs.len() > MAX_QA_PAIRS {
        warnings.push(GenerationWarning::Truncated { kept: MAX_QA_PAIRS, dropped: qa_pairs.len() - MAX_QA_PAIRS });
        qa_pairs.truncate(MAX_QA_PAIRS);
    }

    let likert = parse_likert(field(obj, "claim_veracity")?)?;
    let verdict_text = string_field(obj, "veracity_verdict")?;
    let verdict = verdict_text.parse::<Verdict>().map_err(|e| ResponseError::Schema(e.to_string()))?;
    let justification = strip_tags(&string_field(obj, "verdict_justification")?, "verdict_justification", &mut warnings);

    Ok(ParsedResponse { qa_pairs, likert, verdict, justification, warnings })
}

/// Serializes a parsed response back into the output shape the prompt asks
/// for. Thumbnails and warnings are not part of that shape.
pub fn render_response(parsed: &ParsedResponse) -> String {
    let questions: Vec<Value> = parsed
        .qa_pairs
        .iter()
        .map(|p| {
            let mut q = json!({
                "question": p.question,
                "answer": p.answer,
                "source": p.source.to_string(),
                "answer_type": p.answer_type.as_str(),
            });
            if let Some(e) = &p.evidence {
                q["evidence"] = json!(e);
            }
            q
        })
        .collect();
    let mut veracity = Map::new();
    for v in Verdict::ALL {
        veracity.insert(v.as_str().to_string(), json!(parsed.likert.get(v).to_string()));
    }
    serde_json::to_string_pretty(&json!({
        "questions": questions,
        "claim_veracity": veracity,
        "veracity_verdict": parsed.verdict.as_str(),
        "verdict_justification": parsed.justification,
    }))
    .expect("JSON values always serialize")
}

pub fn sniff_image_type(bytes: &[u8]) -> &'static str {
    match bytes {
        [0x89, b'P', b'N', b'G', ..] => "image/png",
        [b'G', b'I', b'F', b'8', ..] => "image/gif",
        [b'R', b'I', b'F', b'F', _, _, _, _, b'W', b'E', b'B', b'P', ..] => "image/webp",
        _ => "image/jpeg",
    }
}

/// Gives every pair that cites an image source the thumbnail of that source.
/// Fetch failures leave the pair without a thumbnail and add a warning.
pub fn attach_thumbnails(
    qa_pairs: &mut [QaPair],
    source_table: &BTreeMap<u32, SourceBlock>,
    thumbs: &ThumbnailCache,
) -> Vec<GenerationWarning> {
    let mut warnings = Vec::new();
    for pair in qa_pairs.iter_mut() {
        let Some(SourceBlock { kind: SourceKind::Image { image_url, .. }, .. }) = source_table.get(&pair.source) else {
            continue;
        };
        match thumbs.get(image_url) {
            Ok(bytes) => {
                pair.thumbnail = Some(Thumbnail {
                    media_type: sniff_image_type(&bytes).to_string(),
                    data: BASE64.encode(bytes.as_slice()),
                });
            }
            Err(e) => warnings.push(GenerationWarning::ThumbnailUnavailable { source: pair.source, message: e.to_string() }),
        }
    }
    warnings
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceFormatMode {
    AnswerOnly,
    #[default]
    #[serde(alias = "qa")]
    QuestionPlusAnswer,
    Declarative,
}

impl std::str::FromStr for EvidenceFormatMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "answer_only" => Ok(Self::AnswerOnly),
            "qa" | "question_plus_answer" => Ok(Self::QuestionPlusAnswer),
            "declarative" => Ok(Self::Declarative),
            _ => Err(format!("unknown evidence mode {s:?} (answer_only, qa, declarative)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<Thumbnail>,
}

/// Converts QA pairs into evidence texts. Any tag the model wrote is
/// removed, then `" [IMG_1]"` is appended exactly when a thumbnail is
/// attached, so tag and payload always travel together.
pub fn to_submission_evidence(
    qa_pairs: &[QaPair],
    mode: EvidenceFormatMode,
) -> Result<Vec<EvidenceItem>, FormatError> {
    qa_pairs
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let base = match mode {
                EvidenceFormatMode::AnswerOnly => p.answer.clone(),
                EvidenceFormatMode::QuestionPlusAnswer => format!("{} {}", p.question, p.answer),
                EvidenceFormatMode::Declarative => match &p.evidence {
                    Some(e) if !e.trim().is_empty() => e.clone(),
                    _ => return Err(FormatError::ModeMismatch { index }),
                },
            };
            let mut text = IMG_TAG_RE.replace_all(&base, "").trim().to_string();
            if p.thumbnail.is_some() {
                text.push(' ');
                text.push_str(IMAGE_TAG);
            }
            Ok(EvidenceItem { text, image: p.thumbnail.clone() })
        })
        .collect()
}
