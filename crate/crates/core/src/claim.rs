//! Claims, verdict labels, and the dataset loaders for them.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

/// One of the four veracity labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "Supported")]
    Supported,
    #[serde(rename = "Refuted")]
    Refuted,
    #[serde(rename = "Not Enough Evidence")]
    NotEnoughEvidence,
    #[serde(rename = "Conflicting Evidence/Cherrypicking")]
    ConflictingEvidence,
}

impl Verdict {
    pub const ALL: [Verdict; 4] = [
        Verdict::Supported,
        Verdict::Refuted,
        Verdict::NotEnoughEvidence,
        Verdict::ConflictingEvidence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Supported => "Supported",
            Verdict::Refuted => "Refuted",
            Verdict::NotEnoughEvidence => "Not Enough Evidence",
            Verdict::ConflictingEvidence => "Conflicting Evidence/Cherrypicking",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("not a verdict label: {0:?}")]
pub struct UnknownVerdict(pub String);

impl FromStr for Verdict {
    type Err = UnknownVerdict;

    /// Accepts the canonical labels case-insensitively, plus the
    /// "Supported claim" / "Refuted claim" phrasing used in the prompt.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase();
        let norm = norm.strip_suffix(" claim").unwrap_or(&norm);
        match norm {
            "supported" => Ok(Verdict::Supported),
            "refuted" => Ok(Verdict::Refuted),
            "not enough evidence" => Ok(Verdict::NotEnoughEvidence),
            "conflicting evidence/cherrypicking" | "conflicting evidence/cherry-picking" => {
                Ok(Verdict::ConflictingEvidence)
            }
            _ => Err(UnknownVerdict(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnswerType {
    Boolean,
    Extractive,
    Abstractive,
    Unanswerable,
}

impl AnswerType {
    pub fn as_str(self) -> &'static str {
        match self {
            AnswerType::Boolean => "Boolean",
            AnswerType::Extractive => "Extractive",
            AnswerType::Abstractive => "Abstractive",
            AnswerType::Unanswerable => "Unanswerable",
        }
    }
}

impl FromStr for AnswerType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "boolean" => Ok(AnswerType::Boolean),
            "extractive" => Ok(AnswerType::Extractive),
            "abstractive" => Ok(AnswerType::Abstractive),
            "unanswerable" => Ok(AnswerType::Unanswerable),
            _ => Err(format!("not an answer type: {s:?}")),
        }
    }
}

/// A claim image: raw bytes plus media type, and the public URL when one
/// is known (reverse image search needs it).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClaimImage {
    pub bytes: Vec<u8>,
    pub media_type: String,
    pub url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Claim {
    pub claim_id: String,
    pub text: String,
    pub images: Vec<ClaimImage>,
    pub author: String,
    pub date: NaiveDate,
    pub medium: String,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
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
    #[error("claim {claim_id}: {message}")]
    Invalid { claim_id: String, message: String },
}

#[derive(Debug, Deserialize)]
struct RawImage {
    #[serde(default)]
    path: Option<String>,
    #[serde(default)]
    url: Option<String>,
    #[serde(default)]
    data: Option<String>,
    #[serde(default)]
    media_type: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RawClaim {
    #[serde(alias = "id")]
    claim_id: serde_json::Value,
    #[serde(alias = "claim_text")]
    text: String,
    #[serde(default, alias = "claim_images")]
    images: Vec<RawImage>,
    #[serde(default, alias = "speaker")]
    author: Option<String>,
    #[serde(alias = "date")]
    claim_date: String,
    #[serde(default, alias = "publication_medium")]
    medium: Option<String>,
}

/// Parses a date in `YYYY-MM-DD` form, tolerating a trailing time part and
/// the `DD-MM-YYYY` form some dataset dumps use.
pub fn parse_claim_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    let head = s.get(..10).unwrap_or(s);
    NaiveDate::parse_from_str(head, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(head, "%d-%m-%Y"))
        .ok()
}

pub fn media_type_for(path: &str) -> &'static str {
    let lower = path.to_ascii_lowercase();
    if lower.ends_with(".png") {
        "image/png"
    } else if lower.ends_with(".gif") {
        "image/gif"
    } else if lower.ends_with(".webp") {
        "image/webp"
    } else {
        "image/jpeg"
    }
}

fn id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Loads claims from a JSON array. Image `path`s resolve relative to the
/// file's directory; `data` holds standard base64.
pub fn load_claims(path: &Path) -> Result<Vec<Claim>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let raw: Vec<RawClaim> = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    raw.into_iter().map(|r| claim_from_raw(r, base)).collect()
}

fn claim_from_raw(raw: RawClaim, base: &Path) -> Result<Claim, DatasetError> {
    let claim_id = id_string(&raw.claim_id);
    let invalid = |message: String| DatasetError::Invalid {
        claim_id: claim_id.clone(),
        message,
    };
    let date = parse_claim_date(&raw.claim_date)
        .ok_or_else(|| invalid(format!("unparseable date {:?}", raw.claim_date)))?;
    let mut images = Vec::with_capacity(raw.images.len());
    for img in raw.images {
        let bytes = if let Some(data) = &img.data {
            BASE64
                .decode(data.trim())
                .map_err(|e| invalid(format!("image data is not base64: {e}")))?
        } else if let Some(p) = &img.path {
            let full = base.join(p);
            fs::read(&full).map_err(|source| DatasetError::Io { path: full, source })?
        } else {
            Vec::new()
        };
        if bytes.is_empty() && img.url.is_none() {
            return Err(invalid("image has neither bytes nor url".into()));
        }
        let media_type = img.media_type.unwrap_or_else(|| {
            let hint = img.path.as_deref().or(img.url.as_deref()).unwrap_or("");
            media_type_for(hint).to_string()
        });
        images.push(ClaimImage {
            bytes,
            media_type,
            url: img.url,
        });
    }
    Ok(Claim {
        claim_id,
        text: raw.text,
        images,
        author: raw.author.unwrap_or_default(),
        date,
        medium: raw.medium.unwrap_or_default(),
    })
}

/// Gold labels keyed by claim id, for scoring.
#[derive(Debug, Deserialize)]
struct RawGold {
    #[serde(alias = "id")]
    claim_id: serde_json::Value,
    #[serde(alias = "gold_label", alias = "verdict")]
    label: String,
}

pub fn load_gold_labels(path: &Path) -> Result<Vec<(String, Verdict)>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let raw: Vec<RawGold> = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    raw.into_iter()
        .map(|g| {
            let id = id_string(&g.claim_id);
            let label = g.label.parse().map_err(|e: UnknownVerdict| DatasetError::Invalid {
                claim_id: id.clone(),
                message: e.to_string(),
            })?;
            Ok((id, label))
        })
        .collect()
}
