//! Source numbering, system prompt rendering, and the multimodal user
//! message.
//!
//! Text sources are numbered 1..=9 in retrieval order. Sources for claim
//! image `i` are numbered `10*i + 1 ..= 10*i + 9` in search-rank order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::claim::Claim;
use crate::fewshot::TrainExample;
use crate::image_retrieval::ImageSourceSet;
use crate::text_retrieval::ScoredChunk;

pub const MAX_SOURCES_PER_GROUP: usize = 9;
pub const DEFAULT_MAX_SOURCE_CHARS: usize = 6_000;
pub const TRUNCATION_MARKER: &str = "\n[...truncated]";
pub const TEMPLATE_VERSION: u32 = 1;

const QA_TEMPLATE: &str = include_str!("../assets/system_prompt.v1.txt");
const DECLARATIVE_TEMPLATE: &str = include_str!("../assets/system_prompt_declarative.v1.txt");

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("too many sources: {0}")]
    TooManySources(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("claim image {index} cannot be encoded: {reason}")]
    ImageEncode { index: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceKind {
    Text {
        context_before: String,
        context_after: String,
    },
    Image {
        image_index: usize,
        title: String,
        page_date: Option<NaiveDate>,
        /// Thumbnail URL. Only the URL is ever put in the prompt.
        image_url: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceBlock {
    pub source_id: u32,
    pub url: String,
    pub body: String,
    #[serde(flatten)]
    pub kind: SourceKind,
}

impl SourceBlock {
    pub fn is_image(&self) -> bool {
        matches!(self.kind, SourceKind::Image { .. })
    }

    pub fn image_index(&self) -> Option<usize> {
        match self.kind {
            SourceKind::Image { image_index, .. } => Some(image_index),
            SourceKind::Text { .. } => None,
        }
    }
}

pub fn assign_source_ids(
    text_sources: &[ScoredChunk],
    image_sets: &[ImageSourceSet],
) -> Result<Vec<SourceBlock>, PromptError> {
    if text_sources.len() > MAX_SOURCES_PER_GROUP {
        return Err(PromptError::TooManySources(format!(
            "{} text sources (max {MAX_SOURCES_PER_GROUP})",
            text_sources.len()
        )));
    }
    let mut blocks: Vec<SourceBlock> = text_sources
        .iter()
        .enumerate()
        .map(|(i, s)| SourceBlock {
            source_id: i as u32 + 1,
            url: s.entry.chunk.doc_url.clone(),
            body: s.entry.chunk.text.clone(),
            kind: SourceKind::Text {
                context_before: s.entry.chunk.context_before.clone(),
                context_after: s.entry.chunk.context_after.clone(),
            },
        })
        .collect();

    let mut seen_images = std::collections::BTreeSet::new();
    for set in image_sets {
        if set.image_index == 0 || !seen_images.insert(set.image_index) {
            return Err(PromptError::TooManySources(format!(
                "invalid or repeated image index {}",
                set.image_index
            )));
        }
        if set.sources.len() > MAX_SOURCES_PER_GROUP {
            return Err(PromptError::TooManySources(format!(
                "{} sources for image {} (max {MAX_SOURCES_PER_GROUP})",
                set.sources.len(),
                set.image_index
            )));
        }
        for (j, src) in set.sources.iter().enumerate() {
            blocks.push(SourceBlock {
                source_id: (10 * set.image_index + j + 1) as u32,
                url: src.ris.url.clone(),
                body: src.markdown.clone(),
                kind: SourceKind::Image {
                    image_index: set.image_index,
                    title: src.ris.title.clone(),
                    page_date: src.page_date,
                    image_url: src.ris.thumbnail_url.clone(),
                },
            });
        }
    }
    Ok(blocks)
}

/// A system prompt template with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

const PLACEHOLDERS: &[&str] = &[
    "image_count",
    "author",
    "date",
    "medium",
    "k",
    "text_sources",
    "image_sources",
    "fewshot",
];
const REQUIRED: &[&str] = &["text_sources", "image_sources"];

/// Splits a template into literal text and placeholder names. `{x}` is a
/// placeholder only when `x` is a lowercase identifier; other braces
/// (the JSON example) are literal.
fn tokenize_template(text: &str) -> Vec<(bool, &str)> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let ident_len = after
            .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
            .unwrap_or(after.len());
        if ident_len > 0 && after[ident_len..].starts_with('}') {
            out.push((false, &rest[..open]));
            out.push((true, &after[..ident_len]));
            rest = &after[ident_len + 1..];
        } else {
            out.push((false, &rest[..=open]));
            rest = after;
        }
    }
    out.push((false, rest));
    out
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, PromptError> {
        let text = text.into();
        let names: Vec<&str> = tokenize_template(&text)
            .into_iter()
            .filter(|(is_ph, _)| *is_ph)
            .map(|(_, n)| n)
            .collect();
        if let Some(unknown) = names.iter().find(|n| !PLACEHOLDERS.contains(n)) {
            return Err(PromptError::Template(format!("unknown placeholder {{{unknown}}}")));
        }
        if let Some(missing) = REQUIRED.iter().find(|r| !names.contains(r)) {
            return Err(PromptError::Template(format!("template lacks {{{missing}}}")));
        }
        Ok(Self { text })
    }

    pub fn question_answer() -> Self {
        Self::new(QA_TEMPLATE).expect("bundled template is valid")
    }

    pub fn declarative() -> Self {
        Self::new(DECLARATIVE_TEMPLATE).expect("bundled template is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::Template(format!("{}: {e}", path.display())))?;
        Self::new(text)
    }

    fn fill(&self, values: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.text.len() * 2);
        for (is_ph, piece) in tokenize_template(&self.text) {
            if is_ph {
                let v = values
                    .get(piece)
                    .ok_or_else(|| PromptError::Template(format!("no value for {{{piece}}}")))?;
                out.push_str(v);
            } else {
                out.push_str(piece);
            }
        }
        Ok(out)
    }
}

fn cap_chars(s: &str, max: usize) -> std::borrow::Cow<'_, str> {
    match s.char_indices().nth(max) {
        Some((idx, _)) => format!("{}{TRUNCATION_MARKER}", &s[..idx]).into(),
        None => s.into(),
    }
}

fn render_text_block(out: &mut String, b: &SourceBlock, ctx_before: &str, ctx_after: &str, max: usize) {
    let _ = write!(
        out,
        "## Source ID: {} [{}]\n{}\n{}\n{}\n",
        b.source_id,
        b.url,
        ctx_before,
        cap_chars(&b.body, max),
        ctx_after
    );
}

fn render_image_block(out: &mut String, b: &SourceBlock, max: usize) {
    let SourceKind::Image { image_index, title, page_date, image_url } = &b.kind else {
        return;
    };
    let date = page_date.map_or_else(|| "unknown".to_string(), |d| d.format("%Y-%m-%d").to_string());
    let _ = write!(
        out,
        "## Image Source ID: {} (related to user image {}, Title : {}, date:{}, url: {}, image url: {})\n{}\n",
        b.source_id,
        image_index,
        title,
        date,
        b.url,
        image_url,
        cap_chars(&b.body, max)
    );
}

fn render_fewshot(examples: &[TrainExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        let _ = writeln!(
            out,
            "### Question examples for claim \"{}\" (verdict {})",
            ex.claim_text, ex.gold_label
        );
        for qa in &ex.qa_pairs {
            let _ = writeln!(
                out,
                "\"question\": \"{}\", \"answer\": \"{}\", \"answer_type\": \"{}\"",
                qa.question,
                qa.answer,
                qa.answer_type.as_str()
            );
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PromptOptions {
    pub template: PromptTemplate,
    pub max_source_chars: usize,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self { template: PromptTemplate::question_answer(), max_source_chars: DEFAULT_MAX_SOURCE_CHARS }
    }
}

pub fn render_system_prompt(
    claim: &Claim,
    blocks: &[SourceBlock],
    fewshot: &[TrainExample],
    options: &PromptOptions,
) -> Result<String, PromptError> {
    let mut ids = std::collections::BTreeSet::new();
    if let Some(dup) = blocks.iter().find(|b| !ids.insert(b.source_id)) {
        return Err(PromptError::Template(format!("duplicate source id {}", dup.source_id)));
    }
    let mut text_sources = String::new();
    let mut image_sources = String::new();
    let mut k = 0;
    for b in blocks {
        match &b.kind {
            SourceKind::Text { context_before, context_after } => {
                k += 1;
                render_text_block(&mut text_sources, b, context_before, context_after, options.max_source_chars);
            }
            SourceKind::Image { .. } => render_image_block(&mut image_sources, b, options.max_source_chars),
        }
    }
    let values: BTreeMap<&str, String> = [
        ("image_count", claim.images.len().to_string()),
        ("author", claim.author.clone()),
        ("date", claim.date.format("%Y-%m-%d").to_string()),
        ("medium", claim.medium.clone()),
        ("k", k.to_string()),
        ("text_sources", text_sources),
        ("image_sources", image_sources),
        ("fewshot", render_fewshot(fewshot)),
    ]
    .into_iter()
    .collect();
    options.template.fill(&values)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum UserPart {
    Text { text: String },
    Image { media_type: String, data: String },
}

/// Claim text first, then one base64 part per claim image in claim order.
pub fn build_user_message(claim: &Claim) -> Result<Vec<UserPart>, PromptError> {
    let mut parts = Vec::with_capacity(1 + claim.images.len());
    parts.push(UserPart::Text { text: claim.text.clone() });
    for (i, img) in claim.images.iter().enumerate() {
        if img.bytes.is_empty() {
            return Err(PromptError::ImageEncode { index: i + 1, reason: "no image bytes".into() });
        }
        if !img.media_type.starts_with("image/") {
            return Err(PromptError::ImageEncode {
                index: i + 1,
                reason: format!("media type {:?} is not an image type", img.media_type),
            });
        }
        parts.push(UserPart::Image { media_type: img.media_type.clone(), data: BASE64.encode(&img.bytes) });
    }
    Ok(parts)
}

/// Everything sent to the LLM for one claim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_prompt: String,
    pub user_parts: Vec<UserPart>,
    pub source_table: BTreeMap<u32, SourceBlock>,
}

impl PromptBundle {
    pub fn build(
        claim: &Claim,
        blocks: Vec<SourceBlock>,
        fewshot: &[TrainExample],
        options: &PromptOptions,
    ) -> Result<Self, PromptError> {
        let system_prompt = render_system_prompt(claim, &blocks, fewshot, options)?;
        let user_parts = build_user_message(claim)?;
        let source_table = blocks.into_iter().map(|b| (b.source_id, b)).collect();
        Ok(Self { system_prompt, user_parts, source_table })
    }
}
