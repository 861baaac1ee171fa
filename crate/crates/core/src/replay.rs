//! Fixture-backed providers for offline runs, and a recorder that captures
//! live provider traffic into the same fixture format.
//!
//! A fixture directory holds up to four JSON files, each an object keyed
//! by request:
//!
//! - `ris.json`: image URL (or SHA-256 hex of the image bytes) to a list of
//!   search results.
//! - `scrape.json`: page URL to `{"markdown", "raw_html"}`.
//! - `llm.json`: claim text to `{"text", "usage"}`, or to a list of such
//!   responses returned on successive calls.
//! - `thumbnails.json`: thumbnail URL to base64 bytes.
//!
//! Any entry may instead be `{"error": {"provider", "kind", "message"}}`.
//! A request with no entry fails with a fatal error.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::claim::ClaimImage;
use crate::generation::{LlmError, LlmProvider, LlmResponse};
use crate::image_retrieval::{RisProvider, RisResult, ScrapeProvider, ScrapedPage, ThumbnailFetcher};
use crate::prompt::{PromptBundle, UserPart};
use crate::provider::ProviderError;

pub const RIS_FILE: &str = "ris.json";
pub const SCRAPE_FILE: &str = "scrape.json";
pub const LLM_FILE: &str = "llm.json";
pub const THUMBNAILS_FILE: &str = "thumbnails.json";

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
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

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Recorded<T> {
    Error { error: ProviderError },
    Ok(T),
}

impl<T: Clone> Recorded<T> {
    fn get(&self) -> Result<T, ProviderError> {
        match self {
            Recorded::Ok(v) => Ok(v.clone()),
            Recorded::Error { error } => Err(error.clone()),
        }
    }

    fn from_result(r: &Result<T, ProviderError>) -> Self {
        match r {
            Ok(v) => Recorded::Ok(v.clone()),
            Err(e) => Recorded::Error { error: e.clone() },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LlmEntry {
    Sequence(Vec<Recorded<LlmResponse>>),
    Single(Recorded<LlmResponse>),
}

fn read_map<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<BTreeMap<String, T>, ReplayError> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = fs::read_to_string(&path).map_err(|source| ReplayError::Io { path: path.clone(), source })?;
    serde_json::from_str(&text).map_err(|source| ReplayError::Json { path, source })
}

fn missing(provider: &str, key: &str) -> ProviderError {
    ProviderError::fatal(provider, format!("no recorded response for {key:?}"))
}

/// Lookup key for a claim image: its URL when known, else a content hash.
pub fn image_key(image: &ClaimImage) -> String {
    match &image.url {
        Some(url) => url.clone(),
        None => hex::encode(Sha256::digest(&image.bytes)),
    }
}

/// Lookup key for an LLM request: the claim text part of the user message.
pub fn bundle_key(bundle: &PromptBundle) -> String {
    bundle
        .user_parts
        .iter()
        .find_map(|p| match p {
            UserPart::Text { text } => Some(text.clone()),
            UserPart::Image { .. } => None,
        })
        .unwrap_or_default()
}

pub struct ReplayRis {
    entries: BTreeMap<String, Recorded<Vec<RisResult>>>,
}

impl ReplayRis {
    pub fn load(dir: &Path) -> Result<Self, ReplayError> {
        Ok(Self { entries: read_map(dir, RIS_FILE)? })
    }
}

impl RisProvider for ReplayRis {
    fn search(&self, image: &ClaimImage) -> Result<Vec<RisResult>, ProviderError> {
        let key = image_key(image);
        self.entries.get(&key).ok_or_else(|| missing("ris", &key))?.get()
    }
}

pub struct ReplayScraper {
    entries: BTreeMap<String, Recorded<ScrapedPage>>,
}

impl ReplayScraper {
    pub fn load(dir: &Path) -> Result<Self, ReplayError> {
        Ok(Self { entries: read_map(dir, SCRAPE_FILE)? })
    }
}

impl ScrapeProvider for ReplayScraper {
    fn scrape(&self, url: &str) -> Result<ScrapedPage, ProviderError> {
        self.entries.get(url).ok_or_else(|| missing("scrape", url))?.get()
    }
}

pub struct ReplayLlm {
    entries: BTreeMap<String, LlmEntry>,
    calls: Mutex<HashMap<String, usize>>,
}

impl ReplayLlm {
    pub fn load(dir: &Path) -> Result<Self, ReplayError> {
        Ok(Self { entries: read_map(dir, LLM_FILE)?, calls: Mutex::new(HashMap::new()) })
    }

    /// Total completions served so far.
    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().values().sum()
    }
}

impl LlmProvider for ReplayLlm {
    fn complete(&self, bundle: &PromptBundle) -> Result<LlmResponse, LlmError> {
        let key = bundle_key(bundle);
        let entry = self.entries.get(&key).ok_or_else(|| missing("llm", &key))?;
        let n = {
            let mut calls = self.calls.lock().unwrap();
            let n = calls.entry(key).or_insert(0);
            *n += 1;
            *n - 1
        };
        let recorded = match entry {
            LlmEntry::Single(r) => r,
            LlmEntry::Sequence(seq) => seq
                .get(n)
                .or_else(|| seq.last())
                .ok_or_else(|| ProviderError::fatal("llm", "empty response sequence"))?,
        };
        Ok(recorded.get()?)
    }
}

pub struct ReplayThumbnails {
    entries: BTreeMap<String, Recorded<String>>,
}

impl ReplayThumbnails {
    pub fn load(dir: &Path) -> Result<Self, ReplayError> {
        Ok(Self { entries: read_map(dir, THUMBNAILS_FILE)? })
    }
}

impl ThumbnailFetcher for ReplayThumbnails {
    fn fetch(&self, url: &str) -> Result<Vec<u8>, ProviderError> {
        let b64 = self.entries.get(url).ok_or_else(|| missing("thumbnail", url))?.get()?;
        BASE64
            .decode(b64.trim())
            .map_err(|e| ProviderError::fatal("thumbnail", format!("recorded thumbnail for {url} is not base64: {e}")))
    }
}

/// Captured traffic, written out with [`Recorder::save`].
#[derive(Default)]
pub struct Recorder {
    ris: Mutex<BTreeMap<String, Recorded<Vec<RisResult>>>>,
    scrape: Mutex<BTreeMap<String, Recorded<ScrapedPage>>>,
    llm: Mutex<BTreeMap<String, Vec<Recorded<LlmResponse>>>>,
    thumbnails: Mutex<BTreeMap<String, Recorded<String>>>,
}

fn write_map<T: Serialize>(dir: &Path, name: &str, map: &T) -> Result<(), ReplayError> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(map).expect("fixture maps serialize");
    fs::write(&path, text).map_err(|source| ReplayError::Io { path, source })
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn save(&self, dir: &Path) -> Result<(), ReplayError> {
        fs::create_dir_all(dir).map_err(|source| ReplayError::Io { path: dir.to_path_buf(), source })?;
        write_map(dir, RIS_FILE, &*self.ris.lock().unwrap())?;
        write_map(dir, SCRAPE_FILE, &*self.scrape.lock().unwrap())?;
        let llm: BTreeMap<String, LlmEntry> = self
            .llm
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), LlmEntry::Sequence(v.clone())))
            .collect();
        write_map(dir, LLM_FILE, &llm)?;
        write_map(dir, THUMBNAILS_FILE, &*self.thumbnails.lock().unwrap())
    }
}

/// Wraps a live provider and records each call into a [`Recorder`].
pub struct Recording<P: ?Sized> {
    pub inner: Box<P>,
    pub recorder: Arc<Recorder>,
}

impl RisProvider for Recording<dyn RisProvider> {
    fn search(&self, image: &ClaimImage) -> Result<Vec<RisResult>, ProviderError> {
        let r = self.inner.search(image);
        self.recorder.ris.lock().unwrap().insert(image_key(image), Recorded::from_result(&r));
        r
    }
}

impl ScrapeProvider for Recording<dyn ScrapeProvider> {
    fn scrape(&self, url: &str) -> Result<ScrapedPage, ProviderError> {
        let r = self.inner.scrape(url);
        self.recorder.scrape.lock().unwrap().insert(url.to_string(), Recorded::from_result(&r));
        r
    }
}

impl LlmProvider for Recording<dyn LlmProvider> {
    fn complete(&self, bundle: &PromptBundle) -> Result<LlmResponse, LlmError> {
        let r = self.inner.complete(bundle);
        let as_provider = match &r {
            Ok(v) => Ok(v.clone()),
            Err(LlmError::Provider(e)) => Err(e.clone()),
            Err(LlmError::ContextOverflow(m)) => Err(ProviderError::fatal("llm", m.clone())),
        };
        self.recorder
            .llm
            .lock()
            .unwrap()
            .entry(bundle_key(bundle))
            .or_default()
            .push(Recorded::from_result(&as_provider));
        r
    }
}

impl ThumbnailFetcher for Recording<dyn ThumbnailFetcher> {
    fn fetch(&self, url: &str) -> Result<Vec<u8>, ProviderError> {
        let r = self.inner.fetch(url);
        let encoded = r.as_ref().map(|b| BASE64.encode(b)).map_err(Clone::clone);
        self.recorder.thumbnails.lock().unwrap().insert(url.to_string(), Recorded::from_result(&encoded));
        r
    }
}
