//! Run configuration, loaded from TOML.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rust_decimal::Decimal;
use serde::{Deserialize, Deserializer, Serialize};

use crate::fewshot::Bm25Params;
use crate::generation::EvidenceFormatMode;
use crate::image_retrieval::ImageRetrievalOptions;
use crate::knowledge_store::StoreOptions;
use crate::prompt::DEFAULT_MAX_SOURCE_CHARS;
use crate::provider::RetryPolicy;
use crate::text_retrieval::RetrievalParams;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("environment variable {0} is not set")]
    MissingSecret(String),
}

/// Accepts `"0.003"`, `0.003` or `3` and stores the exact decimal.
fn decimal<'de, D: Deserializer<'de>>(d: D) -> Result<Decimal, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Str(String),
        Int(i64),
        Float(f64),
    }
    let parsed = match Raw::deserialize(d)? {
        Raw::Str(s) => Decimal::from_str(s.trim()).or_else(|_| Decimal::from_scientific(s.trim())),
        Raw::Int(i) => Ok(Decimal::from(i)),
        Raw::Float(f) => Decimal::from_str(&f.to_string()).or_else(|_| Decimal::from_scientific(&format!("{f:e}"))),
    };
    parsed.map_err(serde::de::Error::custom)
}

fn default_discount() -> Decimal {
    Decimal::ONE
}

/// Unit prices in USD. Token prices have no defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceTable {
    #[serde(deserialize_with = "decimal", default = "PriceTable::default_ris")]
    pub ris_per_search_usd: Decimal,
    #[serde(deserialize_with = "decimal", default = "PriceTable::default_scrape")]
    pub scrape_per_page_usd: Decimal,
    #[serde(deserialize_with = "decimal")]
    pub llm_input_per_token_usd: Decimal,
    #[serde(deserialize_with = "decimal")]
    pub llm_output_per_token_usd: Decimal,
    /// Multiplier applied to LLM cost for the discounted total (batch
    /// pricing, cached input). 1 means no discount.
    #[serde(deserialize_with = "decimal", default = "default_discount")]
    pub llm_discount_factor: Decimal,
}

impl PriceTable {
    pub fn default_ris() -> Decimal {
        Decimal::new(3, 3)
    }

    pub fn default_scrape() -> Decimal {
        Decimal::new(6, 3)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let all = [
            ("ris_per_search_usd", self.ris_per_search_usd),
            ("scrape_per_page_usd", self.scrape_per_page_usd),
            ("llm_input_per_token_usd", self.llm_input_per_token_usd),
            ("llm_output_per_token_usd", self.llm_output_per_token_usd),
            ("llm_discount_factor", self.llm_discount_factor),
        ];
        match all.iter().find(|(_, v)| v.is_sign_negative() && !v.is_zero()) {
            Some((name, v)) => Err(ConfigError::Invalid(format!("prices.{name} is negative ({v})"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub claims: PathBuf,
    #[serde(default)]
    pub train_set: Option<PathBuf>,
    #[serde(default)]
    pub knowledge_dir: Option<PathBuf>,
    /// Where `build-store` writes vector stores and `run` looks for them.
    #[serde(default)]
    pub store_dir: Option<PathBuf>,
    /// Custom system prompt template; defaults to the bundled one for the
    /// evidence mode.
    #[serde(default)]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewshotConfig {
    pub k1: f64,
    pub b: f64,
    pub n_claims: usize,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        let p = Bm25Params::default();
        Self { k1: p.k1, b: p.b, n_claims: 3 }
    }
}

impl FewshotConfig {
    pub fn params(&self) -> Bm25Params {
        Bm25Params { k1: self.k1, b: self.b }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Parallelism {
    /// Claims processed at once.
    pub claims: usize,
    /// Concurrent page scrapes across the whole run.
    pub scrapes: usize,
}

impl Default for Parallelism {
    fn default() -> Self {
        Self { claims: 4, scrapes: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// Deterministic feature hashing; needs no service.
    #[default]
    Hashing,
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    pub dim: usize,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: Option<String>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Hashing,
            dim: 256,
            endpoint: "http://localhost:8080/v1/embeddings".into(),
            model: "text-embedding-3-small".into(),
            api_key_env: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RisConfig {
    pub endpoint: String,
    pub api_key_env: String,
}

impl Default for RisConfig {
    fn default() -> Self {
        Self { endpoint: crate::image_retrieval::ris::SerperLens::DEFAULT_ENDPOINT.into(), api_key_env: "SERPER_API_KEY".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScraperKind {
    #[default]
    Firecrawl,
    Builtin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScraperConfig {
    pub kind: ScraperKind,
    pub endpoint: String,
    pub api_key_env: String,
}

impl Default for ScraperConfig {
    fn default() -> Self {
        Self {
            kind: ScraperKind::Firecrawl,
            endpoint: crate::image_retrieval::scrape::FirecrawlScraper::DEFAULT_ENDPOINT.into(),
            api_key_env: "FIRECRAWL_API_KEY".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: crate::generation::DEFAULT_ENDPOINT.into(),
            model: crate::generation::DEFAULT_MODEL.into(),
            api_key_env: "OPENAI_API_KEY".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProvidersConfig {
    pub embedding: EmbeddingConfig,
    pub ris: RisConfig,
    pub scraper: ScraperConfig,
    pub llm: LlmConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub mode: EvidenceFormatMode,
    #[serde(default)]
    pub retrieval: RetrievalParams,
    #[serde(default)]
    pub fewshot: FewshotConfig,
    #[serde(default)]
    pub image: ImageRetrievalOptions,
    #[serde(default)]
    pub store: StoreOptions,
    #[serde(default = "default_max_source_chars")]
    pub max_source_chars: usize,
    pub prices: PriceTable,
    #[serde(default)]
    pub parallelism: Parallelism,
    #[serde(default)]
    pub llm_retry: RetryPolicy,
    #[serde(default)]
    pub providers: ProvidersConfig,
}

fn default_max_source_chars() -> usize {
    DEFAULT_MAX_SOURCE_CHARS
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let p = &mut cfg.paths;
        resolve(base, &mut p.claims);
        for path in [&mut p.train_set, &mut p.knowledge_dir, &mut p.store_dir, &mut p.template].into_iter().flatten() {
            resolve(base, path);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.prices.validate()?;
        self.retrieval.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.parallelism.claims == 0 || self.parallelism.scrapes == 0 {
            return Err(ConfigError::Invalid("parallelism limits must be at least 1".into()));
        }
        if self.image.scrape_permits == 0 {
            return Err(ConfigError::Invalid("image.scrape_permits must be at least 1".into()));
        }
        if self.image.cap == 0 || self.image.cap > crate::prompt::MAX_SOURCES_PER_GROUP {
            return Err(ConfigError::Invalid(format!(
                "image.cap must be in 1..={}",
                crate::prompt::MAX_SOURCES_PER_GROUP
            )));
        }
        if self.retrieval.l > crate::prompt::MAX_SOURCES_PER_GROUP {
            return Err(ConfigError::Invalid(format!(
                "retrieval.l must be at most {}",
                crate::prompt::MAX_SOURCES_PER_GROUP
            )));
        }
        if self.store.max_len == 0 {
            return Err(ConfigError::Invalid("store.max_len must be positive".into()));
        }
        if self.providers.embedding.dim == 0 {
            return Err(ConfigError::Invalid("providers.embedding.dim must be positive".into()));
        }
        if !(self.fewshot.k1 >= 0.0 && (0.0..=1.0).contains(&self.fewshot.b)) {
            return Err(ConfigError::Invalid("fewshot needs k1 >= 0 and b in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn secret(env_name: &str) -> Result<String, ConfigError> {
    match std::env::var(env_name) {
        Ok(v) if !v.trim().is_empty() => Ok(v),
        _ => Err(ConfigError::MissingSecret(env_name.to_string())),
    }
}
