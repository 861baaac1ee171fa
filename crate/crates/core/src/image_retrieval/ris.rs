//! Reverse image search providers.

use std::time::Duration;

use serde::Deserialize;

use super::RisResult;
use crate::claim::ClaimImage;
use crate::provider::ProviderError;

pub const MAX_RIS_RESULTS: usize = 30;

pub trait RisProvider: Send + Sync {
    /// Ranked pages containing images similar to `image`. An empty list is
    /// a legitimate answer.
    fn search(&self, image: &ClaimImage) -> Result<Vec<RisResult>, ProviderError>;
}

/// Lens-style search through the Serper API. Needs the image's public URL.
pub struct SerperLens {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: String,
}

#[derive(Deserialize)]
struct LensResponse {
    #[serde(default)]
    organic: Vec<LensItem>,
    #[serde(default, rename = "visualMatches", alias = "visual_matches")]
    visual_matches: Vec<LensItem>,
}

#[derive(Deserialize)]
struct LensItem {
    #[serde(default)]
    link: String,
    #[serde(default)]
    title: String,
    #[serde(default, rename = "thumbnailUrl", alias = "thumbnail")]
    thumbnail_url: Option<String>,
    #[serde(default, rename = "imageUrl")]
    image_url: Option<String>,
}

impl SerperLens {
    pub const DEFAULT_ENDPOINT: &'static str = "https://google.serper.dev/lens";

    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| ProviderError::fatal("ris", e.to_string()))?;
        Ok(Self { client, endpoint: endpoint.into(), api_key: api_key.into() })
    }
}

/// Parses a Lens-style JSON body into ranked results.
pub fn parse_lens_response(body: &str) -> Result<Vec<RisResult>, ProviderError> {
    let parsed: LensResponse =
        serde_json::from_str(body).map_err(|e| ProviderError::fatal("ris", format!("bad response: {e}")))?;
    let items = if parsed.organic.is_empty() { parsed.visual_matches } else { parsed.organic };
    Ok(items
        .into_iter()
        .filter(|i| !i.link.trim().is_empty())
        .take(MAX_RIS_RESULTS)
        .enumerate()
        .map(|(pos, i)| RisResult {
            url: i.link,
            thumbnail_url: i.thumbnail_url.or(i.image_url).unwrap_or_default(),
            title: i.title,
            rank: pos + 1,
        })
        .collect())
}

impl RisProvider for SerperLens {
    fn search(&self, image: &ClaimImage) -> Result<Vec<RisResult>, ProviderError> {
        let Some(url) = &image.url else {
            return Err(ProviderError::fatal("ris", "claim image has no public URL to search by"));
        };
        let resp = self
            .client
            .post(&self.endpoint)
            .header("X-API-KEY", &self.api_key)
            .json(&serde_json::json!({ "url": url }))
            .send()
            .map_err(|e| ProviderError::from_reqwest("ris", &e))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| ProviderError::from_reqwest("ris", &e))?;
        if !status.is_success() {
            return Err(ProviderError::from_status("ris", status.as_u16(), &body));
        }
        parse_lens_response(&body)
    }
}
