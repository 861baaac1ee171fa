//! Page scraping to markdown.
//!
//! An empty `markdown` means the page was protected or had no content;
//! callers drop such results rather than treating them as failures.

use std::time::Duration;

use scraper::{Html, Selector};
use serde::{Deserialize, Serialize};

use crate::provider::ProviderError;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrapedPage {
    pub markdown: String,
    /// Original HTML, when the scraper exposes it (used for dating).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_html: Option<String>,
}

impl ScrapedPage {
    pub fn empty() -> Self {
        Self::default()
    }
}

pub trait ScrapeProvider: Send + Sync {
    fn scrape(&self, url: &str) -> Result<ScrapedPage, ProviderError>;
}

/// Rejects anything that is not an absolute http(s) URL.
pub fn check_url(url: &str) -> Result<url::Url, ProviderError> {
    let parsed = url::Url::parse(url).map_err(|e| ProviderError::fatal("scrape", format!("malformed URL {url:?}: {e}")))?;
    match parsed.scheme() {
        "http" | "https" if parsed.host_str().is_some() => Ok(parsed),
        _ => Err(ProviderError::fatal("scrape", format!("unsupported URL {url:?}"))),
    }
}

/// Hosts whose pages sit behind login walls. Results from them are
/// discarded without fetching.
pub const DEFAULT_PROTECTED_HOSTS: &[&str] = &["facebook.com", "instagram.com", "threads.net", "fb.watch"];

pub fn is_protected_host(url: &url::Url, protected: &[String]) -> bool {
    let Some(host) = url.host_str() else { return false };
    let host = host.to_ascii_lowercase();
    protected
        .iter()
        .any(|p| host == *p || host.ends_with(&format!(".{p}")))
}

const DROPPED_TAGS: &[&str] = &[
    "script", "style", "noscript", "nav", "footer", "header", "aside", "form", "iframe", "svg", "img",
    "picture", "video", "audio", "button", "template",
];

/// Converts a page to markdown. The main content is taken from the first
/// `<article>` or `<main>` element when present, else `<body>`. Images
/// and page chrome are dropped.
pub fn html_to_markdown(html: &str) -> String {
    let doc = Html::parse_document(html);
    let mut fragment = None;
    for sel in ["article", "main", "[role=main]", "body"] {
        let selector = Selector::parse(sel).expect("static selector");
        if let Some(el) = doc.select(&selector).next() {
            if el.text().any(|t| !t.trim().is_empty()) {
                fragment = Some(el.html());
                break;
            }
        }
    }
    let Some(fragment) = fragment else { return String::new() };
    let converter = htmd::HtmlToMarkdown::builder().skip_tags(DROPPED_TAGS.to_vec()).build();
    let md = converter.convert(&fragment).unwrap_or_default();
    let md = md.trim();
    if md.chars().any(char::is_alphanumeric) {
        md.to_string()
    } else {
        String::new()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BuiltinScraperConfig {
    pub protected_hosts: Vec<String>,
    pub user_agent: String,
    pub timeout_secs: u64,
}

impl Default for BuiltinScraperConfig {
    fn default() -> Self {
        Self {
            protected_hosts: DEFAULT_PROTECTED_HOSTS.iter().map(|s| s.to_string()).collect(),
            user_agent: concat!("imgfact/", env!("CARGO_PKG_VERSION")).to_string(),
            timeout_secs: 30,
        }
    }
}

/// Plain HTTP fetch plus local HTML-to-markdown conversion.
pub struct BuiltinScraper {
    client: reqwest::blocking::Client,
    config: BuiltinScraperConfig,
}

impl BuiltinScraper {
    pub fn new(config: BuiltinScraperConfig) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .user_agent(config.user_agent.clone())
            .build()
            .map_err(|e| ProviderError::fatal("scrape", e.to_string()))?;
        Ok(Self { client, config })
    }

    /// Interprets a fetched response. Login walls and refusals become empty
    /// pages; throttling and server errors are retryable.
    pub fn interpret(&self, url: &url::Url, status: u16, body: &str) -> Result<ScrapedPage, ProviderError> {
        if is_protected_host(url, &self.config.protected_hosts) {
            return Ok(ScrapedPage::empty());
        }
        match status {
            200..=299 => Ok(ScrapedPage { markdown: html_to_markdown(body), raw_html: Some(body.to_string()) }),
            401 | 403 | 451 | 999 => Ok(ScrapedPage::empty()),
            _ => {
                // the target site's status, so never an auth failure of ours
                let mut err = ProviderError::from_status("scrape", status, body);
                if err.kind == crate::provider::FailureKind::Auth {
                    err.kind = crate::provider::FailureKind::Fatal;
                }
                Err(err)
            }
        }
    }
}

impl ScrapeProvider for BuiltinScraper {
    fn scrape(&self, url: &str) -> Result<ScrapedPage, ProviderError> {
        let parsed = check_url(url)?;
        if is_protected_host(&parsed, &self.config.protected_hosts) {
            return Ok(ScrapedPage::empty());
        }
        let resp = self
            .client
            .get(parsed.clone())
            .send()
            .map_err(|e| ProviderError::from_reqwest("scrape", &e))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| ProviderError::from_reqwest("scrape", &e))?;
        self.interpret(&parsed, status, &body)
    }
}

/// Client for a Firecrawl-style `/v1/scrape` API.
pub struct FirecrawlScraper {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: String,
}

#[derive(Deserialize)]
struct FirecrawlResponse {
    #[serde(default)]
    success: bool,
    #[serde(default)]
    data: Option<FirecrawlData>,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Deserialize)]
struct FirecrawlData {
    #[serde(default)]
    markdown: Option<String>,
    #[serde(default, rename = "rawHtml")]
    raw_html: Option<String>,
    #[serde(default)]
    html: Option<String>,
}

impl FirecrawlScraper {
    pub const DEFAULT_ENDPOINT: &'static str = "https://api.firecrawl.dev/v1/scrape";

    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(90))
            .build()
            .map_err(|e| ProviderError::fatal("scrape", e.to_string()))?;
        Ok(Self { client, endpoint: endpoint.into(), api_key: api_key.into() })
    }
}

/// Maps a Firecrawl status and body to a page. 403 means the site is
/// refused by the service; 402 means credits ran out.
pub fn parse_firecrawl_response(status: u16, body: &str) -> Result<ScrapedPage, ProviderError> {
    match status {
        403 => return Ok(ScrapedPage::empty()),
        401 | 402 => return Err(ProviderError::auth("scrape", format!("HTTP {status}: {body}"))),
        200..=299 => {}
        _ => return Err(ProviderError::from_status("scrape", status, body)),
    }
    let parsed: FirecrawlResponse =
        serde_json::from_str(body).map_err(|e| ProviderError::fatal("scrape", format!("bad response: {e}")))?;
    if !parsed.success {
        return Err(ProviderError::fatal("scrape", parsed.error.unwrap_or_else(|| "scrape failed".into())));
    }
    let data = parsed.data.unwrap_or(FirecrawlData { markdown: None, raw_html: None, html: None });
    let markdown = data.markdown.unwrap_or_default();
    Ok(ScrapedPage {
        markdown: if markdown.trim().is_empty() { String::new() } else { markdown },
        raw_html: data.raw_html.or(data.html),
    })
}

impl ScrapeProvider for FirecrawlScraper {
    fn scrape(&self, url: &str) -> Result<ScrapedPage, ProviderError> {
        check_url(url)?;
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&serde_json::json!({
                "url": url,
                "formats": ["markdown", "rawHtml"],
                "onlyMainContent": true,
            }))
            .send()
            .map_err(|e| ProviderError::from_reqwest("scrape", &e))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| ProviderError::from_reqwest("scrape", &e))?;
        parse_firecrawl_response(status, &body)
    }
}
