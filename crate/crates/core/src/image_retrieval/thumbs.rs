//! Thumbnail download with a shared per-URL cache.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;

use crate::provider::ProviderError;

pub trait ThumbnailFetcher: Send + Sync {
    fn fetch(&self, url: &str) -> Result<Vec<u8>, ProviderError>;
}

/// Decodes `data:<type>;base64,<payload>` URLs, which some search APIs
/// return inline.
pub fn decode_data_url(url: &str) -> Option<Vec<u8>> {
    let rest = url.strip_prefix("data:")?;
    let (meta, payload) = rest.split_once(',')?;
    if !meta.ends_with(";base64") {
        return None;
    }
    BASE64.decode(payload.trim()).ok()
}

pub struct HttpThumbnailFetcher {
    client: reqwest::blocking::Client,
}

impl HttpThumbnailFetcher {
    pub fn new() -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| ProviderError::fatal("thumbnail", e.to_string()))?;
        Ok(Self { client })
    }
}

impl ThumbnailFetcher for HttpThumbnailFetcher {
    fn fetch(&self, url: &str) -> Result<Vec<u8>, ProviderError> {
        if let Some(bytes) = decode_data_url(url) {
            return Ok(bytes);
        }
        let resp = self.client.get(url).send().map_err(|e| ProviderError::from_reqwest("thumbnail", &e))?;
        let status = resp.status();
        if !status.is_success() {
            let mut err = ProviderError::from_status("thumbnail", status.as_u16(), "");
            if err.kind == crate::provider::FailureKind::Auth {
                err.kind = crate::provider::FailureKind::Fatal;
            }
            return Err(err);
        }
        let bytes = resp.bytes().map_err(|e| ProviderError::from_reqwest("thumbnail", &e))?;
        if bytes.is_empty() {
            return Err(ProviderError::fatal("thumbnail", format!("empty body from {url}")));
        }
        Ok(bytes.to_vec())
    }
}

type CacheEntry = Result<Arc<Vec<u8>>, ProviderError>;

/// Memoizes fetches, failures included, so each URL is requested at most
/// once per run.
pub struct ThumbnailCache {
    fetcher: Box<dyn ThumbnailFetcher>,
    entries: Mutex<HashMap<String, CacheEntry>>,
}

impl ThumbnailCache {
    pub fn new(fetcher: Box<dyn ThumbnailFetcher>) -> Self {
        Self { fetcher, entries: Mutex::new(HashMap::new()) }
    }

    pub fn get(&self, url: &str) -> CacheEntry {
        if let Some(hit) = self.entries.lock().unwrap().get(url) {
            return hit.clone();
        }
        let fetched = if url.trim().is_empty() {
            Err(ProviderError::fatal("thumbnail", "source has no thumbnail URL"))
        } else {
            self.fetcher.fetch(url).map(Arc::new)
        };
        self.entries.lock().unwrap().entry(url.to_string()).or_insert(fetched).clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting(Arc<AtomicUsize>);
    impl ThumbnailFetcher for Counting {
        fn fetch(&self, url: &str) -> Result<Vec<u8>, ProviderError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            if url.contains("bad") {
                Err(ProviderError::fatal("thumbnail", "404"))
            } else {
                Ok(url.as_bytes().to_vec())
            }
        }
    }

    #[test]
    fn caches_hits_and_failures() {
        let calls = Arc::new(AtomicUsize::new(0));
        let cache = ThumbnailCache::new(Box::new(Counting(calls.clone())));
        assert_eq!(*cache.get("https://t/a").unwrap(), b"https://t/a".to_vec());
        assert!(cache.get("https://t/a").is_ok());
        assert!(cache.get("https://t/bad").is_err());
        assert!(cache.get("https://t/bad").is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        assert!(cache.get("").is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn data_urls() {
        assert_eq!(decode_data_url("data:image/jpeg;base64,AAEC"), Some(vec![0, 1, 2]));
        assert_eq!(decode_data_url("data:text/plain,hello"), None);
        assert_eq!(decode_data_url("https://x/y.jpg"), None);
    }
}
