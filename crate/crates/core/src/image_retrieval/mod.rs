//! Image-context evidence: reverse image search per claim image, scraping
//! of the result pages, date filtering, and capping.
//!
//! Result pages are scraped lazily in rank order and scraping stops as
//! soon as `cap` usable sources are collected, so the output always equals
//! [`filter_and_cap`] applied to the full result list.

pub mod date;
pub mod ris;
pub mod scrape;
pub mod thumbs;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::claim::{Claim, ClaimImage};
use crate::provider::{Permits, ProviderError, RetryPolicy};

pub use date::{estimate_publication_date, DateProvider, HeuristicDater};
pub use ris::{RisProvider, MAX_RIS_RESULTS};
pub use scrape::{ScrapeProvider, ScrapedPage};
pub use thumbs::{ThumbnailCache, ThumbnailFetcher};

pub const DEFAULT_CAP: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RisResult {
    pub url: String,
    #[serde(default)]
    pub thumbnail_url: String,
    #[serde(default)]
    pub title: String,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSource {
    pub ris: RisResult,
    pub markdown: String,
    pub page_date: Option<NaiveDate>,
    /// 1-based index of the claim image this source contextualizes.
    pub image_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSourceSet {
    pub image_index: usize,
    pub sources: Vec<ImageSource>,
}

/// A RIS result after scraping and dating.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScrapedResult {
    pub ris: RisResult,
    pub markdown: String,
    pub page_date: Option<NaiveDate>,
}

fn usable(r: &ScrapedResult, claim_date: NaiveDate) -> bool {
    !r.markdown.trim().is_empty() && r.page_date.is_none_or(|d| d <= claim_date)
}

/// Drops empty scrapes and pages dated strictly after the claim, keeps
/// undated pages, and truncates to `cap` in the given (rank) order.
pub fn filter_and_cap(
    image_index: usize,
    results: Vec<ScrapedResult>,
    claim_date: NaiveDate,
    cap: usize,
) -> ImageSourceSet {
    let sources = results
        .into_iter()
        .filter(|r| usable(r, claim_date))
        .take(cap)
        .map(|r| ImageSource { ris: r.ris, markdown: r.markdown, page_date: r.page_date, image_index })
        .collect();
    ImageSourceSet { image_index, sources }
}

/// Runs the search and normalizes the answer: at most 30 results with a
/// non-empty URL, in rank order.
pub fn reverse_image_search(
    image: &ClaimImage,
    provider: &dyn RisProvider,
    retry: &RetryPolicy,
) -> Result<Vec<RisResult>, ProviderError> {
    if image.bytes.is_empty() && image.url.as_deref().is_none_or(|u| u.trim().is_empty()) {
        return Err(ProviderError::fatal("ris", "empty image"));
    }
    let mut results = retry.run(|| provider.search(image))?;
    results.retain(|r| !r.url.trim().is_empty());
    results.sort_by_key(|r| r.rank);
    results.dedup_by_key(|r| r.rank);
    results.truncate(MAX_RIS_RESULTS);
    Ok(results)
}

pub fn scrape_page(url: &str, scraper: &dyn ScrapeProvider) -> Result<ScrapedPage, ProviderError> {
    scrape::check_url(url)?;
    scraper.scrape(url)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageRetrievalOptions {
    pub cap: usize,
    pub scrape_permits: usize,
    pub retry: RetryPolicy,
}

impl Default for ImageRetrievalOptions {
    fn default() -> Self {
        Self { cap: DEFAULT_CAP, scrape_permits: 4, retry: RetryPolicy::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_index: usize,
    pub error: ProviderError,
}

/// Everything the image chain produced for one claim.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImageRetrieval {
    pub sets: Vec<ImageSourceSet>,
    pub failures: Vec<ImageFailure>,
    pub warnings: Vec<String>,
    /// Successful RIS calls (billed).
    pub ris_searches: u32,
    /// Successful scrape calls (billed).
    pub scraped_pages: u32,
}

/// Providers plus the scrape permit pool, shared across a run.
pub struct ImageRetriever<'a> {
    pub ris: &'a dyn RisProvider,
    pub scraper: &'a dyn ScrapeProvider,
    pub dater: &'a dyn DateProvider,
    pub permits: &'a Permits,
    pub options: ImageRetrievalOptions,
}

struct ImageOutcome {
    set: Option<ImageSourceSet>,
    failure: Option<ProviderError>,
    warnings: Vec<String>,
    ris_ok: bool,
    scraped: u32,
}

impl ImageRetriever<'_> {
    /// One source set per claim image that could be searched; images whose
    /// search failed are reported in `failures` instead.
    pub fn retrieve(&self, claim: &Claim) -> ImageRetrieval {
        let outcomes: Vec<ImageOutcome> = std::thread::scope(|s| {
            let handles: Vec<_> = claim
                .images
                .iter()
                .enumerate()
                .map(|(i, image)| s.spawn(move || self.one_image(i + 1, image, claim.date)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("image worker panicked")).collect()
        });
        let mut out = ImageRetrieval::default();
        for (i, o) in outcomes.into_iter().enumerate() {
            out.ris_searches += u32::from(o.ris_ok);
            out.scraped_pages += o.scraped;
            out.warnings.extend(o.warnings);
            if let Some(set) = o.set {
                out.sets.push(set);
            }
            if let Some(error) = o.failure {
                out.failures.push(ImageFailure { image_index: i + 1, error });
            }
        }
        out
    }

    fn one_image(&self, image_index: usize, image: &ClaimImage, claim_date: NaiveDate) -> ImageOutcome {
        let opts = &self.options;
        let results = match reverse_image_search(image, self.ris, &opts.retry) {
            Ok(r) => r,
            Err(e) => {
                return ImageOutcome { set: None, failure: Some(e), warnings: vec![], ris_ok: false, scraped: 0 };
            }
        };
        let mut warnings = Vec::new();
        if results.is_empty() {
            warnings.push(format!("image {image_index}: reverse image search returned no results"));
        }

        let mut processed: Vec<ScrapedResult> = Vec::with_capacity(results.len());
        let mut kept = 0;
        let mut scraped = 0;
        let mut failure = None;
        let mut pending = results.into_iter().peekable();
        while kept < opts.cap && pending.peek().is_some() {
            let wave_len = opts.scrape_permits.max(1).min(opts.cap - kept);
            let wave: Vec<RisResult> = pending.by_ref().take(wave_len).collect();
            let pages: Vec<Result<ScrapedPage, ProviderError>> = std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|r| {
                        s.spawn(move || {
                            let _permit = self.permits.acquire();
                            opts.retry.run(|| scrape_page(&r.url, self.scraper))
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("scrape worker panicked")).collect()
            });
            for (ris, page) in wave.into_iter().zip(pages) {
                let (markdown, page_date) = match page {
                    Ok(p) => {
                        scraped += 1;
                        let date = if p.markdown.trim().is_empty() {
                            None
                        } else {
                            let raw = p.raw_html.as_deref().unwrap_or(&p.markdown);
                            estimate_publication_date(&ris.url, raw, self.dater)
                        };
                        (p.markdown, date)
                    }
                    Err(e) => {
                        warnings.push(format!("image {image_index}: scrape of {} failed: {e}", ris.url));
                        if e.kind == crate::provider::FailureKind::Auth && failure.is_none() {
                            failure = Some(e);
                        }
                        (String::new(), None)
                    }
                };
                let r = ScrapedResult { ris, markdown, page_date };
                kept += usize::from(usable(&r, claim_date));
                processed.push(r);
            }
        }
        let set = filter_and_cap(image_index, processed, claim_date, opts.cap);
        let undated = set.sources.iter().filter(|s| s.page_date.is_none()).count();
        if undated > 0 {
            warnings.push(format!("image {image_index}: {undated} kept source(s) have no publication date"));
        }
        if set.sources.is_empty() {
            warnings.push(format!("image {image_index}: no usable image sources"));
        }
        ImageOutcome { set: Some(set), failure, warnings, ris_ok: true, scraped }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn ris(rank: usize) -> RisResult {
        RisResult {
            url: format!("https://site{rank}.example/page"),
            thumbnail_url: format!("https://thumbs.example/{rank}.jpg"),
            title: format!("Result {rank}"),
            rank,
        }
    }

    fn scraped(rank: usize, md: &str, date: Option<NaiveDate>) -> ScrapedResult {
        ScrapedResult { ris: ris(rank), markdown: md.into(), page_date: date }
    }

    #[test]
    fn cap_keeps_first_nine() {
        let claim_date = ymd(2022, 1, 1);
        let results: Vec<_> = (1..=12).map(|r| scraped(r, "text", None)).collect();
        let set = filter_and_cap(1, results, claim_date, 9);
        assert_eq!(set.sources.iter().map(|s| s.ris.rank).collect::<Vec<_>>(), (1..=9).collect::<Vec<_>>());
    }

    #[test]
    fn date_boundaries() {
        let claim_date = ymd(2022, 1, 10);
        let results = vec![
            scraped(1, "a", Some(ymd(2022, 1, 9))),
            scraped(2, "b", Some(ymd(2022, 1, 10))),
            scraped(3, "c", Some(ymd(2022, 1, 11))),
            scraped(4, "d", None),
        ];
        let set = filter_and_cap(2, results, claim_date, 9);
        assert_eq!(set.sources.iter().map(|s| s.ris.rank).collect::<Vec<_>>(), [1, 2, 4]);
        assert!(set.sources.iter().all(|s| s.image_index == 2));
    }

    #[test]
    fn empty_markdown_dropped() {
        let set = filter_and_cap(1, vec![scraped(1, "", None), scraped(2, "  \n", None)], ymd(2022, 1, 1), 9);
        assert!(set.sources.is_empty());
    }

    struct FakeRis(HashMap<String, Result<Vec<RisResult>, ProviderError>>);
    impl RisProvider for FakeRis {
        fn search(&self, image: &ClaimImage) -> Result<Vec<RisResult>, ProviderError> {
            self.0[image.url.as_deref().unwrap()].clone()
        }
    }

    struct FakeScraper {
        calls: AtomicUsize,
        empty_ranks: Vec<usize>,
        seen: Mutex<Vec<String>>,
    }
    impl ScrapeProvider for FakeScraper {
        fn scrape(&self, url: &str) -> Result<ScrapedPage, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.seen.lock().unwrap().push(url.to_string());
            let rank: usize = url.trim_start_matches("https://site").split('.').next().unwrap().parse().unwrap();
            if self.empty_ranks.contains(&rank) {
                Ok(ScrapedPage::empty())
            } else {
                Ok(ScrapedPage { markdown: format!("page {rank}"), raw_html: None })
            }
        }
    }

    struct NoDates;
    impl DateProvider for NoDates {
        fn estimate(&self, _: &str, _: &str) -> Option<NaiveDate> {
            None
        }
    }

    fn claim(urls: &[&str]) -> Claim {
        Claim {
            claim_id: "c".into(),
            text: "t".into(),
            images: urls
                .iter()
                .map(|u| ClaimImage { bytes: vec![1], media_type: "image/jpeg".into(), url: Some(u.to_string()) })
                .collect(),
            author: "a".into(),
            date: ymd(2023, 5, 5),
            medium: "m".into(),
        }
    }

    fn opts() -> ImageRetrievalOptions {
        ImageRetrievalOptions { cap: 9, scrape_permits: 4, retry: RetryPolicy::none() }
    }

    #[test]
    fn scrapes_lazily_until_cap() {
        let mut map = HashMap::new();
        map.insert("img1".to_string(), Ok((1..=30).map(ris).collect()));
        let fake_ris = FakeRis(map);
        let scraper = FakeScraper { calls: AtomicUsize::new(0), empty_ranks: vec![2, 5], seen: Mutex::new(vec![]) };
        let permits = Permits::new(4);
        let r = ImageRetriever { ris: &fake_ris, scraper: &scraper, dater: &NoDates, permits: &permits, options: opts() };
        let out = r.retrieve(&claim(&["img1"]));
        assert_eq!(out.sets.len(), 1);
        let ranks: Vec<usize> = out.sets[0].sources.iter().map(|s| s.ris.rank).collect();
        assert_eq!(ranks, [1, 3, 4, 6, 7, 8, 9, 10, 11]);
        assert_eq!(out.scraped_pages, 11);
        assert_eq!(out.ris_searches, 1);
    }

    #[test]
    fn partial_failure_and_empty_results() {
        let mut map = HashMap::new();
        map.insert("bad".to_string(), Err(ProviderError::retryable("ris", "HTTP 429")));
        map.insert("good".to_string(), Ok(vec![ris(1), ris(2)]));
        map.insert("none".to_string(), Ok(vec![]));
        let fake_ris = FakeRis(map);
        let scraper = FakeScraper { calls: AtomicUsize::new(0), empty_ranks: vec![], seen: Mutex::new(vec![]) };
        let permits = Permits::new(2);
        let r = ImageRetriever { ris: &fake_ris, scraper: &scraper, dater: &NoDates, permits: &permits, options: opts() };
        let out = r.retrieve(&claim(&["bad", "good", "none"]));
        assert_eq!(out.sets.iter().map(|s| s.image_index).collect::<Vec<_>>(), [2, 3]);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].image_index, 1);
        assert!(out.failures[0].error.is_retryable());
        assert!(out.warnings.iter().any(|w| w.contains("no results")));
        assert_eq!(out.ris_searches, 2);
    }

    #[test]
    fn no_images_no_sets() {
        let fake_ris = FakeRis(HashMap::new());
        let scraper = FakeScraper { calls: AtomicUsize::new(0), empty_ranks: vec![], seen: Mutex::new(vec![]) };
        let permits = Permits::new(2);
        let r = ImageRetriever { ris: &fake_ris, scraper: &scraper, dater: &NoDates, permits: &permits, options: opts() };
        assert_eq!(r.retrieve(&claim(&[])), ImageRetrieval::default());
    }

    #[test]
    fn search_normalizes_results() {
        let mut map = HashMap::new();
        let mut res: Vec<RisResult> = (1..=35).rev().map(ris).collect();
        res.push(RisResult { url: " ".into(), thumbnail_url: String::new(), title: String::new(), rank: 40 });
        map.insert("x".to_string(), Ok(res));
        let out = reverse_image_search(&claim(&["x"]).images[0], &FakeRis(map), &RetryPolicy::none()).unwrap();
        assert_eq!(out.len(), 30);
        assert_eq!(out[0].rank, 1);
        let empty = ClaimImage { bytes: vec![], media_type: "image/png".into(), url: None };
        assert!(reverse_image_search(&empty, &FakeRis(HashMap::new()), &RetryPolicy::none()).is_err());
    }

    fn arb_result() -> impl proptest::strategy::Strategy<Value = (bool, Option<i64>)> {
        use proptest::prelude::*;
        (any::<bool>(), proptest::option::of(-30i64..30))
    }

    proptest::proptest! {
        #[test]
        fn filtering_invariants(
            items in proptest::collection::vec(arb_result(), 0..40),
            cap in 1usize..12,
            shift in 0i64..10,
        ) {
            let base = ymd(2020, 6, 15);
            let results: Vec<ScrapedResult> = items.iter().enumerate().map(|(i, (empty, off))| {
                scraped(i + 1, if *empty { "" } else { "x" }, off.map(|o| base + chrono::Duration::days(o)))
            }).collect();
            let early = filter_and_cap(1, results.clone(), base, cap);
            proptest::prop_assert!(early.sources.len() <= cap);
            let ranks: Vec<usize> = early.sources.iter().map(|s| s.ris.rank).collect();
            let mut sorted = ranks.clone();
            sorted.sort();
            proptest::prop_assert_eq!(&ranks, &sorted);
            for s in &early.sources {
                proptest::prop_assert!(s.page_date.is_none_or(|d| d <= base));
            }
            // a later claim date keeps everything kept before (uncapped view)
            let later = filter_and_cap(1, results, base + chrono::Duration::days(shift), usize::MAX);
            let later_ranks: std::collections::HashSet<usize> = later.sources.iter().map(|s| s.ris.rank).collect();
            for r in ranks {
                proptest::prop_assert!(later_ranks.contains(&r));
            }
        }
    }
}
