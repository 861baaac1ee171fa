//! Publication date estimation for scraped pages.
//!
//! The heuristic dater checks, in order: JSON-LD `datePublished` /
//! `dateCreated`, publication meta tags, `<time>` elements, the URL path,
//! and finally "Published ..." phrases in the visible text. The first
//! plausible date wins.

use std::sync::LazyLock;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use regex::Regex;
use scraper::{Html, Selector};

pub trait DateProvider: Send + Sync {
    /// Best-effort publication date of `url`, given its raw page (HTML when
    /// available, else markdown).
    fn estimate(&self, url: &str, raw_page: &str) -> Option<NaiveDate>;
}

/// Pass-through wrapper: whatever the provider decides is returned as is.
pub fn estimate_publication_date(url: &str, raw_page: &str, dater: &dyn DateProvider) -> Option<NaiveDate> {
    dater.estimate(url, raw_page)
}

#[derive(Debug, Clone)]
pub struct HeuristicDater {
    pub min_year: i32,
    pub max_year: i32,
}

impl Default for HeuristicDater {
    fn default() -> Self {
        Self { min_year: 1995, max_year: 2100 }
    }
}

const META_NAMES: &[&str] = &[
    "article:published_time",
    "og:published_time",
    "og:article:published_time",
    "article.published",
    "pubdate",
    "publishdate",
    "publish-date",
    "published-date",
    "publication_date",
    "date_published",
    "citation_publication_date",
    "citation_date",
    "dc.date",
    "dc.date.issued",
    "dc.date.created",
    "dcterms.created",
    "dcterms.date",
    "dcterms.issued",
    "sailthru.date",
    "parsely-pub-date",
    "article.created",
    "article_date_original",
    "cxenseparse:recs:publishtime",
    "date",
];

static URL_DATE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?:^|[/_-])((?:19|20)\d{2})[/_-](0?[1-9]|1[0-2])[/_-](0?[1-9]|[12]\d|3[01])(?:[/_.-]|$)").unwrap()
});

static TEXT_DATE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(?:published|posted|updated)(?:\s+on)?\s*:?\s*([A-Za-z]{3,9}\.?\s+\d{1,2},?\s+\d{4}|\d{4}-\d{2}-\d{2}|\d{1,2}\s+[A-Za-z]{3,9}\.?\s+\d{4})").unwrap()
});

const FORMATS: &[&str] = &[
    "%Y-%m-%d",
    "%Y/%m/%d",
    "%Y.%m.%d",
    "%B %d, %Y",
    "%B %d %Y",
    "%b %d, %Y",
    "%b %d %Y",
    "%b. %d, %Y",
    "%d %B %Y",
    "%d %b %Y",
    "%A, %B %d, %Y",
];

/// Parses the date formats commonly found in publication metadata.
pub fn parse_date_str(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.date_naive());
    }
    if let Ok(dt) = DateTime::parse_from_rfc2822(s) {
        return Some(dt.date_naive());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.date());
        }
    }
    for fmt in FORMATS {
        if let Ok(d) = NaiveDate::parse_from_str(s, fmt) {
            return Some(d);
        }
    }
    // leading ISO date followed by anything (timezone names, offsets without colon)
    if s.len() > 10 && s.is_char_boundary(10) {
        if let Ok(d) = NaiveDate::parse_from_str(&s[..10], "%Y-%m-%d") {
            return Some(d);
        }
    }
    None
}

impl HeuristicDater {
    fn plausible(&self, d: NaiveDate) -> Option<NaiveDate> {
        use chrono::Datelike;
        (self.min_year..=self.max_year).contains(&d.year()).then_some(d)
    }

    fn date_from_json_ld(&self, doc: &Html) -> Option<NaiveDate> {
        let sel = Selector::parse(r#"script[type="application/ld+json"]"#).unwrap();
        for script in doc.select(&sel) {
            let text: String = script.text().collect();
            let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) else { continue };
            if let Some(d) = self.find_ld_date(&value) {
                return Some(d);
            }
        }
        None
    }

    fn find_ld_date(&self, v: &serde_json::Value) -> Option<NaiveDate> {
        match v {
            serde_json::Value::Object(map) => {
                for key in ["datePublished", "dateCreated", "uploadDate"] {
                    if let Some(d) = map.get(key).and_then(|x| x.as_str()).and_then(parse_date_str) {
                        if let Some(d) = self.plausible(d) {
                            return Some(d);
                        }
                    }
                }
                map.get("@graph").and_then(|g| self.find_ld_date(g))
            }
            serde_json::Value::Array(items) => items.iter().find_map(|i| self.find_ld_date(i)),
            _ => None,
        }
    }

    fn date_from_meta(&self, doc: &Html) -> Option<NaiveDate> {
        let sel = Selector::parse("meta[content]").unwrap();
        let mut best: Option<(usize, NaiveDate)> = None;
        for meta in doc.select(&sel) {
            let el = meta.value();
            let key = el
                .attr("property")
                .or_else(|| el.attr("name"))
                .or_else(|| el.attr("itemprop"))
                .or_else(|| el.attr("http-equiv"))
                .map(str::to_ascii_lowercase);
            let Some(key) = key else { continue };
            let priority = if key == "datepublished" || key == "datecreated" {
                Some(0)
            } else {
                META_NAMES.iter().position(|n| *n == key)
            };
            let Some(priority) = priority else { continue };
            let Some(date) = el.attr("content").and_then(parse_date_str).and_then(|d| self.plausible(d)) else {
                continue;
            };
            if best.is_none_or(|(p, _)| priority < p) {
                best = Some((priority, date));
            }
        }
        best.map(|(_, d)| d)
    }

    fn date_from_time_elements(&self, doc: &Html) -> Option<NaiveDate> {
        let sel = Selector::parse("time[datetime]").unwrap();
        let times: Vec<_> = doc.select(&sel).collect();
        let is_pub = |t: &scraper::ElementRef| {
            let el = t.value();
            el.attr("pubdate").is_some()
                || el.attr("itemprop").is_some_and(|p| p.eq_ignore_ascii_case("datePublished"))
                || el.attr("class").is_some_and(|c| c.to_ascii_lowercase().contains("publish"))
        };
        times
            .iter()
            .filter(|t| is_pub(t))
            .chain(times.iter())
            .find_map(|t| t.value().attr("datetime").and_then(parse_date_str).and_then(|d| self.plausible(d)))
    }

    fn date_from_url(&self, url: &str) -> Option<NaiveDate> {
        let path = url::Url::parse(url).map(|u| u.path().to_string()).unwrap_or_else(|_| url.to_string());
        let caps = URL_DATE.captures(&path)?;
        let y = caps[1].parse().ok()?;
        let m = caps[2].parse().ok()?;
        let d = caps[3].parse().ok()?;
        NaiveDate::from_ymd_opt(y, m, d).and_then(|d| self.plausible(d))
    }

    fn date_from_text(&self, text: &str) -> Option<NaiveDate> {
        TEXT_DATE
            .captures_iter(text)
            .find_map(|c| parse_date_str(&c[1]).and_then(|d| self.plausible(d)))
    }
}

impl DateProvider for HeuristicDater {
    fn estimate(&self, url: &str, raw_page: &str) -> Option<NaiveDate> {
        let looks_html = raw_page.contains('<') && raw_page.contains('>');
        if looks_html {
            let doc = Html::parse_document(raw_page);
            if let Some(d) = self
                .date_from_json_ld(&doc)
                .or_else(|| self.date_from_meta(&doc))
                .or_else(|| self.date_from_time_elements(&doc))
            {
                return Some(d);
            }
        }
        self.date_from_url(url).or_else(|| self.date_from_text(raw_page))
    }
}
