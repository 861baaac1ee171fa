//! Per-claim and aggregate run costs in exact decimal USD.

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::config::PriceTable;

/// Billable counters for one claim.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub ris_searches: u32,
    pub scraped_pages: u32,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, o: Self) {
        self.ris_searches += o.ris_searches;
        self.scraped_pages += o.scraped_pages;
        self.input_tokens += o.input_tokens;
        self.output_tokens += o.output_tokens;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    #[serde(with = "rust_decimal::serde::str")]
    pub ris_usd: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub scrape_usd: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub llm_usd: Decimal,
    /// LLM cost after the configured discount factor.
    #[serde(with = "rust_decimal::serde::str")]
    pub llm_discounted_usd: Decimal,
    /// `ris_usd + scrape_usd + llm_usd`.
    #[serde(with = "rust_decimal::serde::str")]
    pub usd_total: Decimal,
    /// `ris_usd + scrape_usd + llm_discounted_usd`.
    #[serde(with = "rust_decimal::serde::str")]
    pub usd_total_discounted: Decimal,
}

impl CostBreakdown {
    fn map(self, f: impl Fn(Decimal) -> Decimal) -> Self {
        Self {
            ris_usd: f(self.ris_usd),
            scrape_usd: f(self.scrape_usd),
            llm_usd: f(self.llm_usd),
            llm_discounted_usd: f(self.llm_discounted_usd),
            usd_total: f(self.usd_total),
            usd_total_discounted: f(self.usd_total_discounted),
        }
    }
}

impl std::ops::AddAssign for CostBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.ris_usd += o.ris_usd;
        self.scrape_usd += o.scrape_usd;
        self.llm_usd += o.llm_usd;
        self.llm_discounted_usd += o.llm_discounted_usd;
        self.usd_total += o.usd_total;
        self.usd_total_discounted += o.usd_total_discounted;
    }
}

pub fn price(usage: &Usage, prices: &PriceTable) -> CostBreakdown {
    let ris_usd = Decimal::from(usage.ris_searches) * prices.ris_per_search_usd;
    let scrape_usd = Decimal::from(usage.scraped_pages) * prices.scrape_per_page_usd;
    let llm_usd = Decimal::from(usage.input_tokens) * prices.llm_input_per_token_usd
        + Decimal::from(usage.output_tokens) * prices.llm_output_per_token_usd;
    let llm_discounted_usd = llm_usd * prices.llm_discount_factor;
    CostBreakdown {
        ris_usd: ris_usd.normalize(),
        scrape_usd: scrape_usd.normalize(),
        llm_usd: llm_usd.normalize(),
        llm_discounted_usd: llm_discounted_usd.normalize(),
        usd_total: (ris_usd + scrape_usd + llm_usd).normalize(),
        usd_total_discounted: (ris_usd + scrape_usd + llm_discounted_usd).normalize(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub claim_id: String,
    pub usage: Usage,
    pub cost: CostBreakdown,
}

impl CostEntry {
    pub fn new(claim_id: impl Into<String>, usage: Usage, prices: &PriceTable) -> Self {
        Self { claim_id: claim_id.into(), usage, cost: price(&usage, prices) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub entries: Vec<CostEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSummary {
    pub claims: usize,
    pub usage: Usage,
    pub total: CostBreakdown,
    /// Per-claim means, rounded to 6 decimal places for display.
    pub mean: CostBreakdown,
}

impl CostLedger {
    pub fn push(&mut self, entry: CostEntry) {
        self.entries.push(entry);
    }

    pub fn summary(&self) -> CostSummary {
        let mut usage = Usage::default();
        let mut total = CostBreakdown::default();
        for e in &self.entries {
            usage += e.usage;
            total += e.cost;
        }
        let total = total.map(|d| d.normalize());
        let mean = if self.entries.is_empty() {
            CostBreakdown::default()
        } else {
            let n = Decimal::from(self.entries.len());
            total.map(|d| (d / n).round_dp(6).normalize())
        };
        CostSummary { claims: self.entries.len(), usage, total, mean }
    }
}
