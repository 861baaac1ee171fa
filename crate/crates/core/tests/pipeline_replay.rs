mod common;

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use common::{replay_config, replay_llm, run_replay, CountingLlm};
use imgfact::claim::{load_claims, load_gold_labels, Verdict};
use imgfact::generation::{LlmError, LlmProvider, LlmResponse};
use imgfact::pipeline::{score_report, submission_json, BatchOptions, PipelineError};
use imgfact::prompt::PromptBundle;
use imgfact::provider::{FailureKind, ProviderError};
use imgfact::replay::bundle_key;
use rust_decimal::Decimal;

fn opts(parallel: usize) -> BatchOptions {
    BatchOptions { parallel, cancel: None }
}

fn dec(s: &str) -> Decimal {
    s.parse().unwrap()
}

#[test]
fn labels_match_gold() {
    let dir = tempfile::tempdir().unwrap();
    let config = replay_config();
    let out = run_replay(&config, &dir.path().join("j.jsonl"), None, &opts(2)).unwrap();
    assert!(out.complete);
    assert_eq!(out.resumed, 0);
    let ids: Vec<_> = out.outputs.iter().map(|o| o.claim_id.as_str()).collect();
    assert_eq!(ids, ["1", "2", "3"]);
    let gold = load_gold_labels(&common::replay_dir().join("gold.json")).unwrap();
    let report = score_report(&out.outputs, &gold, None).unwrap();
    assert_eq!(report.correct_verdicts, 3);
    assert_eq!(out.outputs[1].label, Some(Verdict::Supported));
}

#[test]
fn image_claim_sources_and_cost() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_replay(&replay_config(), &dir.path().join("j.jsonl"), None, &opts(2)).unwrap();
    let d = &out.diagnostics[0];
    assert_eq!(d.image_sources, 9);
    assert!(d.text_sources > 0 && d.text_sources <= 7);
    let c1 = &out.outputs[0];
    let tagged: Vec<_> = c1.evidence.iter().filter(|e| e.text.ends_with(" [IMG_1]")).collect();
    assert!(!tagged.is_empty());
    for e in &c1.evidence {
        assert_eq!(e.text.contains("[IMG_1]"), e.image.is_some(), "{}", e.text);
    }
    let cost = &out.ledger.entries[0];
    assert_eq!(cost.usage.ris_searches, 1);
    assert_eq!(cost.cost.ris_usd, dec("0.003"));
    assert_eq!(cost.cost.scrape_usd, Decimal::from(cost.usage.scraped_pages) * dec("0.006"));
    assert_eq!(cost.cost.llm_discounted_usd, dec("0.012625"));
    // text-only claims never touch image services
    assert_eq!(out.ledger.entries[1].usage.ris_searches, 0);
    assert_eq!(out.ledger.entries[1].cost.scrape_usd, Decimal::ZERO);
}

#[test]
fn retry_and_unknown_source_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_replay(&replay_config(), &dir.path().join("j.jsonl"), None, &opts(1)).unwrap();
    assert_eq!(out.diagnostics[1].llm_attempts, 2);
    assert!(out.outputs[1].failure.is_none());
    assert!(out.diagnostics[2].warnings.iter().any(|w| w.contains("unknown_source")), "{:?}", out.diagnostics[2]);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = replay_config();
    let start = Instant::now();
    let first = run_replay(&config, &a.path().join("j.jsonl"), None, &opts(2)).unwrap();
    let second = run_replay(&config, &b.path().join("j.jsonl"), None, &opts(1)).unwrap();
    assert!(start.elapsed().as_secs() < 10);
    assert_eq!(submission_json(&first.outputs), submission_json(&second.outputs));
    assert_eq!(first.ledger, second.ledger);
}

#[test]
fn resume_skips_journaled_claims() {
    let config = replay_config();
    let clean_dir = tempfile::tempdir().unwrap();
    let clean = run_replay(&config, &clean_dir.path().join("j.jsonl"), None, &opts(1)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("j.jsonl");
    let claims = load_claims(&config.paths.claims).unwrap();
    let cancel = Arc::new(AtomicBool::new(false));
    let llm = CountingLlm {
        inner: replay_llm(),
        calls: Arc::new(AtomicUsize::new(0)),
        cancel_after: Some((claims[0].text.clone(), cancel.clone())),
    };
    let partial = run_replay(
        &config,
        &journal,
        Some(Box::new(llm)),
        &BatchOptions { parallel: 1, cancel: Some(cancel) },
    )
    .unwrap();
    assert!(!partial.complete);
    assert_eq!(partial.outputs.len(), 1);

    // simulate a crash in the middle of writing the next record
    let mut text = std::fs::read_to_string(&journal).unwrap();
    text.push_str("{\"claim_id\":\"2\",\"output_sha");
    std::fs::write(&journal, text).unwrap();

    let calls = Arc::new(AtomicUsize::new(0));
    let llm = CountingLlm { inner: replay_llm(), calls: calls.clone(), cancel_after: None };
    let resumed = run_replay(&config, &journal, Some(Box::new(llm)), &opts(2)).unwrap();
    assert!(resumed.complete);
    assert_eq!(resumed.resumed, 1);
    // claim 2 needs two attempts, claim 3 one; claim 1 is not re-run
    assert_eq!(calls.load(Ordering::SeqCst), 3);
    assert_eq!(submission_json(&resumed.outputs), submission_json(&clean.outputs));
}

struct ScriptedLlm {
    inner: Box<dyn LlmProvider>,
    target: String,
    reply: Result<&'static str, ProviderError>,
}

impl LlmProvider for ScriptedLlm {
    fn complete(&self, bundle: &PromptBundle) -> Result<LlmResponse, LlmError> {
        if bundle_key(bundle) != self.target {
            return self.inner.complete(bundle);
        }
        match &self.reply {
            Ok(text) => Ok(LlmResponse { text: text.to_string(), usage: Default::default() }),
            Err(e) => Err(LlmError::Provider(e.clone())),
        }
    }
}

#[test]
fn unusable_response_fails_only_that_claim() {
    let config = replay_config();
    let claims = load_claims(&config.paths.claims).unwrap();
    let llm = ScriptedLlm { inner: replay_llm(), target: claims[2].text.clone(), reply: Ok("I cannot help.") };
    let dir = tempfile::tempdir().unwrap();
    let out = run_replay(&config, &dir.path().join("j.jsonl"), Some(Box::new(llm)), &opts(2)).unwrap();
    assert!(out.complete);
    let failure = out.outputs[2].failure.as_ref().unwrap();
    assert_eq!(failure.stage, "generation");
    assert_eq!(out.outputs[2].label, None);
    assert_eq!(out.diagnostics[2].llm_attempts, 2);
    assert!(out.outputs[0].label.is_some() && out.outputs[1].label.is_some());
}

#[test]
fn rejected_credentials_abort_the_batch() {
    let config = replay_config();
    let claims = load_claims(&config.paths.claims).unwrap();
    let llm = ScriptedLlm {
        inner: replay_llm(),
        target: claims[1].text.clone(),
        reply: Err(ProviderError::auth("llm", "HTTP 401")),
    };
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("j.jsonl");
    let err = run_replay(&config, &journal, Some(Box::new(llm)), &opts(1)).unwrap_err();
    assert!(matches!(err, PipelineError::Aborted(ref e) if e.kind == FailureKind::Auth), "{err}");
    let journaled = imgfact::pipeline::read_journal(&journal).unwrap();
    assert!(journaled.iter().all(|r| r.claim_id != "2"));
}
