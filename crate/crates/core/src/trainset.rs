//! Finetuning dataset emission: plain SFT, reasoning SFT and DPO pairs.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backends::{ChatClient, ChatError};
use crate::corpus::{index_records, Corpus, RecordKey, ResponseRecord};
use crate::error::{Error, Result, RowIssue};
use crate::prompts::{render_direct, render_oracle_trace_prompt, render_reasoning, PromptBundle, PREDICTION_MARKER};
use crate::rng::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftMode {
    Plain,
    Reasoning,
}

impl FromStr for SftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(SftMode::Plain),
            "reasoning" => Ok(SftMode::Reasoning),
            other => Err(Error::Unsupported(format!("sft mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub prompt: PromptBundle,
    pub target: String,
    pub provenance: RecordKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

fn messages(p: &PromptBundle) -> Vec<Message> {
    vec![
        Message {
            role: "system".into(),
            content: p.system.clone(),
        },
        Message {
            role: "user".into(),
            content: p.user.clone(),
        },
    ]
}

/// One line of an SFT JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftLine {
    pub messages: Vec<Message>,
    pub target: String,
    pub provenance: RecordKey,
}

impl From<&SftExample> for SftLine {
    fn from(e: &SftExample) -> Self {
        SftLine {
            messages: messages(&e.prompt),
            target: e.target.clone(),
            provenance: e.provenance.clone(),
        }
    }
}

pub fn reasoning_target(trace: &str, response: i64) -> String {
    format!("<trace>{trace}</trace>\n{PREDICTION_MARKER} {response}")
}

/// Text between the first `<trace>` and the following `</trace>`.
pub fn extract_trace(reply: &str) -> Option<&str> {
    let start = reply.find("<trace>")? + "<trace>".len();
    let len = reply[start..].find("</trace>")?;
    let t = reply[start..start + len].trim();
    (!t.is_empty()).then_some(t)
}

/// True when the trace states the answer outright, e.g. "the answer is 4".
pub fn leaks_answer(trace: &str, answer: i64) -> bool {
    let lower = trace.to_lowercase();
    let needle = "answer is";
    let mut from = 0;
    while let Some(pos) = lower[from..].find(needle) {
        let rest = &lower[from + pos + needle.len()..];
        let rest = rest.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, ':' | '"' | '\'' | '*' | '`'));
        let sign = usize::from(rest.starts_with('-'));
        let digits: String = rest[sign..].chars().take_while(char::is_ascii_digit).collect();
        if !digits.is_empty() {
            if let Ok(v) = rest[..sign + digits.len()].parse::<i64>() {
                if v == answer {
                    return true;
                }
            }
        }
        from += pos + needle.len();
    }
    false
}

/// Source of reasoning traces for reasoning-mode SFT targets.
#[async_trait]
pub trait TraceProvider: Send + Sync {
    /// Trace text for `key`. `attempt` is 0 for the first request and 1 for
    /// the single regeneration after a leak.
    async fn trace(&self, key: &RecordKey, oracle_prompt: &PromptBundle, attempt: u32) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLine {
    #[serde(flatten)]
    pub key: RecordKey,
    #[serde(default)]
    pub attempt: u32,
    pub trace: String,
}

/// Pre-generated traces read from JSONL, keyed by provenance and attempt.
#[derive(Debug, Clone, Default)]
pub struct OfflineTraces {
    traces: HashMap<(RecordKey, u32), String>,
}

impl OfflineTraces {
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: TraceLine = serde_json::from_str(&line).map_err(|e| {
                Error::Rejected(vec![RowIssue {
                    locator: format!("{}:{}", path.display(), i + 1),
                    message: e.to_string(),
                }])
            })?;
            lines.push(t);
        }
        Ok(Self::from_lines(lines))
    }

    pub fn from_lines(lines: impl IntoIterator<Item = TraceLine>) -> Self {
        OfflineTraces {
            traces: lines.into_iter().map(|t| ((t.key, t.attempt), t.trace)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }
}

#[async_trait]
impl TraceProvider for OfflineTraces {
    async fn trace(&self, key: &RecordKey, _prompt: &PromptBundle, attempt: u32) -> Result<String> {
        self.traces
            .get(&(key.clone(), attempt))
            .cloned()
            .ok_or_else(|| Error::UnknownKey {
                kind: "trace",
                id: format!("{key}#{attempt}"),
            })
    }
}

/// Asks a chat endpoint for a trace using the oracle prompt.
pub struct LiveTraces {
    client: ChatClient,
}

impl LiveTraces {
    pub fn new(client: ChatClient) -> Self {
        LiveTraces { client }
    }
}

#[async_trait]
impl TraceProvider for LiveTraces {
    async fn trace(&self, key: &RecordKey, prompt: &PromptBundle, _attempt: u32) -> Result<String> {
        let reply = self
            .client
            .complete(&prompt.system, &prompt.user)
            .await
            .map_err(|e| match e {
                ChatError::Fatal(m) => Error::Config(m),
                ChatError::Transient(m) => Error::Http(m),
            })?;
        extract_trace(&reply)
            .map(str::to_string)
            .ok_or_else(|| Error::Http(format!("reply for {key} has no <trace> block")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmissionSummary {
    pub source_records: usize,
    pub emitted: usize,
    pub trace_failures: usize,
    pub leaks_detected: usize,
    pub leak_skipped: usize,
    /// DPO only: focal records whose bucket had no differing response.
    pub zero_pair_records: usize,
    /// DPO only: focal records with fewer candidates than requested.
    pub short_records: usize,
}

enum TraceOutcome {
    Ok(String, bool),
    Failed,
    Leaked,
}

async fn fetch_trace(
    provider: &dyn TraceProvider,
    key: &RecordKey,
    prompt: &PromptBundle,
    answer: i64,
) -> Result<TraceOutcome> {
    let mut leaked = false;
    for attempt in 0..2 {
        let text = match provider.trace(key, prompt, attempt).await {
            Ok(t) => t,
            // auth or configuration problems stop the run
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => {
                tracing::warn!(%key, attempt, error = %e, "trace unavailable");
                return Ok(TraceOutcome::Failed);
            }
        };
        let text = text.trim();
        if text.is_empty() {
            return Ok(TraceOutcome::Failed);
        }
        if leaks_answer(text, answer) {
            tracing::debug!(%key, attempt, "trace quotes the true answer");
            leaked = true;
            continue;
        }
        return Ok(TraceOutcome::Ok(text.to_string(), leaked));
    }
    Ok(TraceOutcome::Leaked)
}

/// One SFT example per record. Reasoning mode needs a trace provider;
/// records without a usable trace are skipped and counted.
pub async fn build_sft(
    corpus: &Corpus,
    records: &[&ResponseRecord],
    mode: SftMode,
    traces: Option<&dyn TraceProvider>,
    concurrency: usize,
) -> Result<(Vec<SftExample>, EmissionSummary)> {
    let mut summary = EmissionSummary {
        source_records: records.len(),
        ..EmissionSummary::default()
    };
    let manifest = |r: &ResponseRecord| {
        corpus.study(&r.study_id).ok_or_else(|| Error::UnknownKey {
            kind: "study",
            id: r.study_id.clone(),
        })
    };
    let mut out = Vec::with_capacity(records.len());
    match mode {
        SftMode::Plain => {
            for r in records {
                let prompt = render_direct((*r).into(), manifest(r)?, &r.condition_id, &r.outcome_id)?;
                out.push(SftExample {
                    prompt,
                    target: r.response.to_string(),
                    provenance: r.record_key(),
                });
            }
        }
        SftMode::Reasoning => {
            let provider =
                traces.ok_or_else(|| Error::Config("reasoning mode needs a trace source".into()))?;
            let mut jobs = Vec::with_capacity(records.len());
            for r in records {
                let m = manifest(r)?;
                let prompt = render_reasoning((*r).into(), m, &r.condition_id, &r.outcome_id)?;
                let oracle = render_oracle_trace_prompt((*r).into(), m, &r.condition_id, &r.outcome_id, r.response)?;
                jobs.push((*r, prompt, oracle));
            }
            let results: Vec<Result<(SftExample, TraceOutcome, i64)>> = stream::iter(jobs)
                .map(|(r, prompt, oracle)| async move {
                    let key = r.record_key();
                    let outcome = fetch_trace(provider, &key, &oracle, r.response).await?;
                    Ok((
                        SftExample {
                            prompt,
                            target: String::new(),
                            provenance: key,
                        },
                        outcome,
                        r.response,
                    ))
                })
                .buffered(concurrency.max(1))
                .collect()
                .await;
            for res in results {
                let (mut ex, outcome, answer) = res?;
                match outcome {
                    TraceOutcome::Ok(trace, leaked) => {
                        if leaked {
                            summary.leaks_detected += 1;
                        }
                        ex.target = reasoning_target(&trace, answer);
                        out.push(ex);
                    }
                    TraceOutcome::Failed => summary.trace_failures += 1,
                    TraceOutcome::Leaked => {
                        summary.leaks_detected += 1;
                        summary.leak_skipped += 1;
                    }
                }
            }
        }
    }
    summary.emitted = out.len();
    Ok((out, summary))
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::Rejected(vec![RowIssue {
                    locator: format!("{}:{}", path.display(), i + 1),
                    message: e.to_string(),
                }])
            })
        })
        .collect()
}

pub fn write_sft(path: &Path, examples: &[SftExample]) -> Result<()> {
    write_jsonl(path, examples.iter().map(SftLine::from))
}

pub async fn emit_sft(
    corpus: &Corpus,
    records: &[&ResponseRecord],
    mode: SftMode,
    traces: Option<&dyn TraceProvider>,
    concurrency: usize,
    out: &Path,
) -> Result<EmissionSummary> {
    let (examples, summary) = build_sft(corpus, records, mode, traces, concurrency).await?;
    write_sft(out, &examples)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastKind {
    #[default]
    Demographic,
    /// Reserved.
    Condition,
    /// Reserved.
    Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoPair {
    /// Rendered for the focal persona.
    pub prompt: PromptBundle,
    pub chosen: String,
    pub rejected: String,
    pub contrast_kind: ContrastKind,
    pub neg_source_participant: String,
    pub provenance: RecordKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoOptions {
    pub pairs_per_record: usize,
    pub contrast: ContrastKind,
    pub seed: u64,
}

impl Default for DpoOptions {
    fn default() -> Self {
        DpoOptions {
            pairs_per_record: 1,
            contrast: ContrastKind::Demographic,
            seed: 0,
        }
    }
}

/// Pairs each focal record's response (chosen) with a differing response
/// from another participant on the same stimulus (rejected).
pub fn build_dpo_pairs(
    corpus: &Corpus,
    records: &[&ResponseRecord],
    options: DpoOptions,
) -> Result<(Vec<DpoPair>, EmissionSummary)> {
    if options.contrast != ContrastKind::Demographic {
        return Err(Error::Unsupported(format!(
            "{:?} contrast pairs are not implemented",
            options.contrast
        )));
    }
    let mut summary = EmissionSummary {
        source_records: records.len(),
        ..EmissionSummary::default()
    };
    let mut pairs = Vec::new();
    for (key, bucket) in index_records(records.iter().copied()) {
        let manifest = corpus.study(&key.study_id).ok_or_else(|| Error::UnknownKey {
            kind: "study",
            id: key.study_id.clone(),
        })?;
        for focal in &bucket {
            let candidates: Vec<&&ResponseRecord> = bucket
                .iter()
                .filter(|r| r.response != focal.response && r.participant_id != focal.participant_id)
                .collect();
            if candidates.is_empty() {
                summary.zero_pair_records += 1;
                continue;
            }
            let want = options.pairs_per_record;
            if candidates.len() < want {
                summary.short_records += 1;
            }
            let fkey = focal.record_key();
            let mut rng = keyed_rng(options.seed, &format!("dpo:{fkey}"));
            let prompt = render_direct((*focal).into(), manifest, &focal.condition_id, &focal.outcome_id)?;
            for neg in candidates.choose_multiple(&mut rng, want.min(candidates.len())) {
                pairs.push(DpoPair {
                    prompt: prompt.clone(),
                    chosen: focal.response.to_string(),
                    rejected: neg.response.to_string(),
                    contrast_kind: ContrastKind::Demographic,
                    neg_source_participant: neg.participant_id.clone(),
                    provenance: fkey.clone(),
                });
            }
        }
    }
    summary.emitted = pairs.len();
    Ok((pairs, summary))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoMetadata {
    pub contrast_kind: ContrastKind,
    pub neg_source_participant: String,
    #[serde(flatten)]
    pub provenance: RecordKey,
}

/// One line of a DPO JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoLine {
    pub prompt: Vec<Message>,
    pub chosen: String,
    pub rejected: String,
    pub metadata: DpoMetadata,
}

impl From<&DpoPair> for DpoLine {
    fn from(p: &DpoPair) -> Self {
        DpoLine {
            prompt: messages(&p.prompt),
            chosen: p.chosen.clone(),
            rejected: p.rejected.clone(),
            metadata: DpoMetadata {
                contrast_kind: p.contrast_kind,
                neg_source_participant: p.neg_source_participant.clone(),
                provenance: p.provenance.clone(),
            },
        }
    }
}

pub fn emit_dpo(pairs: &[DpoPair], out: &Path) -> Result<EmissionSummary> {
    write_jsonl(out, pairs.iter().map(DpoLine::from))?;
    Ok(EmissionSummary {
        source_records: pairs.len(),
        emitted: pairs.len(),
        ..EmissionSummary::default()
    })
}

/// Optimizer settings recorded next to emitted datasets for the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: u32,
    pub global_batch_size: u32,
    pub sft_learning_rate: f64,
    pub dpo_learning_rate: f64,
    pub lr_scheduler: String,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        TrainingMeta {
            epochs: 1,
            global_batch_size: 256,
            sft_learning_rate: 1e-5,
            dpo_learning_rate: 1e-6,
            lr_scheduler: "cosine".into(),
            warmup_ratio: 0.05,
            weight_decay: 0.1,
        }
    }
}
