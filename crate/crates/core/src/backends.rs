//! Sources of predictions: replayed files, analytic baselines, the
//! ground-truth resampler and a chat-completions client.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    index_records, resolve_bounds, BoundsPolicy, Corpus, RecordKey, ResolvedBounds, ResponseRecord,
    ResponseScale, StimulusKey,
};
use crate::error::{Error, Result, RowIssue};
use crate::prompts::{parse_prediction, ParsePolicy, PromptBundle};
use crate::rng::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionFlag {
    Clamped,
    ParseFailed,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    #[serde(flatten)]
    pub key: RecordKey,
    /// `None` only when the reply could not be parsed.
    pub predicted: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub flags: BTreeSet<PredictionFlag>,
}

impl PredictionRecord {
    /// A parsed prediction with no flags.
    pub fn new(key: RecordKey, value: i64) -> Self {
        PredictionRecord {
            key,
            predicted: Some(value),
            raw_reply: None,
            flags: BTreeSet::new(),
        }
    }

    fn baseline(key: RecordKey, value: i64) -> Self {
        PredictionRecord {
            key,
            predicted: Some(value),
            raw_reply: None,
            flags: BTreeSet::from([PredictionFlag::Baseline]),
        }
    }

    fn failed(key: RecordKey, raw_reply: Option<String>) -> Self {
        PredictionRecord {
            key,
            predicted: None,
            raw_reply,
            flags: BTreeSet::from([PredictionFlag::ParseFailed]),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.flags.contains(&PredictionFlag::ParseFailed) || self.predicted.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    File,
    Midpoint,
    Uniform,
    Resampler,
    Http,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "file" => BackendKind::File,
            "midpoint" => BackendKind::Midpoint,
            "uniform" => BackendKind::Uniform,
            "resampler" => BackendKind::Resampler,
            "http" => BackendKind::Http,
            other => return Err(Error::Unsupported(format!("backend `{other}`"))),
        })
    }
}

/// Reads a prediction JSONL file. Keys are matched against the corpus later.
pub fn predict_file(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            Error::Rejected(vec![RowIssue {
                locator: format!("{}:{}", path.display(), i + 1),
                message: e.to_string(),
            }])
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Bounds of every stimulus among `records`, resolved from those records'
/// responses.
pub fn stimulus_bounds(
    corpus: &Corpus,
    records: &[&ResponseRecord],
    policy: BoundsPolicy,
) -> BTreeMap<StimulusKey, Option<ResolvedBounds>> {
    index_records(records.iter().copied())
        .into_iter()
        .map(|(key, bucket)| {
            let bounds = corpus
                .outcome(&key)
                .and_then(|o| resolve_bounds(o, bucket.iter().map(|r| r.response), policy));
            (key, bounds)
        })
        .collect()
}

fn bounds_for<'m>(
    map: &'m BTreeMap<StimulusKey, Option<ResolvedBounds>>,
    r: &ResponseRecord,
) -> Result<&'m ResolvedBounds> {
    map.get(&r.stimulus_key())
        .and_then(Option::as_ref)
        .ok_or_else(|| Error::InvalidCorpus(format!("no usable scale bounds for {}", r.stimulus_key())))
}

/// Half-up midpoint of `[min, max]`.
pub fn midpoint(min: i64, max: i64) -> i64 {
    let s = min + max;
    s.div_euclid(2) + s.rem_euclid(2)
}

/// Always predicts the scale midpoint, rounding half up.
pub fn baseline_midpoint(
    corpus: &Corpus,
    eval: &[&ResponseRecord],
    bounds: BoundsPolicy,
) -> Result<Vec<PredictionRecord>> {
    let map = stimulus_bounds(corpus, eval, bounds);
    let mut out = eval
        .iter()
        .map(|r| {
            let b = bounds_for(&map, r)?;
            Ok(PredictionRecord::baseline(r.record_key(), midpoint(b.min, b.max)))
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(out)
}

/// Uniform draw over the integer scale points, one keyed stream per record.
pub fn baseline_uniform(
    corpus: &Corpus,
    eval: &[&ResponseRecord],
    bounds: BoundsPolicy,
    seed: u64,
) -> Result<Vec<PredictionRecord>> {
    let map = stimulus_bounds(corpus, eval, bounds);
    let mut out = eval
        .iter()
        .map(|r| {
            let b = bounds_for(&map, r)?;
            let key = r.record_key();
            let v = keyed_rng(seed, &format!("uniform:{key}")).gen_range(b.min..=b.max);
            Ok(PredictionRecord::baseline(key, v))
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplerOptions {
    /// Exclude the focal record from its own sampling pool. A singleton
    /// bucket still predicts its only value.
    pub leave_one_out: bool,
}

/// Draws each prediction from the empirical distribution of ground-truth
/// responses in the record's stimulus bucket.
pub fn oracle_resampler(
    eval: &[&ResponseRecord],
    seed: u64,
    options: ResamplerOptions,
) -> Vec<PredictionRecord> {
    let buckets = index_records(eval.iter().copied());
    let mut out = Vec::with_capacity(eval.len());
    for bucket in buckets.values() {
        for (i, r) in bucket.iter().enumerate() {
            let key = r.record_key();
            let mut rng = keyed_rng(seed, &format!("resample:{key}"));
            let value = if options.leave_one_out && bucket.len() > 1 {
                let mut j = rng.gen_range(0..bucket.len() - 1);
                if j >= i {
                    j += 1;
                }
                bucket[j].response
            } else {
                bucket.choose(&mut rng).expect("non-empty bucket").response
            };
            out.push(PredictionRecord::baseline(key, value));
        }
    }
    out.sort_by(|a, b| a.key.cmp(&b.key));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.6,
            top_p: 0.9,
            max_tokens: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub sampling: SamplingParams,
    pub concurrency_limit: usize,
    /// Attempts per request, including the first.
    pub max_attempts: u32,
    pub timeout: Duration,
    pub retry_backoff: Duration,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            api_key_env: "SOCSIM_API_KEY".into(),
            sampling: SamplingParams::default(),
            concurrency_limit: 8,
            max_attempts: 3,
            timeout: Duration::from_secs(120),
            retry_backoff: Duration::from_millis(250),
        }
    }
}

impl HttpConfig {
    pub fn check(&self) -> Result<()> {
        if self.sampling.temperature < 0.0 {
            return Err(Error::Config("temperature must be >= 0".into()));
        }
        if self.concurrency_limit == 0 {
            return Err(Error::Config("concurrency limit must be >= 1".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max attempts must be >= 1".into()));
        }
        reqwest::Url::parse(&self.endpoint)
            .map_err(|e| Error::Config(format!("endpoint `{}`: {e}", self.endpoint)))?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ChatError {
    /// Authentication or configuration problem; retrying cannot help.
    #[error("fatal: {0}")]
    Fatal(String),
    #[error("{0}")]
    Transient(String),
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

/// Minimal chat-completions client with per-request retries.
#[derive(Clone)]
pub struct ChatClient {
    http: reqwest::Client,
    config: HttpConfig,
    api_key: Option<String>,
}

impl ChatClient {
    pub fn new(config: HttpConfig) -> Result<Self> {
        config.check()?;
        let http = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        let api_key = std::env::var(&config.api_key_env).ok();
        Ok(ChatClient {
            http,
            config,
            api_key,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    async fn attempt(&self, system: &str, user: &str) -> std::result::Result<String, ChatError> {
        let s = &self.config.sampling;
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": s.temperature,
            "top_p": s.top_p,
            "max_tokens": s.max_tokens,
        });
        let mut req = self.http.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| ChatError::Transient(e.to_string()))?;
        let status = resp.status();
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(ChatError::Fatal(format!("endpoint returned {status}")));
        }
        if !status.is_success() {
            return Err(ChatError::Transient(format!("endpoint returned {status}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .await
            .map_err(|e| ChatError::Transient(format!("bad response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ChatError::Transient("response has no message content".into()))
    }

    /// Sends one chat request, retrying transient failures up to
    /// `max_attempts` times in total.
    pub async fn complete(&self, system: &str, user: &str) -> std::result::Result<String, ChatError> {
        let mut last = None;
        for attempt in 0..self.config.max_attempts {
            if attempt > 0 {
                tokio::time::sleep(self.config.retry_backoff * attempt).await;
            }
            match self.attempt(system, user).await {
                Ok(text) => return Ok(text),
                Err(ChatError::Fatal(e)) => return Err(ChatError::Fatal(e)),
                Err(e) => {
                    tracing::debug!(attempt, error = %e, "chat request failed");
                    last = Some(e);
                }
            }
        }
        Err(last.unwrap_or_else(|| ChatError::Transient("no attempts made".into())))
    }
}

#[derive(Debug, Clone)]
pub struct PredictionRequest {
    pub key: RecordKey,
    pub prompt: PromptBundle,
    pub scale: ResponseScale,
}

/// Runs every request against the chat endpoint with at most
/// `concurrency_limit` in flight. Output is sorted by record key and has one
/// entry per request; only fatal endpoint errors abort the run.
pub async fn predict_http(
    client: &ChatClient,
    requests: Vec<PredictionRequest>,
    policy: ParsePolicy,
) -> Result<Vec<PredictionRecord>> {
    let limit = client.config().concurrency_limit;
    let results: Vec<std::result::Result<PredictionRecord, ChatError>> = stream::iter(requests)
        .map(|req| async move {
            match client.complete(&req.prompt.system, &req.prompt.user).await {
                Ok(reply) => Ok(match parse_prediction(&reply, req.prompt.mode, &req.scale, policy) {
                    Ok(p) => PredictionRecord {
                        key: req.key,
                        predicted: Some(p.value),
                        raw_reply: Some(reply),
                        flags: if p.clamped {
                            BTreeSet::from([PredictionFlag::Clamped])
                        } else {
                            BTreeSet::new()
                        },
                    },
                    Err(_) => PredictionRecord::failed(req.key, Some(reply)),
                }),
                Err(ChatError::Fatal(e)) => Err(ChatError::Fatal(e)),
                Err(e) => {
                    tracing::warn!(key = %req.key, error = %e, "request failed after retries");
                    Ok(PredictionRecord::failed(req.key, None))
                }
            }
        })
        .buffer_unordered(limit)
        .collect()
        .await;
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(p) => out.push(p),
            Err(e) => return Err(Error::Http(e.to_string())),
        }
    }
    out.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(out)
}
