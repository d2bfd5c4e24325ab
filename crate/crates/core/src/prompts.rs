//! Prompt rendering for the four prompting modes and parsing of replies.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Outcome, Persona, ResponseRecord, ResponseScale, StimulusKey, StudyManifest};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

pub const DIRECT_SYSTEM: &str = "You are simulating a survey respondent. Answer exactly as instructed, following the specified response format without additional commentary.";

pub const REASONING_SYSTEM: &str = "You are simulating a survey respondent. You are to answer exactly as instructed, but also include your reasoning (5 sentences or less) before you output your answer.Please follow the exact output format below.
### Output format
<trace>
\u{2026}your step-by-step reasoning here\u{2026}
</trace>
PREDICTION: <verbatim answer> (conclude with predicted answer, use exactly the option label/number with no extra commentary)";

const FEWSHOT_PREAMBLE: &str = "\n\nAs you answer, consider how the following similar question was answered by other participants:\n\n";

pub const ORACLE_SYSTEM: &str = "You are an expert behavioral scientist asked to write a plausible, forward\u{2011}looking reasoning trace that *predicts* which answer a survey respondent will give. Draw on knowledge of behavioral and social science theory to explain how and why this person responded the way they did.

**Key constraints for the reasoning trace**
1. **Prospective viewpoint.** Write as if you do *not* know the final choice yet. Describe the mental steps a typical person with the given persona might take when first seeing the stimuli.
2. **No answer leakage inside the trace.** The true answer is supplied only for your private verification. Do **not** quote, paraphrase, or rely on it within the narrative.
3. Be concise but specific in your reasoning and avoid repetition. Keep the reasoning trace 5 sentences or less.\"

### Output format
<trace> \u{2026}your step\u{2011}by\u{2011}step reasoning here (written as if before 'knowing' the answer)\u{2026} </trace>
PREDICTION: <verbatim answer> (conclude with predicted answer, use exactly the option label/number with no extra commentary)";

const PROFILE_LEAD: &str = "You are a survey respondent with the following demographic profile:\n";
const READ_INSTRUCTION: &str =
    "Read the question below and answer exactly as this person would. Follow the response instructions precisely.";
const ORACLE_CLOSING: &str =
    "Write the reasoning trace and final prediction now, following the format above.";

pub const PREDICTION_MARKER: &str = "PREDICTION:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Direct,
    Reasoning,
    Fewshot,
    OracleTrace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user: String,
    pub mode: PromptMode,
    pub stimulus_key: StimulusKey,
    pub participant_id: String,
}

/// Who a prompt is about.
#[derive(Debug, Clone, Copy)]
pub struct Subject<'a> {
    pub participant_id: &'a str,
    pub persona: &'a Persona,
}

impl<'a> From<&'a ResponseRecord> for Subject<'a> {
    fn from(r: &'a ResponseRecord) -> Self {
        Subject {
            participant_id: &r.participant_id,
            persona: &r.persona,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub participant_id: String,
    pub stimulus_text: String,
    pub persona: Persona,
    pub answer: i64,
}

/// One `- Name: Value` line per attribute, in source order.
pub fn render_persona(persona: &Persona) -> String {
    persona
        .iter()
        .map(|(k, v)| format!("- {k}: {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The response-format sentence appended to a composed stimulus.
pub fn format_instruction(outcome: &Outcome) -> Result<String> {
    if let Some(text) = &outcome.instruction {
        return Ok(text.clone());
    }
    let scale = outcome.scale().ok_or_else(|| match (outcome.min, outcome.max) {
        (Some(min), Some(max)) => Error::DegenerateScale { min, max },
        _ => Error::InvalidCorpus(format!("outcome `{}` has no numeric bounds", outcome.outcome_id)),
    })?;
    Ok(scale_instruction(&scale))
}

fn scale_instruction(scale: &ResponseScale) -> String {
    match (scale.labels.get(&scale.min), scale.labels.get(&scale.max)) {
        (Some(lo), Some(hi)) => format!(
            "Only return an integer from {} to {}, where {} means {lo} and {} means {hi}, nothing else.",
            scale.min, scale.max, scale.min, scale.max
        ),
        _ => format!(
            "Only return an integer from {} to {}, nothing else.",
            scale.min, scale.max
        ),
    }
}

/// Stimulus text for one (condition, outcome): the stored composed text if
/// the manifest has one, otherwise condition stimulus + question + format
/// instruction.
pub fn compose_stimulus(manifest: &StudyManifest, condition_id: &str, outcome_id: &str) -> Result<String> {
    let condition = manifest.condition(condition_id).ok_or_else(|| Error::UnknownKey {
        kind: "condition",
        id: condition_id.into(),
    })?;
    let outcome = manifest.outcome(outcome_id).ok_or_else(|| Error::UnknownKey {
        kind: "outcome",
        id: outcome_id.into(),
    })?;
    if let Some(text) = manifest.composed_stimulus(condition_id, outcome_id) {
        if text.trim().is_empty() {
            return Err(Error::InvalidCorpus(format!(
                "empty composed stimulus for ({condition_id}, {outcome_id})"
            )));
        }
        return Ok(text.to_string());
    }
    if condition.stimulus.trim().is_empty() {
        return Err(Error::InvalidCorpus(format!(
            "condition `{condition_id}` has no stimulus description"
        )));
    }
    Ok(format!(
        "You read '{}' and then were asked: '{}' {}",
        condition.stimulus,
        outcome.question,
        format_instruction(outcome)?
    ))
}

fn respondent_user(persona: &Persona, stimulus: &str) -> String {
    format!(
        "{PROFILE_LEAD}{}\n\n{READ_INSTRUCTION}\n\n{stimulus}",
        render_persona(persona)
    )
}

fn bundle(
    system: String,
    user: String,
    mode: PromptMode,
    subject: Subject<'_>,
    manifest: &StudyManifest,
    condition_id: &str,
    outcome_id: &str,
) -> PromptBundle {
    PromptBundle {
        system,
        user,
        mode,
        stimulus_key: StimulusKey {
            study_id: manifest.study_id.clone(),
            condition_id: condition_id.into(),
            outcome_id: outcome_id.into(),
        },
        participant_id: subject.participant_id.into(),
    }
}

pub fn render_direct(
    subject: Subject<'_>,
    manifest: &StudyManifest,
    condition_id: &str,
    outcome_id: &str,
) -> Result<PromptBundle> {
    let stimulus = compose_stimulus(manifest, condition_id, outcome_id)?;
    Ok(bundle(
        DIRECT_SYSTEM.into(),
        respondent_user(subject.persona, &stimulus),
        PromptMode::Direct,
        subject,
        manifest,
        condition_id,
        outcome_id,
    ))
}

pub fn render_reasoning(
    subject: Subject<'_>,
    manifest: &StudyManifest,
    condition_id: &str,
    outcome_id: &str,
) -> Result<PromptBundle> {
    let stimulus = compose_stimulus(manifest, condition_id, outcome_id)?;
    Ok(bundle(
        REASONING_SYSTEM.into(),
        respondent_user(subject.persona, &stimulus),
        PromptMode::Reasoning,
        subject,
        manifest,
        condition_id,
        outcome_id,
    ))
}

/// Few-shot prompt. With no exemplars the system message is the direct one.
pub fn render_fewshot(
    subject: Subject<'_>,
    manifest: &StudyManifest,
    condition_id: &str,
    outcome_id: &str,
    exemplars: &[Exemplar],
) -> Result<PromptBundle> {
    let stimulus = compose_stimulus(manifest, condition_id, outcome_id)?;
    let system = match exemplars.first() {
        None => DIRECT_SYSTEM.to_string(),
        Some(first) => {
            let mut s = format!("{DIRECT_SYSTEM}{FEWSHOT_PREAMBLE}Question: {}", first.stimulus_text);
            for (i, ex) in exemplars.iter().enumerate() {
                s.push_str(&format!(
                    "\n\nPerson {} Profile:\n{}\nAnswer: {}",
                    i + 1,
                    render_persona(&ex.persona),
                    ex.answer
                ));
            }
            s
        }
    };
    Ok(bundle(
        system,
        respondent_user(subject.persona, &stimulus),
        PromptMode::Fewshot,
        subject,
        manifest,
        condition_id,
        outcome_id,
    ))
}

/// Prompt asking an oracle model to explain a known response. The true
/// response appears only inside the HTML comment.
pub fn render_oracle_trace_prompt(
    subject: Subject<'_>,
    manifest: &StudyManifest,
    condition_id: &str,
    outcome_id: &str,
    true_response: i64,
) -> Result<PromptBundle> {
    let stimulus = compose_stimulus(manifest, condition_id, outcome_id)?;
    let user = format!(
        "**Persona**: {}\n**Stimuli**: {stimulus}\n<!-- TRUE ANSWER (use only to verify your prediction; do NOT reference inside <trace>): {true_response} -->\n\n{ORACLE_CLOSING}",
        render_persona(subject.persona)
    );
    Ok(bundle(
        ORACLE_SYSTEM.into(),
        user,
        PromptMode::OracleTrace,
        subject,
        manifest,
        condition_id,
        outcome_id,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsePolicy {
    #[default]
    Clamp,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedPrediction {
    pub value: i64,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseFailure {
    #[error("no integer found in reply")]
    NoInteger,
    #[error("predicted {0} is outside the response scale")]
    OutOfScale(i64),
}

/// Extracts an integer prediction from a model reply.
///
/// Direct mode accepts only a bare integer. Other modes take the integer
/// after the last `PREDICTION:` marker, else the last standalone integer.
pub fn parse_prediction(
    reply: &str,
    mode: PromptMode,
    scale: &ResponseScale,
    policy: ParsePolicy,
) -> std::result::Result<ParsedPrediction, ParseFailure> {
    let raw = match mode {
        PromptMode::Direct => reply.trim().parse::<i64>().ok(),
        _ => after_marker(reply).or_else(|| last_standalone_integer(reply)),
    }
    .ok_or(ParseFailure::NoInteger)?;
    if scale.contains(raw) {
        return Ok(ParsedPrediction {
            value: raw,
            clamped: false,
        });
    }
    match policy {
        ParsePolicy::Clamp => Ok(ParsedPrediction {
            value: scale.clamp(raw),
            clamped: true,
        }),
        ParsePolicy::Reject => Err(ParseFailure::OutOfScale(raw)),
    }
}

fn after_marker(reply: &str) -> Option<i64> {
    let idx = reply.rfind(PREDICTION_MARKER)?;
    let rest = reply[idx + PREDICTION_MARKER.len()..].trim_start();
    let rest = rest.trim_start_matches(['"', '\'', '*', '[', '(']);
    leading_integer(rest)
}

fn leading_integer(s: &str) -> Option<i64> {
    let bytes = s.as_bytes();
    let mut end = usize::from(bytes.first() == Some(&b'-'));
    let start_digits = end;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start_digits {
        return None;
    }
    // "2.5" is not an integer answer
    if bytes.get(end) == Some(&b'.') && bytes.get(end + 1).is_some_and(u8::is_ascii_digit) {
        return None;
    }
    s[..end].parse().ok()
}

fn last_standalone_integer(reply: &str) -> Option<i64> {
    let bytes = reply.as_bytes();
    let mut found = None;
    let mut i = 0;
    while i < bytes.len() {
        if !bytes[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        let before = start.checked_sub(1).map(|j| bytes[j]);
        let neg = before == Some(b'-')
            && start
                .checked_sub(2)
                .map_or(true, |j| !bytes[j].is_ascii_alphanumeric());
        let glued_before = matches!(before, Some(b) if b.is_ascii_alphanumeric() || b == b'.' || b == b'_')
            || (before == Some(b'-') && !neg);
        let after = bytes.get(i).copied();
        let glued_after = matches!(after, Some(b) if b.is_ascii_alphanumeric() || b == b'_')
            || (after == Some(b'.') && bytes.get(i + 1).is_some_and(u8::is_ascii_digit));
        if !glued_before && !glued_after {
            let digits = &reply[start..i];
            let value = if neg { format!("-{digits}") } else { digits.to_string() };
            if let Ok(v) = value.parse() {
                found = Some(v);
            }
        }
    }
    found
}

/// Scores how similar candidate stimulus texts are to a query text.
pub trait SimilarityProvider: Send + Sync {
    fn similarities(&self, query: &str, candidates: &[&str]) -> Result<Vec<f64>>;
}

/// Cosine similarity of term-frequency vectors over lowercase alphanumeric
/// tokens. Deterministic and offline.
#[derive(Debug, Default, Clone, Copy)]
pub struct LexicalCosine;

fn term_frequencies(text: &str) -> BTreeMap<String, f64> {
    let mut tf = BTreeMap::new();
    for tok in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        *tf.entry(tok.to_lowercase()).or_insert(0.0) += 1.0;
    }
    tf
}

fn sparse_cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).min(1.0)
    }
}

impl SimilarityProvider for LexicalCosine {
    fn similarities(&self, query: &str, candidates: &[&str]) -> Result<Vec<f64>> {
        let q = term_frequencies(query);
        Ok(candidates
            .iter()
            .map(|c| sparse_cosine(&q, &term_frequencies(c)))
            .collect())
    }
}

pub fn dense_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Client for an embeddings endpoint speaking the common
/// `{"model", "input": [...]}` -> `{"data": [{"index", "embedding"}]}` shape.
/// Embeddings are cached per text.
pub struct EmbeddingClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

impl EmbeddingClient {
    /// `api_key_env` names the environment variable holding the bearer token.
    pub fn new(endpoint: &str, model: &str, api_key_env: &str) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(60))
            .build()
            .map_err(|e| Error::Http(e.to_string()))?;
        Ok(EmbeddingClient {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: std::env::var(api_key_env).ok(),
            http,
            cache: Mutex::new(HashMap::new()),
        })
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let missing: Vec<&str> = {
            let cache = self.cache.lock().expect("embedding cache poisoned");
            let mut m: Vec<&str> = texts.iter().copied().filter(|t| !cache.contains_key(*t)).collect();
            m.sort_unstable();
            m.dedup();
            m
        };
        if !missing.is_empty() {
            let mut req = self
                .http
                .post(&self.endpoint)
                .json(&serde_json::json!({ "model": self.model, "input": missing }));
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req.send().map_err(|e| Error::Http(e.to_string()))?;
            if !resp.status().is_success() {
                return Err(Error::Http(format!("embeddings endpoint returned {}", resp.status())));
            }
            let body: EmbeddingResponse = resp.json().map_err(|e| Error::Http(e.to_string()))?;
            let mut cache = self.cache.lock().expect("embedding cache poisoned");
            for d in body.data {
                let text = missing
                    .get(d.index)
                    .ok_or_else(|| Error::Http(format!("embedding index {} out of range", d.index)))?;
                cache.insert((*text).to_string(), d.embedding);
            }
        }
        let cache = self.cache.lock().expect("embedding cache poisoned");
        texts
            .iter()
            .map(|t| {
                cache
                    .get(*t)
                    .cloned()
                    .ok_or_else(|| Error::Http("embedding missing from response".into()))
            })
            .collect()
    }
}

impl SimilarityProvider for EmbeddingClient {
    fn similarities(&self, query: &str, candidates: &[&str]) -> Result<Vec<f64>> {
        let mut all = vec![query];
        all.extend_from_slice(candidates);
        let vecs = self.embed(&all)?;
        Ok(vecs[1..].iter().map(|v| dense_cosine(&vecs[0], v)).collect())
    }
}

/// Train-split records grouped by stimulus, with each stimulus's text.
pub struct FewShotPool<'a> {
    buckets: BTreeMap<StimulusKey, Vec<&'a ResponseRecord>>,
    texts: BTreeMap<StimulusKey, String>,
}

impl<'a> FewShotPool<'a> {
    pub fn new(
        studies: &BTreeMap<String, StudyManifest>,
        records: impl IntoIterator<Item = &'a ResponseRecord>,
    ) -> Result<Self> {
        let buckets = crate::corpus::index_records(records);
        let mut texts = BTreeMap::new();
        for key in buckets.keys() {
            let m = studies.get(&key.study_id).ok_or_else(|| Error::UnknownKey {
                kind: "study",
                id: key.study_id.clone(),
            })?;
            texts.insert(key.clone(), compose_stimulus(m, &key.condition_id, &key.outcome_id)?);
        }
        Ok(FewShotPool { buckets, texts })
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSelection {
    pub neighbor: StimulusKey,
    pub similarity: f64,
    pub exemplars: Vec<Exemplar>,
    /// Fewer than `k` distinct participants were available.
    pub short: bool,
}

/// Picks the most similar train stimulus (exact text match first, ties to
/// the smallest key) and samples `k` distinct participants from it.
pub fn select_fewshot(
    query: &StimulusKey,
    query_text: &str,
    pool: &FewShotPool<'_>,
    k: usize,
    sim: &dyn SimilarityProvider,
    seed: u64,
) -> Result<FewShotSelection> {
    if pool.is_empty() {
        return Err(Error::Empty("few-shot pool"));
    }
    let (neighbor, similarity) = match pool.texts.iter().find(|(_, t)| t.as_str() == query_text) {
        Some((key, _)) => (key.clone(), 1.0),
        None => {
            let keys: Vec<&StimulusKey> = pool.texts.keys().collect();
            let texts: Vec<&str> = pool.texts.values().map(String::as_str).collect();
            let scores = sim.similarities(query_text, &texts)?;
            let mut best = 0;
            for i in 1..scores.len() {
                // keys are sorted, so strict > keeps the smallest key on ties
                if scores[i] > scores[best] {
                    best = i;
                }
            }
            (keys[best].clone(), scores[best])
        }
    };

    let mut by_participant: BTreeMap<&str, &ResponseRecord> = BTreeMap::new();
    for r in &pool.buckets[&neighbor] {
        by_participant.entry(r.participant_id.as_str()).or_insert(r);
    }
    let candidates: Vec<&ResponseRecord> = by_participant.into_values().collect();
    let mut rng = keyed_rng(seed, &format!("fewshot:{query}"));
    let chosen: Vec<&ResponseRecord> = candidates
        .choose_multiple(&mut rng, k.min(candidates.len()))
        .copied()
        .collect();
    let short = chosen.len() < k;
    if short {
        tracing::warn!(%query, available = chosen.len(), k, "fewer few-shot participants than requested");
    }
    let text = &pool.texts[&neighbor];
    Ok(FewShotSelection {
        exemplars: chosen
            .into_iter()
            .map(|r| Exemplar {
                participant_id: r.participant_id.clone(),
                stimulus_text: text.clone(),
                persona: r.persona.clone(),
                answer: r.response,
            })
            .collect(),
        neighbor,
        similarity,
        short,
    })
}
