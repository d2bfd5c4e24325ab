//! Canonical data model, ingestion, validation and response standardization.
//!
//! Two on-disk layouts are supported:
//!
//! - `jsonl`: a directory holding `manifests/<study>.json` (one
//!   [`StudyManifest`] per file) and `responses.jsonl` (one
//!   [`ResponseRecord`] per line).
//! - `csv_pair`: a directory holding `manifest.csv` and `responses.csv`.
//!   Persona attributes are the trailing columns of `responses.csv`; an empty
//!   cell means the attribute was not reported for that participant.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, RowIssue};

/// Demographic attributes of one participant, in source order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Persona {
    attributes: IndexMap<String, String>,
}

impl Persona {
    pub fn new<K, V>(attributes: impl IntoIterator<Item = (K, V)>) -> Result<Self>
    where
        K: Into<String>,
        V: Into<String>,
    {
        let mut map = IndexMap::new();
        for (k, v) in attributes {
            let k = k.into();
            if map.insert(k.clone(), v.into()).is_some() {
                return Err(Error::InvalidCorpus(format!(
                    "duplicate persona attribute `{k}`"
                )));
            }
        }
        if map.is_empty() {
            return Err(Error::InvalidCorpus("persona has no attributes".into()));
        }
        Ok(Persona { attributes: map })
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.attributes.get(name).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.attributes
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }
}

/// Bounds of an ordinal or binary response scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseScale {
    pub min: i64,
    pub max: i64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<i64, String>,
}

impl ResponseScale {
    pub fn new(min: i64, max: i64) -> Result<Self> {
        if max <= min {
            return Err(Error::DegenerateScale { min, max });
        }
        Ok(ResponseScale {
            min,
            max,
            labels: BTreeMap::new(),
        })
    }

    pub fn with_labels(mut self, labels: impl IntoIterator<Item = (i64, String)>) -> Result<Self> {
        for (k, v) in labels {
            if !(self.min..=self.max).contains(&k) {
                return Err(Error::OutOfScale {
                    value: k,
                    min: self.min,
                    max: self.max,
                });
            }
            self.labels.insert(k, v);
        }
        Ok(self)
    }

    pub fn contains(&self, r: i64) -> bool {
        (self.min..=self.max).contains(&r)
    }

    pub fn width(&self) -> i64 {
        self.max - self.min
    }

    pub fn points(&self) -> std::ops::RangeInclusive<i64> {
        self.min..=self.max
    }

    pub fn clamp(&self, r: i64) -> i64 {
        r.clamp(self.min, self.max)
    }
}

/// Maps `r` on `scale` to the unit interval: `(r - min) / (max - min)`.
pub fn standardize_response(r: i64, scale: &ResponseScale) -> Result<f64> {
    if scale.max <= scale.min {
        return Err(Error::DegenerateScale {
            min: scale.min,
            max: scale.max,
        });
    }
    if !scale.contains(r) {
        return Err(Error::OutOfScale {
            value: r,
            min: scale.min,
            max: scale.max,
        });
    }
    Ok(standardize(r, scale.min, scale.max))
}

/// Unchecked affine map used by the metrics, where predictions may fall
/// outside observed bounds.
pub(crate) fn standardize(r: i64, min: i64, max: i64) -> f64 {
    (r - min) as f64 / (max - min) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    BetweenSubject,
    WithinSubject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub condition_id: String,
    /// Description of the stimulus shown under this condition.
    pub stimulus: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub outcome_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<i64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<i64, String>,
    /// Overrides the generated response-format instruction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
}

impl Outcome {
    /// The declared scale, if both bounds are present and non-degenerate.
    pub fn scale(&self) -> Option<ResponseScale> {
        let (min, max) = (self.min?, self.max?);
        ResponseScale::new(min, max)
            .ok()?
            .with_labels(self.labels.clone())
            .ok()
    }
}

/// A stimulus text stored already composed for one (condition, outcome) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedStimulus {
    pub condition_id: String,
    pub outcome_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyManifest {
    pub study_id: String,
    pub design: Design,
    pub conditions: Vec<Condition>,
    pub outcomes: Vec<Outcome>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stimuli: Vec<ComposedStimulus>,
}

impl StudyManifest {
    pub fn condition(&self, id: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.condition_id == id)
    }

    pub fn outcome(&self, id: &str) -> Option<&Outcome> {
        self.outcomes.iter().find(|o| o.outcome_id == id)
    }

    pub fn composed_stimulus(&self, condition_id: &str, outcome_id: &str) -> Option<&str> {
        self.stimuli
            .iter()
            .find(|s| s.condition_id == condition_id && s.outcome_id == outcome_id)
            .map(|s| s.text.as_str())
    }

    fn check_structure(&self) -> std::result::Result<(), String> {
        if self.conditions.is_empty() {
            return Err("no conditions".into());
        }
        if self.outcomes.is_empty() {
            return Err("no outcomes".into());
        }
        let mut seen = HashSet::new();
        for c in &self.conditions {
            if !seen.insert(c.condition_id.as_str()) {
                return Err(format!("duplicate condition `{}`", c.condition_id));
            }
        }
        seen.clear();
        for o in &self.outcomes {
            if !seen.insert(o.outcome_id.as_str()) {
                return Err(format!("duplicate outcome `{}`", o.outcome_id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub study_id: String,
    pub participant_id: String,
    pub persona: Persona,
    pub condition_id: String,
    pub outcome_id: String,
    pub response: i64,
}

impl ResponseRecord {
    pub fn stimulus_key(&self) -> StimulusKey {
        StimulusKey {
            study_id: self.study_id.clone(),
            condition_id: self.condition_id.clone(),
            outcome_id: self.outcome_id.clone(),
        }
    }

    pub fn record_key(&self) -> RecordKey {
        RecordKey {
            study_id: self.study_id.clone(),
            participant_id: self.participant_id.clone(),
            condition_id: self.condition_id.clone(),
            outcome_id: self.outcome_id.clone(),
        }
    }
}

/// A (study, condition, outcome) triple.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StimulusKey {
    pub study_id: String,
    pub condition_id: String,
    pub outcome_id: String,
}

impl fmt::Display for StimulusKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.study_id, self.condition_id, self.outcome_id)
    }
}

/// Identifies one response: who answered which stimulus.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordKey {
    pub study_id: String,
    pub participant_id: String,
    pub condition_id: String,
    pub outcome_id: String,
}

impl RecordKey {
    pub fn stimulus_key(&self) -> StimulusKey {
        StimulusKey {
            study_id: self.study_id.clone(),
            condition_id: self.condition_id.clone(),
            outcome_id: self.outcome_id.clone(),
        }
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.study_id, self.participant_id, self.condition_id, self.outcome_id
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub path: PathBuf,
    pub ingested_at: DateTime<Utc>,
}

/// Validated, immutable collection of studies and their responses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    studies: BTreeMap<String, StudyManifest>,
    records: Vec<ResponseRecord>,
    source: Option<SourceInfo>,
}

impl PartialEq for Corpus {
    /// Content equality; ingest metadata is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.studies == other.studies && self.records == other.records
    }
}

impl Corpus {
    /// Builds a corpus, checking every cross-reference. All row problems are
    /// collected before failing.
    pub fn new(studies: Vec<StudyManifest>, records: Vec<ResponseRecord>) -> Result<Self> {
        let located: Vec<_> = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| (format!("record #{}", i + 1), r))
            .collect();
        let (corpus, issues) = Self::assemble(studies, located, false)?;
        debug_assert!(issues.is_empty());
        Ok(corpus)
    }

    fn assemble(
        studies: Vec<StudyManifest>,
        records: Vec<(String, ResponseRecord)>,
        skip_invalid: bool,
    ) -> Result<(Self, Vec<RowIssue>)> {
        let mut by_id = BTreeMap::new();
        for m in studies {
            m.check_structure()
                .map_err(|e| Error::InvalidCorpus(format!("study `{}`: {e}", m.study_id)))?;
            let id = m.study_id.clone();
            if by_id.insert(id.clone(), m).is_some() {
                return Err(Error::InvalidCorpus(format!("duplicate study `{id}`")));
            }
        }

        let mut issues = Vec::new();
        let mut kept = Vec::with_capacity(records.len());
        let mut seen = HashSet::new();
        for (locator, rec) in records {
            match check_record(&by_id, &rec) {
                Err(message) => issues.push(RowIssue { locator, message }),
                Ok(()) => {
                    if seen.insert(rec.record_key()) {
                        kept.push(rec);
                    } else {
                        issues.push(RowIssue {
                            locator,
                            message: format!(
                                "duplicate (participant, condition, outcome) key {}",
                                rec.record_key()
                            ),
                        });
                    }
                }
            }
        }
        if !issues.is_empty() && !skip_invalid {
            return Err(Error::Rejected(issues));
        }

        let with_records: BTreeSet<&str> = kept.iter().map(|r| r.study_id.as_str()).collect();
        if let Some(empty) = by_id.keys().find(|id| !with_records.contains(id.as_str())) {
            return Err(Error::InvalidCorpus(format!("study `{empty}` has no records")));
        }

        Ok((
            Corpus {
                studies: by_id,
                records: kept,
                source: None,
            },
            issues,
        ))
    }

    pub fn studies(&self) -> &BTreeMap<String, StudyManifest> {
        &self.studies
    }

    pub fn study(&self, id: &str) -> Option<&StudyManifest> {
        self.studies.get(id)
    }

    pub fn records(&self) -> &[ResponseRecord] {
        &self.records
    }

    pub fn source(&self) -> Option<&SourceInfo> {
        self.source.as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn outcome(&self, key: &StimulusKey) -> Option<&Outcome> {
        self.studies.get(&key.study_id)?.outcome(&key.outcome_id)
    }

    /// SHA-256 over the canonical JSON of studies and records, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for m in self.studies.values() {
            hasher.update(serde_json::to_vec(m).expect("manifest serializes"));
            hasher.update(b"\n");
        }
        for r in &self.records {
            hasher.update(serde_json::to_vec(r).expect("record serializes"));
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// Participant ids per study, sorted.
    pub fn participants(&self, study_id: &str) -> BTreeSet<&str> {
        self.records
            .iter()
            .filter(|r| r.study_id == study_id)
            .map(|r| r.participant_id.as_str())
            .collect()
    }
}

fn check_record(
    studies: &BTreeMap<String, StudyManifest>,
    rec: &ResponseRecord,
) -> std::result::Result<(), String> {
    let study = studies
        .get(&rec.study_id)
        .ok_or_else(|| format!("unknown study `{}`", rec.study_id))?;
    if study.condition(&rec.condition_id).is_none() {
        return Err(format!(
            "unknown condition `{}` in study `{}`",
            rec.condition_id, rec.study_id
        ));
    }
    let outcome = study.outcome(&rec.outcome_id).ok_or_else(|| {
        format!(
            "unknown outcome `{}` in study `{}`",
            rec.outcome_id, rec.study_id
        )
    })?;
    if let (Some(min), Some(max)) = (outcome.min, outcome.max) {
        if !(min..=max).contains(&rec.response) {
            return Err(format!(
                "response {} outside scale [{min}, {max}] of outcome `{}`",
                rec.response, rec.outcome_id
            ));
        }
    }
    if rec.persona.is_empty() {
        return Err("persona has no attributes".into());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    Jsonl,
    CsvPair,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "csv_pair" | "csv-pair" | "csv" => Ok(CorpusFormat::CsvPair),
            other => Err(Error::Unsupported(format!("corpus format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Drop invalid rows (reported in [`Loaded::skipped`]) instead of failing.
    pub skip_invalid: bool,
}

#[derive(Debug)]
pub struct Loaded {
    pub corpus: Corpus,
    pub skipped: Vec<RowIssue>,
}

pub fn load_corpus(path: &Path, format: CorpusFormat, options: LoadOptions) -> Result<Loaded> {
    if !path.is_dir() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        ));
    }
    let (studies, mut rows, parse_issues) = match format {
        CorpusFormat::Jsonl => read_jsonl(path)?,
        CorpusFormat::CsvPair => read_csv_pair(path)?,
    };
    if !parse_issues.is_empty() && !options.skip_invalid {
        return Err(Error::Rejected(parse_issues));
    }
    let records = std::mem::take(&mut rows);
    let (mut corpus, mut issues) = Corpus::assemble(studies, records, options.skip_invalid)?;
    let mut skipped = parse_issues;
    skipped.append(&mut issues);
    for issue in &skipped {
        tracing::warn!(%issue, "skipped invalid row");
    }
    corpus.source = Some(SourceInfo {
        path: path.to_path_buf(),
        ingested_at: Utc::now(),
    });
    Ok(Loaded { corpus, skipped })
}

type RawInput = (Vec<StudyManifest>, Vec<(String, ResponseRecord)>, Vec<RowIssue>);

fn read_jsonl(dir: &Path) -> Result<RawInput> {
    let manifest_dir = dir.join("manifests");
    let mut manifest_paths: Vec<PathBuf> = fs::read_dir(&manifest_dir)
        .map_err(|e| Error::io(&manifest_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    manifest_paths.sort();
    let mut studies = Vec::new();
    for p in manifest_paths {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let m: StudyManifest = serde_json::from_str(&text).map_err(|e| {
            Error::InvalidCorpus(format!("{}: {e}", p.display()))
        })?;
        studies.push(m);
    }

    let responses = dir.join("responses.jsonl");
    let file = fs::File::open(&responses).map_err(|e| Error::io(&responses, e))?;
    let mut rows = Vec::new();
    let mut issues = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&responses, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let locator = format!("responses.jsonl:{}", i + 1);
        match serde_json::from_str::<ResponseRecord>(&line) {
            Ok(r) => rows.push((locator, r)),
            Err(e) => issues.push(RowIssue {
                locator,
                message: e.to_string(),
            }),
        }
    }
    Ok((studies, rows, issues))
}

const CSV_FIXED: [&str; 5] = [
    "study_id",
    "participant_id",
    "condition_id",
    "outcome_id",
    "response",
];

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    study_id: String,
    design: Design,
    kind: String,
    id: String,
    #[serde(default)]
    outcome_id: String,
    text: String,
    min: Option<i64>,
    max: Option<i64>,
    /// JSON object of label strings keyed by scale point.
    #[serde(default)]
    labels: String,
    #[serde(default)]
    instruction: String,
}

fn read_csv_pair(dir: &Path) -> Result<RawInput> {
    let manifest_path = dir.join("manifest.csv");
    let mut reader =
        csv::Reader::from_path(&manifest_path).map_err(|e| csv_open_error(&manifest_path, e))?;
    let mut studies: IndexMap<String, StudyManifest> = IndexMap::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let locator = format!("manifest.csv:{}", i + 2);
        let row = row.map_err(|e| Error::InvalidCorpus(format!("{locator}: {e}")))?;
        let m = studies
            .entry(row.study_id.clone())
            .or_insert_with(|| StudyManifest {
                study_id: row.study_id.clone(),
                design: row.design,
                conditions: vec![],
                outcomes: vec![],
                stimuli: vec![],
            });
        match row.kind.as_str() {
            "condition" => m.conditions.push(Condition {
                condition_id: row.id,
                stimulus: row.text,
            }),
            "outcome" => {
                let labels = if row.labels.trim().is_empty() {
                    BTreeMap::new()
                } else {
                    serde_json::from_str(&row.labels)
                        .map_err(|e| Error::InvalidCorpus(format!("{locator}: labels: {e}")))?
                };
                m.outcomes.push(Outcome {
                    outcome_id: row.id,
                    question: row.text,
                    min: row.min,
                    max: row.max,
                    labels,
                    instruction: (!row.instruction.is_empty()).then_some(row.instruction),
                })
            }
            "stimulus" => m.stimuli.push(ComposedStimulus {
                condition_id: row.id,
                outcome_id: row.outcome_id,
                text: row.text,
            }),
            other => {
                return Err(Error::InvalidCorpus(format!(
                    "{locator}: unknown row kind `{other}`"
                )))
            }
        }
    }

    let responses_path = dir.join("responses.csv");
    let mut reader =
        csv::Reader::from_path(&responses_path).map_err(|e| csv_open_error(&responses_path, e))?;
    let headers = reader.headers()?.clone();
    for (i, name) in CSV_FIXED.iter().enumerate() {
        if headers.get(i) != Some(name) {
            return Err(Error::InvalidCorpus(format!(
                "responses.csv: column {} must be `{name}`",
                i + 1
            )));
        }
    }
    let attr_names: Vec<String> = headers.iter().skip(CSV_FIXED.len()).map(String::from).collect();
    let mut rows = Vec::new();
    let mut issues = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let locator = format!("responses.csv:{}", i + 2);
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                issues.push(RowIssue {
                    locator,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let response = match rec[4].trim().parse::<i64>() {
            Ok(v) => v,
            Err(e) => {
                issues.push(RowIssue {
                    locator,
                    message: format!("response `{}`: {e}", &rec[4]),
                });
                continue;
            }
        };
        let attrs = attr_names
            .iter()
            .zip(rec.iter().skip(CSV_FIXED.len()))
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| (k.clone(), v.to_string()));
        let persona = match Persona::new(attrs) {
            Ok(p) => p,
            Err(e) => {
                issues.push(RowIssue {
                    locator,
                    message: e.to_string(),
                });
                continue;
            }
        };
        rows.push((
            locator,
            ResponseRecord {
                study_id: rec[0].to_string(),
                participant_id: rec[1].to_string(),
                persona,
                condition_id: rec[2].to_string(),
                outcome_id: rec[3].to_string(),
                response,
            },
        ));
    }
    Ok((studies.into_values().collect(), rows, issues))
}

fn csv_open_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidCorpus(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `corpus` in the given layout; [`load_corpus`] reads it back unchanged.
pub fn write_corpus(corpus: &Corpus, dir: &Path, format: CorpusFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match format {
        CorpusFormat::Jsonl => {
            let mdir = dir.join("manifests");
            fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
            for (i, m) in corpus.studies.values().enumerate() {
                // index prefix keeps file order equal to study order
                let p = mdir.join(format!("{i:05}_{}.json", sanitize(&m.study_id)));
                let mut text = serde_json::to_string_pretty(m)?;
                text.push('\n');
                fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            }
            let p = dir.join("responses.jsonl");
            let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            let mut w = BufWriter::new(f);
            for r in &corpus.records {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n").map_err(|e| Error::io(&p, e))?;
            }
            w.flush().map_err(|e| Error::io(&p, e))?;
        }
        CorpusFormat::CsvPair => {
            let p = dir.join("manifest.csv");
            let mut w = csv::Writer::from_path(&p).map_err(|e| csv_open_error(&p, e))?;
            for m in corpus.studies.values() {
                let base = |kind: &str, id: &str, text: &str| ManifestRow {
                    study_id: m.study_id.clone(),
                    design: m.design,
                    kind: kind.into(),
                    id: id.into(),
                    outcome_id: String::new(),
                    text: text.into(),
                    min: None,
                    max: None,
                    labels: String::new(),
                    instruction: String::new(),
                };
                for c in &m.conditions {
                    w.serialize(base("condition", &c.condition_id, &c.stimulus))?;
                }
                for o in &m.outcomes {
                    let mut row = base("outcome", &o.outcome_id, &o.question);
                    row.min = o.min;
                    row.max = o.max;
                    if !o.labels.is_empty() {
                        row.labels = serde_json::to_string(&o.labels)?;
                    }
                    row.instruction = o.instruction.clone().unwrap_or_default();
                    w.serialize(row)?;
                }
                for s in &m.stimuli {
                    let mut row = base("stimulus", &s.condition_id, &s.text);
                    row.outcome_id = s.outcome_id.clone();
                    w.serialize(row)?;
                }
            }
            w.flush().map_err(|e| Error::io(&p, e))?;

            let mut attrs: IndexMap<&str, ()> = IndexMap::new();
            for r in &corpus.records {
                for (k, _) in r.persona.iter() {
                    attrs.entry(k).or_default();
                }
            }
            let p = dir.join("responses.csv");
            let mut w = csv::Writer::from_path(&p).map_err(|e| csv_open_error(&p, e))?;
            let header: Vec<&str> = CSV_FIXED.iter().copied().chain(attrs.keys().copied()).collect();
            w.write_record(&header)?;
            for r in &corpus.records {
                let response = r.response.to_string();
                let mut row: Vec<&str> = vec![
                    &r.study_id,
                    &r.participant_id,
                    &r.condition_id,
                    &r.outcome_id,
                    &response,
                ];
                row.extend(attrs.keys().map(|k| r.persona.get(k).unwrap_or("")));
                w.write_record(&row)?;
            }
            w.flush().map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Groups records by stimulus. Buckets and keys are in sorted order; records
/// keep their corpus order within a bucket.
pub fn index_by_stimulus(corpus: &Corpus) -> BTreeMap<StimulusKey, Vec<&ResponseRecord>> {
    index_records(corpus.records())
}

pub fn index_records<'a>(
    records: impl IntoIterator<Item = &'a ResponseRecord>,
) -> BTreeMap<StimulusKey, Vec<&'a ResponseRecord>> {
    let mut map: BTreeMap<StimulusKey, Vec<&ResponseRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.stimulus_key()).or_default().push(r);
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundsPolicy {
    /// Declared manifest bounds, falling back to observed bounds.
    #[default]
    Declared,
    /// Observed per-stimulus bounds, falling back to declared bounds when the
    /// observed range is degenerate.
    Observed,
}

impl FromStr for BoundsPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "declared" => Ok(BoundsPolicy::Declared),
            "observed" => Ok(BoundsPolicy::Observed),
            other => Err(Error::Unsupported(format!("bounds policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundsSource {
    Declared,
    Observed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedBounds {
    pub min: i64,
    pub max: i64,
    pub source: BoundsSource,
}

impl ResolvedBounds {
    pub fn width(&self) -> i64 {
        self.max - self.min
    }

    pub fn standardize(&self, r: i64) -> f64 {
        standardize(r, self.min, self.max)
    }

    pub fn as_scale(&self) -> ResponseScale {
        ResponseScale {
            min: self.min,
            max: self.max,
            labels: BTreeMap::new(),
        }
    }
}

/// Picks the standardization bounds for one stimulus given its ground-truth
/// responses. `None` when neither source yields a non-degenerate range.
pub fn resolve_bounds(
    outcome: &Outcome,
    observed: impl IntoIterator<Item = i64>,
    policy: BoundsPolicy,
) -> Option<ResolvedBounds> {
    let declared = outcome.scale().map(|s| ResolvedBounds {
        min: s.min,
        max: s.max,
        source: BoundsSource::Declared,
    });
    let mut it = observed.into_iter();
    let observed = it.next().and_then(|first| {
        let (lo, hi) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
        (hi > lo).then_some(ResolvedBounds {
            min: lo,
            max: hi,
            source: BoundsSource::Observed,
        })
    });
    match policy {
        BoundsPolicy::Declared => declared.or(observed),
        BoundsPolicy::Observed => observed.or(declared),
    }
}

/// Rule families checked by [`validate_study`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rule {
    /// Every condition describes its stimulus.
    #[serde(rename = "R1_condition_stimulus")]
    ConditionStimulus,
    /// Every outcome is ordinal or binary with declared numeric bounds.
    #[serde(rename = "R2_ordinal_outcome")]
    OrdinalOutcome,
    /// Every record's (condition, outcome) maps to a condition-specific stimulus.
    #[serde(rename = "R3_stimulus_mapping")]
    StimulusMapping,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::ConditionStimulus => "R1_condition_stimulus",
            Rule::OrdinalOutcome => "R2_ordinal_outcome",
            Rule::StimulusMapping => "R3_stimulus_mapping",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub message: String,
    pub locator: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub study_id: String,
    pub passed: bool,
    pub violations: Vec<Violation>,
}

pub fn validate_study(manifest: &StudyManifest, records: &[ResponseRecord]) -> ValidationReport {
    let mut violations = Vec::new();
    for c in &manifest.conditions {
        if c.stimulus.trim().is_empty() {
            violations.push(Violation {
                rule: Rule::ConditionStimulus,
                message: format!("condition `{}` has no stimulus description", c.condition_id),
                locator: format!("condition {}", c.condition_id),
            });
        }
    }
    for o in &manifest.outcomes {
        let message = match (o.min, o.max) {
            (Some(min), Some(max)) if max <= min => {
                Some(format!("degenerate bounds [{min}, {max}]"))
            }
            (Some(min), Some(max)) => o
                .labels
                .keys()
                .find(|k| !(min..=max).contains(*k))
                .map(|k| format!("label key {k} outside [{min}, {max}]")),
            _ if o.labels.is_empty() => Some("no numeric bounds".to_string()),
            _ => Some("labels without numeric bounds".to_string()),
        };
        if let Some(message) = message {
            violations.push(Violation {
                rule: Rule::OrdinalOutcome,
                message: format!("outcome `{}`: {message}", o.outcome_id),
                locator: format!("outcome {}", o.outcome_id),
            });
        }
    }
    for (i, r) in records.iter().enumerate() {
        let locator = format!("record #{} (participant {})", i + 1, r.participant_id);
        let problem = if r.study_id != manifest.study_id {
            Some(format!("record belongs to study `{}`", r.study_id))
        } else if let Some(text) = manifest.composed_stimulus(&r.condition_id, &r.outcome_id) {
            text.trim().is_empty().then(|| "composed stimulus is empty".to_string())
        } else {
            match (
                manifest.condition(&r.condition_id),
                manifest.outcome(&r.outcome_id),
            ) {
                (None, _) => Some(format!("unknown condition `{}`", r.condition_id)),
                (_, None) => Some(format!("unknown outcome `{}`", r.outcome_id)),
                (Some(c), Some(_)) if c.stimulus.trim().is_empty() => Some(format!(
                    "no stimulus for ({}, {})",
                    r.condition_id, r.outcome_id
                )),
                _ => None,
            }
        };
        if let Some(message) = problem {
            violations.push(Violation {
                rule: Rule::StimulusMapping,
                message,
                locator,
            });
        }
    }
    ValidationReport {
        study_id: manifest.study_id.clone(),
        passed: violations.is_empty(),
        violations,
    }
}

/// Validates every study of a corpus, in study-id order.
pub fn validate_corpus(corpus: &Corpus) -> Vec<ValidationReport> {
    let mut per_study: BTreeMap<&str, Vec<ResponseRecord>> = BTreeMap::new();
    for r in corpus.records() {
        per_study.entry(&r.study_id).or_default().push(r.clone());
    }
    corpus
        .studies()
        .values()
        .map(|m| {
            let recs = per_study.remove(m.study_id.as_str()).unwrap_or_default();
            validate_study(m, &recs)
        })
        .collect()
}
