//! Accuracy, Wasserstein alignment, reference bounds, relative change and
//! demographic breakdowns.
//!
//! Everything is computed per (condition, outcome) stimulus, averaged per
//! study, then averaged across studies. Iteration is over sorted keys so
//! floating-point sums are reproducible.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{midpoint, PredictionRecord};
use crate::corpus::{
    index_records, resolve_bounds, BoundsPolicy, BoundsSource, Corpus, RecordKey, ResolvedBounds,
    ResponseRecord, StimulusKey,
};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Exact 1-Wasserstein distance between two empirical measures on the line.
///
/// Integrates |F_a − F_b| over the merged support, so sample sizes may differ.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("wasserstein input"));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::InvalidCorpus("non-finite value in wasserstein input".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut total = 0.0;
    let mut x = a[0].min(b[0]);
    // |i/na - j/nb| == |i*nb - j*na| / (na*nb); keep the numerator integral.
    while i < na || j < nb {
        let next = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        let gap = (i * nb).abs_diff(j * na) as f64;
        total += gap * (next - x);
        x = next;
        while i < na && a[i] == next {
            i += 1;
        }
        while j < nb && b[j] == next {
            j += 1;
        }
    }
    Ok(total / (na * nb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// Percent change from `base` to `method`, positive when the method is
/// better under `direction`. `None` when `base` is zero.
pub fn relative_change(method: f64, base: f64, direction: Direction) -> Option<f64> {
    if base == 0.0 || !base.is_finite() || !method.is_finite() {
        return None;
    }
    let magnitude = (method - base).abs() / base.abs() * 100.0;
    let improved = match direction {
        Direction::HigherBetter => method > base,
        Direction::LowerBetter => method < base,
    };
    Some(if improved { magnitude } else { -magnitude })
}

/// Gap between the best- and worst-aligned subgroups of one category.
pub fn demographic_parity(scores: &BTreeMap<String, f64>) -> Option<f64> {
    let mut it = scores.values().copied();
    let first = it.next()?;
    let (lo, hi) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
    Some(hi - lo)
}

/// Relative parity reduction from `base` to `method` (smaller gaps are better).
pub fn parity_reduction(method: f64, base: f64) -> Option<f64> {
    relative_change(method, base, Direction::LowerBetter)
}

/// Mean parity reduction over the categories present in both maps.
pub fn mean_parity_reduction(
    method: &BTreeMap<String, f64>,
    base: &BTreeMap<String, f64>,
) -> Option<f64> {
    let changes: Vec<f64> = method
        .iter()
        .filter_map(|(cat, m)| base.get(cat).and_then(|b| parity_reduction(*m, *b)))
        .collect();
    (!changes.is_empty()).then(|| changes.iter().sum::<f64>() / changes.len() as f64)
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Some((ss / (n - 1.0)).sqrt())
}

/// 1 − mean |pred − truth| / width over the given pairs.
pub fn normalized_accuracy(pairs: &[(i64, i64)], bounds: &ResolvedBounds) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let w = bounds.width() as f64;
    let err: f64 = pairs.iter().map(|(p, r)| (p - r).abs() as f64 / w).sum();
    Some(1.0 - err / pairs.len() as f64)
}

/// Mean over `n_boot` bootstrap resamples of W1(resample, truths).
pub fn bootstrap_self_distance(truths: &[f64], n_boot: usize, rng: &mut impl Rng) -> Result<f64> {
    if truths.is_empty() {
        return Err(Error::Empty("bootstrap sample"));
    }
    if n_boot == 0 {
        return Err(Error::Config("n_boot must be >= 1".into()));
    }
    let mut sum = 0.0;
    let mut sample = vec![0.0; truths.len()];
    for _ in 0..n_boot {
        for s in sample.iter_mut() {
            *s = truths[rng.gen_range(0..truths.len())];
        }
        sum += wasserstein_1d(&sample, truths)?;
    }
    Ok(sum / n_boot as f64)
}

/// Uniform-guess reference for one stimulus: W1 between the truths and the
/// discrete uniform over the scale points, and the exact expected accuracy of
/// guessing uniformly.
pub fn uniform_guess(truths: &[i64], bounds: &ResolvedBounds) -> Result<(f64, f64)> {
    let std_truths: Vec<f64> = truths.iter().map(|r| bounds.standardize(*r)).collect();
    let points: Vec<f64> = (bounds.min..=bounds.max).map(|g| bounds.standardize(g)).collect();
    let alignment = wasserstein_1d(&std_truths, &points)?;
    let k = points.len() as f64;
    let w = bounds.width() as f64;
    let mut err = 0.0;
    for r in truths {
        for g in bounds.min..=bounds.max {
            err += (g - r).abs() as f64 / w;
        }
    }
    let accuracy = 1.0 - err / (k * truths.len() as f64);
    Ok((alignment, accuracy))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailPolicy {
    /// Drop from numerator and denominator; the count is reported.
    #[default]
    Exclude,
    /// Score as the scale midpoint.
    Midpoint,
}

impl FromStr for ParseFailPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude" => Ok(ParseFailPolicy::Exclude),
            "midpoint" => Ok(ParseFailPolicy::Midpoint),
            other => Err(Error::Unsupported(format!("parse-fail policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Each study counts once.
    #[default]
    StudyMacro,
    /// Each scored record counts once; alignment is weighted by bucket size.
    RecordWeighted,
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "study_macro" | "study" => Ok(Weighting::StudyMacro),
            "record_weighted" | "record" => Ok(Weighting::RecordWeighted),
            other => Err(Error::Unsupported(format!("weighting `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub bounds: BoundsPolicy,
    pub parse_fail: ParseFailPolicy,
    pub weighting: Weighting,
    /// Minimum truth responses for a stimulus to count in a subgroup.
    pub min_n: usize,
    pub n_boot: usize,
    pub seed: u64,
    /// Persona attributes to break down by. `None` means every attribute
    /// seen in the evaluation records.
    pub subgroup_categories: Option<Vec<String>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            bounds: BoundsPolicy::Declared,
            parse_fail: ParseFailPolicy::Exclude,
            weighting: Weighting::StudyMacro,
            min_n: 5,
            n_boot: 100,
            seed: 0,
            subgroup_categories: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinCounts {
    pub eval_records: usize,
    pub scored: usize,
    pub missing: usize,
    pub parse_failed: usize,
    pub parse_failed_as_midpoint: usize,
    pub clamped: usize,
    pub out_of_scale: usize,
    /// Predictions whose key is not an evaluation record.
    pub unmatched: usize,
    pub duplicate_predictions: usize,
    /// Stimuli without usable bounds; their records are not scored.
    pub unscorable_stimuli: usize,
    pub observed_bounds_stimuli: usize,
}

/// One evaluation record with its usable prediction, if any.
#[derive(Debug, Clone, Copy)]
pub struct Row<'a> {
    pub record: &'a ResponseRecord,
    pub predicted: Option<i64>,
}

/// Evaluation records grouped by stimulus and paired with predictions.
#[derive(Debug, Clone)]
pub struct Joined<'a> {
    pub buckets: BTreeMap<StimulusKey, Vec<Row<'a>>>,
    pub bounds: BTreeMap<StimulusKey, ResolvedBounds>,
    pub counts: JoinCounts,
}

impl<'a> Joined<'a> {
    /// Same bounds, restricted to rows whose record satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&ResponseRecord) -> bool) -> Joined<'a> {
        let buckets = self
            .buckets
            .iter()
            .filter_map(|(k, rows)| {
                let rows: Vec<Row<'a>> = rows.iter().copied().filter(|r| keep(r.record)).collect();
                (!rows.is_empty()).then(|| (k.clone(), rows))
            })
            .collect();
        Joined {
            buckets,
            bounds: self.bounds.clone(),
            counts: self.counts.clone(),
        }
    }
}

/// Pairs evaluation records with predictions. Bounds come from each
/// stimulus's evaluation truths under `policy`.
pub fn join<'a>(
    corpus: &'a Corpus,
    eval: &[&'a ResponseRecord],
    preds: &[PredictionRecord],
    options: &EvalOptions,
) -> Joined<'a> {
    let mut counts = JoinCounts {
        eval_records: eval.len(),
        ..JoinCounts::default()
    };
    let mut by_key: HashMap<&RecordKey, &PredictionRecord> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_key.insert(&p.key, p).is_some() {
            counts.duplicate_predictions += 1;
        }
    }
    let eval_keys: BTreeSet<RecordKey> = eval.iter().map(|r| r.record_key()).collect();
    counts.unmatched = by_key.keys().filter(|k| !eval_keys.contains(*k)).count();

    let mut buckets = BTreeMap::new();
    let mut bounds = BTreeMap::new();
    for (key, records) in index_records(eval.iter().copied()) {
        let outcome = corpus.outcome(&key);
        let b = outcome.and_then(|o| resolve_bounds(o, records.iter().map(|r| r.response), options.bounds));
        let Some(b) = b else {
            tracing::warn!(stimulus = %key, "no usable bounds; stimulus not scored");
            counts.unscorable_stimuli += 1;
            continue;
        };
        if b.source == BoundsSource::Observed {
            counts.observed_bounds_stimuli += 1;
        }
        let declared = outcome.and_then(|o| o.scale());
        let rows = records
            .into_iter()
            .map(|r| {
                let predicted = match by_key.get(&r.record_key()) {
                    None => {
                        counts.missing += 1;
                        None
                    }
                    Some(p) if p.is_failed() => {
                        counts.parse_failed += 1;
                        match options.parse_fail {
                            ParseFailPolicy::Exclude => None,
                            ParseFailPolicy::Midpoint => {
                                counts.parse_failed_as_midpoint += 1;
                                Some(midpoint(b.min, b.max))
                            }
                        }
                    }
                    Some(p) => {
                        let v = p.predicted.expect("checked by is_failed");
                        if p.flags.contains(&crate::backends::PredictionFlag::Clamped) {
                            counts.clamped += 1;
                        }
                        if declared.as_ref().is_some_and(|s| !s.contains(v)) {
                            counts.out_of_scale += 1;
                            None
                        } else {
                            Some(v)
                        }
                    }
                };
                if predicted.is_some() {
                    counts.scored += 1;
                }
                Row { record: r, predicted }
            })
            .collect();
        buckets.insert(key.clone(), rows);
        bounds.insert(key, b);
    }
    Joined {
        buckets,
        bounds,
        counts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusScore {
    #[serde(flatten)]
    pub key: StimulusKey,
    /// `None` when the stimulus has no usable predictions.
    pub wasserstein: Option<f64>,
    pub accuracy: Option<f64>,
    pub n_truth: usize,
    pub n_pred: usize,
    pub bounds_min: i64,
    pub bounds_max: i64,
    pub bounds_source: BoundsSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyScore {
    pub study_id: String,
    pub accuracy: Option<f64>,
    pub alignment: Option<f64>,
    pub n_scored: usize,
    pub n_stimuli: usize,
}

/// Hierarchical scores for one set of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub stimuli: Vec<StimulusScore>,
    pub studies: Vec<StudyScore>,
    pub accuracy: Option<f64>,
    pub alignment: Option<f64>,
    /// Stimuli below `min_n` truths, left out of the aggregate.
    pub skipped_small: usize,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn weighted_mean(values: impl IntoIterator<Item = (f64, usize)>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (v, w) in values {
        sum += v * w as f64;
        n += w;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Scores every stimulus of `joined` with at least `min_n` truths, then
/// aggregates to studies and to a macro value.
pub fn score(joined: &Joined<'_>, min_n: usize, weighting: Weighting) -> Result<Aggregate> {
    let mut stimuli = Vec::new();
    let mut skipped_small = 0;
    // study -> (|err|/w per scored record)
    let mut errors: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (key, rows) in &joined.buckets {
        if rows.len() < min_n.max(1) {
            skipped_small += 1;
            continue;
        }
        let b = &joined.bounds[key];
        let truths: Vec<f64> = rows.iter().map(|r| b.standardize(r.record.response)).collect();
        let pairs: Vec<(i64, i64)> = rows
            .iter()
            .filter_map(|r| r.predicted.map(|p| (p, r.record.response)))
            .collect();
        let preds: Vec<f64> = pairs.iter().map(|(p, _)| b.standardize(*p)).collect();
        let wasserstein = if preds.is_empty() {
            None
        } else {
            Some(wasserstein_1d(&truths, &preds)?)
        };
        let w = b.width() as f64;
        errors
            .entry(key.study_id.as_str())
            .or_default()
            .extend(pairs.iter().map(|(p, r)| (p - r).abs() as f64 / w));
        stimuli.push(StimulusScore {
            key: key.clone(),
            wasserstein,
            accuracy: normalized_accuracy(&pairs, b),
            n_truth: truths.len(),
            n_pred: preds.len(),
            bounds_min: b.min,
            bounds_max: b.max,
            bounds_source: b.source,
        });
    }

    let mut by_study: BTreeMap<&str, Vec<&StimulusScore>> = BTreeMap::new();
    for s in &stimuli {
        by_study.entry(s.key.study_id.as_str()).or_default().push(s);
    }
    let studies: Vec<StudyScore> = by_study
        .iter()
        .map(|(study, scores)| {
            let errs = errors.get(study).map(Vec::as_slice).unwrap_or(&[]);
            StudyScore {
                study_id: study.to_string(),
                accuracy: mean(errs.iter().map(|e| 1.0 - e)),
                alignment: mean(scores.iter().filter_map(|s| s.wasserstein)),
                n_scored: errs.len(),
                n_stimuli: scores.len(),
            }
        })
        .collect();

    let (accuracy, alignment) = match weighting {
        Weighting::StudyMacro => (
            mean(studies.iter().filter_map(|s| s.accuracy)),
            mean(studies.iter().filter_map(|s| s.alignment)),
        ),
        Weighting::RecordWeighted => (
            mean(errors.values().flatten().map(|e| 1.0 - e)),
            weighted_mean(stimuli.iter().filter_map(|s| s.wasserstein.map(|w| (w, s.n_truth)))),
        ),
    };
    Ok(Aggregate {
        stimuli,
        studies,
        accuracy,
        alignment,
        skipped_small,
    })
}

/// Per-study and macro normalized accuracy.
pub fn accuracy(joined: &Joined<'_>, weighting: Weighting) -> Result<(BTreeMap<String, f64>, Option<f64>)> {
    let agg = score(joined, 1, weighting)?;
    let per_study = agg
        .studies
        .iter()
        .filter_map(|s| s.accuracy.map(|a| (s.study_id.clone(), a)))
        .collect();
    Ok((per_study, agg.accuracy))
}

/// Per-stimulus, per-study and macro Wasserstein alignment.
pub fn distribution_alignment(joined: &Joined<'_>, weighting: Weighting) -> Result<Aggregate> {
    score(joined, 1, weighting)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundScores {
    pub per_study: BTreeMap<String, f64>,
    pub macro_value: Option<f64>,
}

fn aggregate_bound(per_stimulus: &BTreeMap<StimulusKey, (f64, usize)>, weighting: Weighting) -> BoundScores {
    let mut by_study: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (k, (v, _)) in per_stimulus {
        by_study.entry(k.study_id.clone()).or_default().push(*v);
    }
    let per_study: BTreeMap<String, f64> = by_study
        .into_iter()
        .filter_map(|(s, vs)| mean(vs).map(|m| (s, m)))
        .collect();
    let macro_value = match weighting {
        Weighting::StudyMacro => mean(per_study.values().copied()),
        Weighting::RecordWeighted => weighted_mean(per_stimulus.values().copied()),
    };
    BoundScores { per_study, macro_value }
}

/// Bootstrap self-distance of the human responses, per stimulus keyed rng.
pub fn empirical_best(joined: &Joined<'_>, n_boot: usize, seed: u64, weighting: Weighting) -> Result<BoundScores> {
    let mut per_stimulus = BTreeMap::new();
    for (key, rows) in &joined.buckets {
        let b = &joined.bounds[key];
        let truths: Vec<f64> = rows.iter().map(|r| b.standardize(r.record.response)).collect();
        let mut rng = keyed_rng(seed, &format!("boot:{key}"));
        let d = bootstrap_self_distance(&truths, n_boot, &mut rng)?;
        per_stimulus.insert(key.clone(), (d, truths.len()));
    }
    Ok(aggregate_bound(&per_stimulus, weighting))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformGuess {
    pub alignment: BoundScores,
    pub accuracy: BoundScores,
}

/// Analytic uniform-guess alignment and expected accuracy.
pub fn uniform_guess_bound(joined: &Joined<'_>, weighting: Weighting) -> Result<UniformGuess> {
    let mut align = BTreeMap::new();
    let mut acc_by_study: BTreeMap<String, Vec<(f64, usize)>> = BTreeMap::new();
    for (key, rows) in &joined.buckets {
        let b = &joined.bounds[key];
        let truths: Vec<i64> = rows.iter().map(|r| r.record.response).collect();
        let (a, acc) = uniform_guess(&truths, b)?;
        align.insert(key.clone(), (a, truths.len()));
        acc_by_study
            .entry(key.study_id.clone())
            .or_default()
            .push((acc, truths.len()));
    }
    // accuracy is a per-record mean within a study, like the scored accuracy
    let per_study: BTreeMap<String, f64> = acc_by_study
        .iter()
        .filter_map(|(s, v)| weighted_mean(v.iter().copied()).map(|m| (s.clone(), m)))
        .collect();
    let macro_value = match weighting {
        Weighting::StudyMacro => mean(per_study.values().copied()),
        Weighting::RecordWeighted => weighted_mean(acc_by_study.values().flatten().copied()),
    };
    Ok(UniformGuess {
        alignment: aggregate_bound(&align, weighting),
        accuracy: BoundScores { per_study, macro_value },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupScore {
    pub alignment: Option<f64>,
    pub n_records: usize,
    pub n_stimuli: usize,
    pub skipped_stimuli: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupTable {
    pub category: String,
    pub groups: BTreeMap<String, SubgroupScore>,
    pub parity: Option<f64>,
}

/// Alignment restricted to each value of a persona attribute. Stimuli with
/// fewer than `min_n` truths inside the subgroup are skipped and counted.
/// Bounds are those of the full stimulus bucket.
pub fn subgroup_alignment(
    joined: &Joined<'_>,
    category: &str,
    min_n: usize,
    weighting: Weighting,
) -> Result<SubgroupTable> {
    let values: BTreeSet<&str> = joined
        .buckets
        .values()
        .flatten()
        .filter_map(|r| r.record.persona.get(category))
        .collect();
    let mut groups = BTreeMap::new();
    for value in values {
        let sub = joined.filter(|r| r.persona.get(category) == Some(value));
        let agg = score(&sub, min_n, weighting)?;
        groups.insert(
            value.to_string(),
            SubgroupScore {
                alignment: agg.alignment,
                n_records: sub.buckets.values().map(Vec::len).sum(),
                n_stimuli: agg.stimuli.len(),
                skipped_stimuli: agg.skipped_small,
            },
        );
    }
    let scored: BTreeMap<String, f64> = groups
        .iter()
        .filter_map(|(k, g)| g.alignment.map(|a| (k.clone(), a)))
        .collect();
    Ok(SubgroupTable {
        category: category.to_string(),
        parity: demographic_parity(&scored),
        groups,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub prediction_std: Option<f64>,
    pub truth_std: Option<f64>,
}

/// Pooled sample standard deviation of standardized predictions and truths.
pub fn dispersion(joined: &Joined<'_>) -> Dispersion {
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for (key, rows) in &joined.buckets {
        let b = &joined.bounds[key];
        for r in rows {
            truths.push(b.standardize(r.record.response));
            if let Some(p) = r.predicted {
                preds.push(b.standardize(p));
            }
        }
    }
    Dispersion {
        prediction_std: sample_std(&preds),
        truth_std: sample_std(&truths),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBounds {
    pub empirical_best: Option<f64>,
    pub uniform_guess_alignment: Option<f64>,
    pub uniform_guess_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroScore {
    pub accuracy: Option<f64>,
    pub alignment: Option<f64>,
    pub bounds: ReferenceBounds,
    pub subgroups: Vec<SubgroupTable>,
    pub parity: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub variant: String,
    pub options: EvalOptions,
    pub counts: JoinCounts,
    pub stimuli: Vec<StimulusScore>,
    pub studies: Vec<StudyScore>,
    #[serde(rename = "macro")]
    pub macro_score: MacroScore,
    pub dispersion: Dispersion,
}

/// Full evaluation of one prediction set against the evaluation records.
pub fn evaluate(
    corpus: &Corpus,
    eval: &[&ResponseRecord],
    preds: &[PredictionRecord],
    variant: &str,
    options: &EvalOptions,
) -> Result<EvalResult> {
    if eval.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    let joined = join(corpus, eval, preds, options);
    if joined.counts.unmatched > 0 {
        tracing::warn!(count = joined.counts.unmatched, "predictions without a matching evaluation record");
    }
    let agg = score(&joined, 1, options.weighting)?;
    let best = empirical_best(&joined, options.n_boot, options.seed, options.weighting)?;
    let uniform = uniform_guess_bound(&joined, options.weighting)?;

    let categories: Vec<String> = match &options.subgroup_categories {
        Some(c) => c.clone(),
        None => eval
            .iter()
            .flat_map(|r| r.persona.iter().map(|(k, _)| k.to_string()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let subgroups = categories
        .iter()
        .map(|c| subgroup_alignment(&joined, c, options.min_n, options.weighting))
        .collect::<Result<Vec<_>>>()?;
    let parity = subgroups
        .iter()
        .filter_map(|t| t.parity.map(|p| (t.category.clone(), p)))
        .collect();

    Ok(EvalResult {
        variant: variant.to_string(),
        options: options.clone(),
        counts: joined.counts.clone(),
        stimuli: agg.stimuli,
        studies: agg.studies,
        macro_score: MacroScore {
            accuracy: agg.accuracy,
            alignment: agg.alignment,
            bounds: ReferenceBounds {
                empirical_best: best.macro_value,
                uniform_guess_alignment: uniform.alignment.macro_value,
                uniform_guess_accuracy: uniform.accuracy.macro_value,
            },
            subgroups,
            parity,
        },
        dispersion: dispersion(&joined),
    })
}
