//! Train/eval partitions for the four generalization protocols.
//!
//! All draws come from [`crate::rng::keyed_rng`] scoped by study id, so a
//! study's assignment depends only on the seed and that study's content.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ResponseRecord};
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, scope_digest};

pub const DEFAULT_PILOT_FRACTIONS: [f64; 7] = [0.01, 0.05, 0.10, 0.20, 0.30, 0.40, 0.50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Study,
    Condition,
    Outcome,
    ParticipantSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitParams {
    Study { train_count: usize, test_count: usize },
    Condition { train_fraction: f64, min_arms: usize },
    Outcome { train_fraction: f64, min_arms: usize },
    ParticipantSweep { pilot_fractions: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub params: SplitParams,
}

impl SplitSpec {
    pub fn kind(&self) -> SplitKind {
        match self.params {
            SplitParams::Study { .. } => SplitKind::Study,
            SplitParams::Condition { .. } => SplitKind::Condition,
            SplitParams::Outcome { .. } => SplitKind::Outcome,
            SplitParams::ParticipantSweep { .. } => SplitKind::ParticipantSweep,
        }
    }

    fn check(&self) -> Result<()> {
        match &self.params {
            SplitParams::Condition { train_fraction, .. }
            | SplitParams::Outcome { train_fraction, .. } => check_fraction(*train_fraction),
            SplitParams::ParticipantSweep { pilot_fractions } => {
                for f in pilot_fractions {
                    check_fraction(*f)?;
                    if *f > 0.5 {
                        return Err(Error::Split(format!("pilot fraction {f} exceeds 0.5")));
                    }
                }
                if pilot_fractions.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Split("pilot fractions must be strictly ascending".into()));
                }
                Ok(())
            }
            SplitParams::Study { .. } => Ok(()),
        }
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::Split(format!("fraction {f} not in (0, 1)")))
    }
}

/// A split unit: a whole study, or one condition / outcome / participant of it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SplitKey {
    pub study_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_id: Option<String>,
}

impl SplitKey {
    pub fn study(id: &str) -> Self {
        SplitKey {
            study_id: id.into(),
            unit_id: None,
        }
    }

    pub fn unit(study: &str, unit: &str) -> Self {
        SplitKey {
            study_id: study.into(),
            unit_id: Some(unit.into()),
        }
    }
}

impl fmt::Display for SplitKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.unit_id {
            Some(u) => write!(f, "{}/{u}", self.study_id),
            None => f.write_str(&self.study_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotSubset {
    pub fraction: f64,
    pub keys: BTreeSet<SplitKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub spec: SplitSpec,
    /// Hash of the corpus the assignment was drawn from.
    pub corpus_hash: String,
    pub train_keys: BTreeSet<SplitKey>,
    pub eval_keys: BTreeSet<SplitKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pilot_subsets: Option<Vec<PilotSubset>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Train,
    Eval,
    /// Not part of this split (e.g. a study below `min_arms`).
    Excluded,
}

impl SplitAssignment {
    pub fn kind(&self) -> SplitKind {
        self.spec.kind()
    }

    /// The split unit a record belongs to under this assignment's kind.
    pub fn unit_of(&self, r: &ResponseRecord) -> SplitKey {
        match self.kind() {
            SplitKind::Study => SplitKey::study(&r.study_id),
            SplitKind::Condition => SplitKey::unit(&r.study_id, &r.condition_id),
            SplitKind::Outcome => SplitKey::unit(&r.study_id, &r.outcome_id),
            SplitKind::ParticipantSweep => SplitKey::unit(&r.study_id, &r.participant_id),
        }
    }

    pub fn side_of(&self, r: &ResponseRecord) -> Side {
        let key = self.unit_of(r);
        if self.train_keys.contains(&key) {
            Side::Train
        } else if self.eval_keys.contains(&key) {
            Side::Eval
        } else {
            Side::Excluded
        }
    }

    pub fn records<'a>(&self, corpus: &'a Corpus, side: Side) -> Vec<&'a ResponseRecord> {
        corpus
            .records()
            .iter()
            .filter(|r| self.side_of(r) == side)
            .collect()
    }

    pub fn pilot(&self, fraction: f64) -> Option<&PilotSubset> {
        self.pilot_subsets
            .as_ref()?
            .iter()
            .find(|p| (p.fraction - fraction).abs() < 1e-12)
    }

    /// Train records of a participant sweep restricted to one pilot subset.
    pub fn pilot_records<'a>(&self, corpus: &'a Corpus, fraction: f64) -> Result<Vec<&'a ResponseRecord>> {
        let pilot = self
            .pilot(fraction)
            .ok_or_else(|| Error::Split(format!("no pilot subset at fraction {fraction}")))?;
        Ok(corpus
            .records()
            .iter()
            .filter(|r| pilot.keys.contains(&self.unit_of(r)))
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Half-up rounding of `fraction * n`.
fn round_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

/// Uniformly random study-level partition: studies are ranked by a digest of
/// `(seed, study_id)` and the first `train_count` go to train.
pub fn split_studies(corpus: &Corpus, train_count: usize, seed: u64) -> Result<SplitAssignment> {
    let n = corpus.studies().len();
    if train_count >= n {
        return Err(Error::Split(format!(
            "train_count {train_count} needs more than {n} studies"
        )));
    }
    let mut ranked: Vec<&str> = corpus.studies().keys().map(String::as_str).collect();
    ranked.sort_by_key(|id| scope_digest(seed, id));
    let train_keys = ranked[..train_count].iter().map(|s| SplitKey::study(s)).collect();
    let eval_keys = ranked[train_count..].iter().map(|s| SplitKey::study(s)).collect();
    Ok(SplitAssignment {
        spec: SplitSpec {
            seed,
            params: SplitParams::Study {
                train_count,
                test_count: n - train_count,
            },
        },
        corpus_hash: corpus.content_hash(),
        train_keys,
        eval_keys,
        pilot_subsets: None,
    })
}

pub fn split_conditions(
    corpus: &Corpus,
    train_fraction: f64,
    min_arms: usize,
    seed: u64,
) -> Result<SplitAssignment> {
    split_arms(
        corpus,
        SplitSpec {
            seed,
            params: SplitParams::Condition {
                train_fraction,
                min_arms,
            },
        },
    )
}

pub fn split_outcomes(
    corpus: &Corpus,
    train_fraction: f64,
    min_arms: usize,
    seed: u64,
) -> Result<SplitAssignment> {
    split_arms(
        corpus,
        SplitSpec {
            seed,
            params: SplitParams::Outcome {
                train_fraction,
                min_arms,
            },
        },
    )
}

fn split_arms(corpus: &Corpus, spec: SplitSpec) -> Result<SplitAssignment> {
    spec.check()?;
    let (fraction, min_arms, by_condition) = match spec.params {
        SplitParams::Condition {
            train_fraction,
            min_arms,
        } => (train_fraction, min_arms, true),
        SplitParams::Outcome {
            train_fraction,
            min_arms,
        } => (train_fraction, min_arms, false),
        _ => unreachable!("split_arms called with non-arm spec"),
    };
    let min_arms = min_arms.max(2);
    let mut train_keys = BTreeSet::new();
    let mut eval_keys = BTreeSet::new();
    let mut eligible = 0;
    for (study_id, m) in corpus.studies() {
        let mut arms: Vec<&str> = if by_condition {
            m.conditions.iter().map(|c| c.condition_id.as_str()).collect()
        } else {
            m.outcomes.iter().map(|o| o.outcome_id.as_str()).collect()
        };
        let n = arms.len();
        if n < min_arms {
            continue;
        }
        eligible += 1;
        arms.sort_unstable();
        let scope = if by_condition { "conditions" } else { "outcomes" };
        arms.shuffle(&mut keyed_rng(spec.seed, &format!("{scope}:{study_id}")));
        let n_train = round_count(fraction, n).clamp(1, n - 1);
        train_keys.extend(arms[..n_train].iter().map(|a| SplitKey::unit(study_id, a)));
        eval_keys.extend(arms[n_train..].iter().map(|a| SplitKey::unit(study_id, a)));
    }
    if eligible == 0 {
        return Err(Error::Split(format!(
            "no study has at least {min_arms} {}",
            if by_condition { "conditions" } else { "outcomes" }
        )));
    }
    Ok(SplitAssignment {
        spec,
        corpus_hash: corpus.content_hash(),
        train_keys,
        eval_keys,
        pilot_subsets: None,
    })
}

/// Participant pilot sweep on top of a study split.
///
/// Inside each train study the participants are shuffled once; the first
/// `round(n / 2)` form participant-train and the rest participant-eval. The
/// pilot at fraction `f` is the first `max(1, round(f * n))` of
/// participant-train, so pilots are nested. Every participant of a held-out
/// study is an eval key, and the eval set does not depend on the fractions.
pub fn split_participants(
    corpus: &Corpus,
    study_split: &SplitAssignment,
    pilot_fractions: &[f64],
    seed: u64,
) -> Result<SplitAssignment> {
    if study_split.kind() != SplitKind::Study {
        return Err(Error::Split("participant sweep needs a study split".into()));
    }
    let spec = SplitSpec {
        seed,
        params: SplitParams::ParticipantSweep {
            pilot_fractions: pilot_fractions.to_vec(),
        },
    };
    spec.check()?;

    let mut train_keys = BTreeSet::new();
    let mut eval_keys = BTreeSet::new();
    let mut pilots: Vec<BTreeSet<SplitKey>> = vec![BTreeSet::new(); pilot_fractions.len()];
    for study_id in corpus.studies().keys() {
        let participants: Vec<&str> = corpus.participants(study_id).into_iter().collect();
        if study_split.eval_keys.contains(&SplitKey::study(study_id)) {
            eval_keys.extend(participants.iter().map(|p| SplitKey::unit(study_id, p)));
            continue;
        }
        if !study_split.train_keys.contains(&SplitKey::study(study_id)) {
            continue;
        }
        let n = participants.len();
        if n < 2 {
            return Err(Error::Split(format!(
                "study `{study_id}` has {n} participant(s); need at least 2"
            )));
        }
        let mut order = participants;
        order.shuffle(&mut keyed_rng(seed, &format!("participants:{study_id}")));
        let n_train = round_count(0.5, n).min(n - 1);
        for (i, f) in pilot_fractions.iter().enumerate() {
            let size = round_count(*f, n).clamp(1, n_train);
            pilots[i].extend(order[..size].iter().map(|p| SplitKey::unit(study_id, p)));
        }
        train_keys.extend(order[..n_train].iter().map(|p| SplitKey::unit(study_id, p)));
        eval_keys.extend(order[n_train..].iter().map(|p| SplitKey::unit(study_id, p)));
    }
    let pilot_subsets = pilot_fractions
        .iter()
        .zip(pilots)
        .map(|(&fraction, keys)| PilotSubset { fraction, keys })
        .collect();
    Ok(SplitAssignment {
        spec,
        corpus_hash: corpus.content_hash(),
        train_keys,
        eval_keys,
        pilot_subsets: Some(pilot_subsets),
    })
}

/// Counts of held-in/held-out units per study, used by CLI summaries.
pub fn per_study_counts(a: &SplitAssignment) -> BTreeMap<String, (usize, usize)> {
    let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for k in &a.train_keys {
        out.entry(k.study_id.clone()).or_default().0 += 1;
    }
    for k in &a.eval_keys {
        out.entry(k.study_id.clone()).or_default().1 += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::*;
    use crate::corpus::{Corpus, Outcome};

    fn arms_corpus(n_studies: usize, n_conditions: usize, n_outcomes: usize) -> Corpus {
        let conds: Vec<String> = (0..n_conditions).map(|i| format!("c{i}")).collect();
        let cref: Vec<&str> = conds.iter().map(String::as_str).collect();
        let mut studies = vec![];
        let mut recs = vec![];
        for s in 0..n_studies {
            let sid = format!("s{s:03}");
            let outs: Vec<Outcome> = (0..n_outcomes).map(|o| outcome(&format!("o{o}"), 1, 5)).collect();
            studies.push(manifest(&sid, &cref, outs));
            for (ci, c) in conds.iter().enumerate() {
                for o in 0..n_outcomes {
                    recs.push(record(&sid, &format!("p{ci}"), c, &format!("o{o}"), 1 + (ci as i64 % 5)));
                }
            }
        }
        Corpus::new(studies, recs).unwrap()
    }

    #[test]
    fn study_split_counts_and_determinism() {
        let c = arms_corpus(10, 1, 1);
        let a = split_studies(&c, 7, 42).unwrap();
        assert_eq!((a.train_keys.len(), a.eval_keys.len()), (7, 3));
        assert!(a.train_keys.is_disjoint(&a.eval_keys));
        assert_eq!(a, split_studies(&c, 7, 42).unwrap());
        assert!(split_studies(&c, 10, 42).is_err());
    }

    #[test]
    fn two_studies_one_each() {
        let c = two_studies();
        let a = split_studies(&c, 1, 0).unwrap();
        assert_eq!((a.train_keys.len(), a.eval_keys.len()), (1, 1));
    }

    #[test]
    fn condition_split_rounding() {
        let c = arms_corpus(1, 4, 1);
        let a = split_conditions(&c, 0.75, 4, 1).unwrap();
        assert_eq!((a.train_keys.len(), a.eval_keys.len()), (3, 1));

        let c = arms_corpus(1, 8, 1);
        let a = split_conditions(&c, 0.75, 4, 1).unwrap();
        assert_eq!((a.train_keys.len(), a.eval_keys.len()), (6, 2));
    }

    #[test]
    fn condition_split_excludes_small_studies() {
        let c = arms_corpus(1, 3, 1);
        assert!(split_conditions(&c, 0.75, 4, 1).is_err());
        let small = arms_corpus(1, 3, 1);
        let big = arms_corpus(1, 4, 1);
        let mut studies: Vec<_> = small.studies().values().cloned().collect();
        let mut recs = small.records().to_vec();
        for m in big.studies().values() {
            let mut m = m.clone();
            m.study_id = "big".into();
            studies.push(m);
        }
        for r in big.records() {
            let mut r = r.clone();
            r.study_id = "big".into();
            recs.push(r);
        }
        let c = Corpus::new(studies, recs).unwrap();
        let a = split_conditions(&c, 0.75, 4, 1).unwrap();
        assert!(a.train_keys.iter().chain(&a.eval_keys).all(|k| k.study_id == "big"));
        let excluded = c.records().iter().filter(|r| a.side_of(r) == Side::Excluded).count();
        assert_eq!(excluded, 3);
    }

    #[test]
    fn outcome_split() {
        let c = arms_corpus(1, 1, 4);
        let a = split_outcomes(&c, 0.75, 4, 3).unwrap();
        assert_eq!((a.train_keys.len(), a.eval_keys.len()), (3, 1));
        assert_eq!(a, split_outcomes(&c, 0.75, 4, 3).unwrap());
        let one = arms_corpus(1, 4, 1);
        assert!(split_outcomes(&one, 0.75, 4, 3).is_err());
    }

    #[test]
    fn fractions_validated() {
        let c = arms_corpus(1, 4, 1);
        assert!(split_conditions(&c, 1.0, 4, 1).is_err());
        assert!(split_conditions(&c, 0.0, 4, 1).is_err());
        let s = split_studies(&arms_corpus(3, 1, 1), 2, 0).unwrap();
        assert!(split_participants(&c, &s, &[0.1, 0.05], 0).is_err());
        assert!(split_participants(&c, &s, &[0.6], 0).is_err());
    }

    fn participants_corpus(n: usize) -> Corpus {
        let studies = vec![
            manifest("a", &["c1"], vec![outcome("o1", 1, 5)]),
            manifest("b", &["c1"], vec![outcome("o1", 1, 5)]),
        ];
        let mut recs = vec![];
        for s in ["a", "b"] {
            for p in 0..n {
                recs.push(record(s, &format!("p{p:03}"), "c1", "o1", 1 + (p as i64 % 5)));
            }
        }
        Corpus::new(studies, recs).unwrap()
    }

    #[test]
    fn participant_sweep_sizes_and_nesting() {
        let c = participants_corpus(200);
        let studies = split_studies(&c, 1, 5).unwrap();
        let a = split_participants(&c, &studies, &DEFAULT_PILOT_FRACTIONS, 9).unwrap();
        let train_study = &studies.train_keys.iter().next().unwrap().study_id;
        let in_study = |keys: &BTreeSet<SplitKey>| keys.iter().filter(|k| &k.study_id == train_study).count();
        assert_eq!(in_study(&a.train_keys), 100);
        assert_eq!(in_study(&a.eval_keys), 100);
        // held-out study's 200 participants are all eval
        assert_eq!(a.eval_keys.len(), 300);
        let p10 = a.pilot(0.10).unwrap();
        assert_eq!(p10.keys.len(), 20);
        assert!(p10.keys.is_subset(&a.train_keys));
        assert_eq!(a.pilot(0.5).unwrap().keys, a.train_keys);
        assert!(a.pilot(0.05).unwrap().keys.is_subset(&p10.keys));
        let pilots = a.pilot_subsets.as_ref().unwrap();
        for w in pilots.windows(2) {
            assert!(w[0].keys.is_subset(&w[1].keys));
        }
    }

    #[test]
    fn participant_sweep_eval_fixed_across_fractions() {
        let c = participants_corpus(50);
        let studies = split_studies(&c, 1, 5).unwrap();
        let a = split_participants(&c, &studies, &[0.1, 0.5], 9).unwrap();
        let b = split_participants(&c, &studies, &[0.01, 0.2, 0.3], 9).unwrap();
        assert_eq!(a.eval_keys, b.eval_keys);
        assert_eq!(a.train_keys, b.train_keys);
    }

    #[test]
    fn participant_sweep_needs_two() {
        let c = participants_corpus(1);
        let studies = split_studies(&c, 1, 0).unwrap();
        assert!(split_participants(&c, &studies, &[0.5], 0).is_err());
    }

    #[test]
    fn assignment_json_round_trip() {
        let c = participants_corpus(20);
        let studies = split_studies(&c, 1, 5).unwrap();
        let a = split_participants(&c, &studies, &[0.1, 0.5], 9).unwrap();
        let json = a.to_json().unwrap();
        let back: SplitAssignment = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_json().unwrap(), json);
    }
}
