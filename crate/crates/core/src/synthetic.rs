//! Seeded synthetic corpora for demos and tests.
//!
//! Responses depend on the stimulus and on persona attributes, so subgroup
//! breakdowns and splits have something to find.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Condition, Corpus, Design, Outcome, Persona, ResponseRecord, StudyManifest};
use crate::error::Result;
use crate::rng::keyed_rng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseShape {
    /// One latent mode per stimulus.
    #[default]
    Unimodal,
    /// Two latent modes per stimulus, roughly symmetric around the scale
    /// centre.
    Bimodal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub studies: usize,
    pub participants_per_study: usize,
    pub min_conditions: usize,
    pub max_conditions: usize,
    pub min_outcomes: usize,
    pub max_outcomes: usize,
    pub within_subject_fraction: f64,
    pub shape: ResponseShape,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            studies: 12,
            participants_per_study: 60,
            min_conditions: 2,
            max_conditions: 6,
            min_outcomes: 1,
            max_outcomes: 5,
            within_subject_fraction: 0.2,
            shape: ResponseShape::Unimodal,
            seed: 7,
        }
    }
}

const TOPICS: &[&str] = &[
    "a new public transit levy",
    "remote work policies",
    "a local recycling program",
    "immigration reform",
    "a proposed minimum wage increase",
    "electric vehicle subsidies",
    "school lunch standards",
    "a hospital merger",
    "social media age limits",
    "a city park renovation",
    "police body cameras",
    "a four-day work week",
];

const FRAMES: &[&str] = &[
    "as an economic gain",
    "as a moral duty",
    "as a threat to local jobs",
    "with a personal story",
    "with a statistic",
    "as endorsed by a scientist",
    "as endorsed by a politician",
    "with no framing",
];

const QUESTIONS: &[&str] = &[
    "How much do you support this proposal?",
    "How likely are you to share this message?",
    "How trustworthy is the source?",
    "How fair is this policy?",
    "How worried are you about this issue?",
    "Would you sign a petition about this?",
    "How strongly do you agree with the statement?",
];

const SCALES: &[(i64, i64)] = &[(1, 5), (1, 7), (0, 1), (1, 6), (1, 2), (0, 10), (1, 4)];
const GENDERS: &[&str] = &["Female", "Male"];
const IDEOLOGIES: &[&str] = &[
    "Very Liberal",
    "Somewhat Liberal",
    "Moderate",
    "Somewhat Conservative",
    "Very Conservative",
];
const EDUCATION: &[&str] = &[
    "High school",
    "Some college",
    "Bachelor's degree",
    "Graduate degree",
];

struct Person {
    id: String,
    persona: Persona,
    gender: usize,
    ideology: usize,
}

fn make_person(rng: &mut ChaCha8Rng, id: String) -> Person {
    let gender = rng.gen_range(0..GENDERS.len());
    let ideology = rng.gen_range(0..IDEOLOGIES.len());
    let age = rng.gen_range(18..=80).to_string();
    let education = EDUCATION.choose(rng).expect("non-empty");
    let persona = Persona::new([
        ("Age", age.as_str()),
        ("Gender", GENDERS[gender]),
        ("Ideology", IDEOLOGIES[ideology]),
        ("Education", education),
    ])
    .expect("attribute names are unique");
    Person {
        id,
        persona,
        gender,
        ideology,
    }
}

/// Latent preference of a stimulus; persona shifts are added per response.
struct StimulusModel {
    modes: [f64; 2],
    weight: f64,
    gender_shift: f64,
    ideology_shift: f64,
    noise: f64,
}

impl StimulusModel {
    fn new(rng: &mut ChaCha8Rng, shape: ResponseShape) -> Self {
        let (modes, weight, noise) = match shape {
            ResponseShape::Unimodal => {
                let m = rng.gen_range(0.15..0.85);
                ([m, m], 1.0, rng.gen_range(0.08..0.25))
            }
            ResponseShape::Bimodal => {
                let d = rng.gen_range(0.25..0.4);
                ([0.5 - d, 0.5 + d], rng.gen_range(0.35..0.65), rng.gen_range(0.05..0.12))
            }
        };
        StimulusModel {
            modes,
            weight,
            gender_shift: rng.gen_range(-0.12..0.12),
            ideology_shift: rng.gen_range(-0.05..0.05),
            noise,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, p: &Person, min: i64, max: i64) -> i64 {
        let mode = if rng.gen::<f64>() < self.weight { self.modes[0] } else { self.modes[1] };
        // Box-Muller
        let (u1, u2): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        let centred_ideology = p.ideology as f64 - 2.0;
        let latent = mode
            + self.gender_shift * if p.gender == 0 { 1.0 } else { -1.0 }
            + self.ideology_shift * centred_ideology
            + self.noise * z;
        let x = latent.clamp(0.0, 1.0);
        (min as f64 + x * (max - min) as f64).round() as i64
    }
}

/// Builds a valid corpus from `spec`. The same spec always yields the same
/// corpus, and each study depends only on the seed and its own index.
pub fn generate(spec: &SyntheticSpec) -> Result<Corpus> {
    let mut manifests = Vec::with_capacity(spec.studies);
    let mut records = Vec::new();
    for s in 0..spec.studies {
        let study_id = format!("S{s:03}");
        let mut rng = keyed_rng(spec.seed, &format!("synthetic:{study_id}"));
        let n_cond = rng.gen_range(spec.min_conditions.max(1)..=spec.max_conditions.max(spec.min_conditions.max(1)));
        let n_out = rng.gen_range(spec.min_outcomes.max(1)..=spec.max_outcomes.max(spec.min_outcomes.max(1)));
        let design = if rng.gen::<f64>() < spec.within_subject_fraction {
            Design::WithinSubject
        } else {
            Design::BetweenSubject
        };
        let topic = TOPICS[s % TOPICS.len()];
        let conditions: Vec<Condition> = (0..n_cond)
            .map(|j| Condition {
                condition_id: format!("c{j}"),
                stimulus: format!(
                    "A short article about {topic}, presented {}.",
                    FRAMES[(s + j) % FRAMES.len()]
                ),
            })
            .collect();
        let outcomes: Vec<Outcome> = (0..n_out)
            .map(|k| {
                let (min, max) = *SCALES.choose(&mut rng).expect("non-empty");
                let labels: BTreeMap<i64, String> = if max - min >= 4 && rng.gen_bool(0.5) {
                    [(min, "Not at all".to_string()), (max, "Extremely".to_string())].into()
                } else {
                    BTreeMap::new()
                };
                Outcome {
                    outcome_id: format!("o{k}"),
                    question: QUESTIONS[(s * 3 + k) % QUESTIONS.len()].to_string(),
                    min: Some(min),
                    max: Some(max),
                    labels,
                    instruction: None,
                }
            })
            .collect();
        let models: Vec<Vec<StimulusModel>> = (0..n_cond)
            .map(|_| (0..n_out).map(|_| StimulusModel::new(&mut rng, spec.shape)).collect())
            .collect();

        for i in 0..spec.participants_per_study {
            let person = make_person(&mut rng, format!("{study_id}-p{i:04}"));
            let arms: Vec<usize> = match design {
                Design::WithinSubject => (0..n_cond).collect(),
                // balanced assignment so every arm has respondents
                Design::BetweenSubject => vec![i % n_cond],
            };
            for &j in &arms {
                for (k, o) in outcomes.iter().enumerate() {
                    let (min, max) = (o.min.expect("set above"), o.max.expect("set above"));
                    records.push(ResponseRecord {
                        study_id: study_id.clone(),
                        participant_id: person.id.clone(),
                        persona: person.persona.clone(),
                        condition_id: conditions[j].condition_id.clone(),
                        outcome_id: o.outcome_id.clone(),
                        response: models[j][k].draw(&mut rng, &person, min, max),
                    });
                }
            }
        }
        manifests.push(StudyManifest {
            study_id,
            design,
            conditions,
            outcomes,
            stimuli: Vec::new(),
        });
    }
    Corpus::new(manifests, records)
}
