//! Prompt fixtures shared by the golden tests and the acceptance suite.
#![allow(dead_code)]

use std::path::PathBuf;

use socsim::corpus::{ComposedStimulus, Condition, Design, Outcome, Persona, StudyManifest};
use socsim::prompts::Exemplar;

pub const EMILY_STIMULUS: &str = "Emily recently graduated from high school and will attend college in the fall. Her mother and father, both factory workers, are very proud of her. Emily is excited to be attending her first-choice college, a highly-ranked private university. The university provides funding to cover the costs that families cannot pay, so Emily will graduate with no debt.";

pub const KONA_COMPOSED: &str = "You viewed an image and description of the Hyundai Kona Electric, a 100% electric version of the Hyundai Kona that costs about $40,000, has a 250 mile range and can accelerate from zero to 60 mph in about 6.4 seconds and then were asked: \"What is your first reaction to the product?\" Only return an integer from 1 to 5, where 1 means Very negative and 5 means Very positive, nothing else.";

pub fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/golden")
        .join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.strip_suffix('\n').unwrap_or(&text).to_string()
}

pub fn emily_persona() -> Persona {
    Persona::new([
        ("Age", "29"),
        ("Gender", "Female"),
        ("Education", "Vocational/tech school/some college/associates"),
        ("Employment", "Employed as paid employee"),
        ("Marital Status", "Never married"),
        ("Housing Ownership", "Occupied without payment of cash rent"),
        ("Household Size", "6"),
        ("Ideology", "Somewhat Liberal"),
        ("Phone Service", "Cellphone only"),
    ])
    .unwrap()
}

pub fn emily_study() -> StudyManifest {
    StudyManifest {
        study_id: "college".into(),
        design: Design::BetweenSubject,
        conditions: vec![Condition {
            condition_id: "working_class".into(),
            stimulus: EMILY_STIMULUS.into(),
        }],
        outcomes: vec![Outcome {
            outcome_id: "recommend_history".into(),
            question: "How unlikely or likely would you be to recommend history?".into(),
            min: Some(1),
            max: Some(6),
            labels: Default::default(),
            instruction: None,
        }],
        stimuli: Vec::new(),
    }
}

pub fn emily_exemplars(stimulus_text: &str) -> Vec<Exemplar> {
    [("41", "Male", 4), ("63", "Female", 2), ("22", "Female", 6), ("35", "Male", 3), ("57", "Male", 5)]
        .iter()
        .enumerate()
        .map(|(i, (age, gender, answer))| Exemplar {
            participant_id: format!("x{i}"),
            stimulus_text: stimulus_text.into(),
            persona: Persona::new([("Age", *age), ("Gender", *gender)]).unwrap(),
            answer: *answer,
        })
        .collect()
}

pub fn kona_persona() -> Persona {
    Persona::new([
        ("Age", "36"),
        ("Gender", "Male"),
        ("Education", "Post grad study/professional degree"),
        ("Employment", "Employed as paid employee"),
        ("Marital Status", "Married"),
        ("Housing Ownership", "Owned or being bought by you or someone in your household"),
        ("Housing Type", "A one-family house detached from any other house"),
        ("Location", "North Carolina"),
        ("Metro Status", "Metro Area"),
        ("Income", "50-74K"),
        ("Internet Access", "Internet Household"),
        ("Household Size", "4"),
        ("Ideology", "Very Conservative"),
        ("Phone Service", "Cellphone only"),
    ])
    .unwrap()
}

pub fn kona_study() -> StudyManifest {
    StudyManifest {
        study_id: "ev_ads".into(),
        design: Design::BetweenSubject,
        conditions: vec![Condition {
            condition_id: "kona".into(),
            stimulus: "An image and description of the Hyundai Kona Electric.".into(),
        }],
        outcomes: vec![Outcome {
            outcome_id: "first_reaction".into(),
            question: "What is your first reaction to the product?".into(),
            min: Some(1),
            max: Some(5),
            labels: [(1, "Very negative".to_string()), (5, "Very positive".to_string())].into(),
            instruction: None,
        }],
        stimuli: vec![ComposedStimulus {
            condition_id: "kona".into(),
            outcome_id: "first_reaction".into(),
            text: KONA_COMPOSED.into(),
        }],
    }
}
