//! Tooling for simulated survey-experiment responses.
//!
//! A corpus is a set of studies, each with experimental conditions and
//! outcome questions, plus one [`corpus::ResponseRecord`] per participant
//! answer. From a corpus this crate can:
//!
//! - validate and index the data ([`corpus`]),
//! - produce reproducible train/eval partitions ([`splits`]),
//! - render prediction prompts and parse replies ([`prompts`]),
//! - emit SFT, reasoning-SFT and DPO training files ([`trainset`]),
//! - produce predictions from files, baselines or a chat endpoint ([`backends`]),
//! - score predictions for accuracy and distributional alignment ([`metrics`]),
//! - assemble comparison tables and plot data ([`report`]).

pub mod backends;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod prompts;
pub mod report;
pub mod rng;
pub mod splits;
pub mod synthetic;
pub mod trainset;

pub use error::{Error, Result};
