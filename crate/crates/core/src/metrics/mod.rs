//! Scoring primitives shared by decoding and evaluation.

mod chrf;
mod dialect;

pub use chrf::{
    chrfpp_corpus, chrfpp_from_profiles, chrfpp_sentence, chrfpp_sentence_mean, extract_profile,
    f_score, order_stats, ChrfConfig, NGramProfile, OrderStats,
};
pub use dialect::{
    adi2, combined_objective, DialectScore, DialectScorer, ObjectiveKind, ScorerError,
};

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid chrF configuration: {0}")]
    InvalidConfig(String),
    #[error("corpus chrF++ is undefined for an empty segment list")]
    EmptyCorpus,
    #[error("target dialect `{target}` missing from NADI probabilities (have: {available}); scorer and config disagree on labels")]
    MissingTargetDialect { target: String, available: String },
    #[error("invalid dialect score: {0}")]
    InvalidScore(String),
    #[error("combination weight {0} outside [0, 1]")]
    InvalidWeight(f64),
    #[error("objective component {name} = {value} outside [0, 1]")]
    ComponentOutOfRange { name: &'static str, value: f64 },
}
