use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::MetricsError;

/// Outputs of the dialectness and dialect-identification models for one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialectScore {
    /// Level of dialectness in `[0, 1]`.
    pub aldi: f64,
    /// Per-dialect class probabilities.
    pub nadi_probs: BTreeMap<String, f64>,
    pub target_dialect: String,
}

impl DialectScore {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(0.0..=1.0).contains(&self.aldi) {
            return Err(MetricsError::InvalidScore(format!(
                "aldi = {} outside [0, 1]",
                self.aldi
            )));
        }
        if let Some((label, p)) = self
            .nadi_probs
            .iter()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(MetricsError::InvalidScore(format!(
                "nadi probability for `{label}` = {p} outside [0, 1]"
            )));
        }
        Ok(())
    }
}

/// ADI2 dialect fidelity: dialectness times the probability of the requested
/// dialect class.
pub fn adi2(score: &DialectScore) -> Result<f64, MetricsError> {
    score.validate()?;
    let prob = score
        .nadi_probs
        .get(&score.target_dialect)
        .ok_or_else(|| MetricsError::MissingTargetDialect {
            target: score.target_dialect.clone(),
            available: score
                .nadi_probs
                .keys()
                .map(String::as_str)
                .collect::<Vec<_>>()
                .join(","),
        })?;
    Ok(score.aldi * prob)
}

/// Convex combination `weight * adi2 + (1 - weight) * chrf`.
pub fn combined_objective(adi2_score: f64, chrf_component: f64, weight: f64) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(MetricsError::InvalidWeight(weight));
    }
    for (name, value) in [("adi2", adi2_score), ("chrf", chrf_component)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricsError::ComponentOutOfRange { name, value });
        }
    }
    Ok(weight * adi2_score + (1.0 - weight) * chrf_component)
}

/// Which score drives candidate selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "adi2")]
    Adi2,
    #[serde(rename = "chrf")]
    Chrfpp,
    #[serde(rename = "combined")]
    Combined,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Adi2 => "adi2",
            ObjectiveKind::Chrfpp => "chrf",
            ObjectiveKind::Combined => "combined",
        }
    }

    pub fn needs_scorer(self) -> bool {
        matches!(self, ObjectiveKind::Adi2 | ObjectiveKind::Combined)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adi2" => Ok(ObjectiveKind::Adi2),
            "chrf" | "chrf++" | "chrfpp" => Ok(ObjectiveKind::Chrfpp),
            "combined" => Ok(ObjectiveKind::Combined),
            other => Err(format!("unknown objective `{other}` (expected adi2, chrf or combined)")),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ScorerError {
    #[error("dialect `{0}` is not configured for this scorer")]
    UnknownDialect(String),
    #[error("scorer transport error: {0}")]
    Transport(String),
    #[error("scorer returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("scorer response violates schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Source of [`DialectScore`]s. Implementations must tolerate concurrent calls.
pub trait DialectScorer: Send + Sync {
    fn score(&self, text: &str, target_dialect: &str) -> Result<DialectScore, ScorerError>;

    /// Short identifier recorded in report fingerprints.
    fn backend_id(&self) -> String;

    fn adi2(&self, text: &str, target_dialect: &str) -> Result<f64, ScorerError> {
        Ok(adi2(&self.score(text, target_dialect)?)?)
    }
}
