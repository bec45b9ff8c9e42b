//! Final-output selection over a set of sampled candidates.
//!
//! Two selection modes exist:
//!
//! * [`mbr_select`]: expected utility of each candidate against the whole
//!   candidate set used as pseudo-references (self-comparison included).
//! * [`rerank_select`]: each candidate scored on its own by a reference-free
//!   scorer, e.g. ADI2.
//!
//! Both pick the lowest index attaining the maximum score. Score sums run in
//! fixed index order, so the result does not depend on the number of worker
//! threads.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::metrics::{
    chrfpp_from_profiles, combined_objective, extract_profile, ChrfConfig, DialectScorer,
    MetricsError, NGramProfile, ObjectiveKind, ScorerError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Position in sampling order.
    pub index: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<Map<String, Value>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub prompt_id: String,
    pub source: String,
    candidates: Vec<Candidate>,
}

impl CandidateSet {
    /// Builds a set from texts, assigning indices in order.
    pub fn from_texts<I, S>(prompt_id: impl Into<String>, source: impl Into<String>, texts: I) -> Result<Self, MbrError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let candidates = texts
            .into_iter()
            .enumerate()
            .map(|(index, t)| Candidate { index, text: t.into(), meta: None })
            .collect();
        Self::new(prompt_id, source, candidates)
    }

    pub fn new(prompt_id: impl Into<String>, source: impl Into<String>, candidates: Vec<Candidate>) -> Result<Self, MbrError> {
        let prompt_id = prompt_id.into();
        if candidates.is_empty() {
            return Err(MbrError::EmptySet { prompt_id });
        }
        if let Some((pos, c)) = candidates.iter().enumerate().find(|(i, c)| c.index != *i) {
            return Err(MbrError::BadIndex { prompt_id, position: pos, index: c.index });
        }
        Ok(Self { prompt_id, source: source.into(), candidates })
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.text.as_str())
    }
}

/// One JSONL record of decoder output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub prompt_id: String,
    pub chosen_index: usize,
    pub chosen_text: String,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveKind>,
}

impl SelectionResult {
    fn from_scores(set: &CandidateSet, scores: Vec<f64>, objective: Option<ObjectiveKind>) -> Self {
        let chosen_index = argmax_lowest(&scores);
        Self {
            prompt_id: set.prompt_id.clone(),
            chosen_index,
            chosen_text: set.candidates[chosen_index].text.clone(),
            scores,
            objective,
        }
    }
}

#[derive(Debug, Error)]
pub enum MbrError {
    #[error("candidate set `{prompt_id}` is empty")]
    EmptySet { prompt_id: String },
    #[error("candidate set `{prompt_id}`: position {position} carries index {index}")]
    BadIndex { prompt_id: String, position: usize, index: usize },
    #[error("scoring candidate {index} of `{prompt_id}` failed: {message}")]
    Scorer { prompt_id: String, index: usize, message: String },
    #[error("objective `{objective}` requires {missing}")]
    MissingBackend { objective: ObjectiveKind, missing: &'static str },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Lowest index attaining the maximum; NaN never wins.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Pairwise utility with a per-text preparation step that can be cached.
pub trait PairwiseUtility: Sync {
    type Prepared: Send + Sync;

    fn prepare(&self, text: &str) -> Self::Prepared;

    fn utility(&self, hypothesis: &Self::Prepared, pseudo_reference: &Self::Prepared) -> f64;
}

/// Adapts a plain `(hyp, ref) -> f64` closure.
pub struct FnUtility<F>(pub F);

impl<F> PairwiseUtility for FnUtility<F>
where
    F: Fn(&str, &str) -> f64 + Sync,
{
    type Prepared = String;

    fn prepare(&self, text: &str) -> String {
        text.to_owned()
    }

    fn utility(&self, hypothesis: &String, pseudo_reference: &String) -> f64 {
        (self.0)(hypothesis, pseudo_reference)
    }
}

/// Sentence chrF++ over cached n-gram profiles.
#[derive(Debug, Clone, Copy, Default)]
pub struct ChrfUtility {
    pub cfg: ChrfConfig,
}

impl PairwiseUtility for ChrfUtility {
    type Prepared = NGramProfile;

    fn prepare(&self, text: &str) -> NGramProfile {
        extract_profile(text, &self.cfg)
    }

    fn utility(&self, hypothesis: &NGramProfile, pseudo_reference: &NGramProfile) -> f64 {
        chrfpp_from_profiles(hypothesis, pseudo_reference, &self.cfg)
    }
}

/// Expected utility of every candidate against all candidates.
///
/// Profiles are prepared once per candidate; rows are evaluated in parallel
/// and each row is summed in index order.
pub fn mbr_scores<U: PairwiseUtility>(set: &CandidateSet, utility: &U) -> Vec<f64> {
    let prepared: Vec<U::Prepared> = set
        .candidates
        .par_iter()
        .map(|c| utility.prepare(&c.text))
        .collect();
    let n = prepared.len() as f64;
    prepared
        .par_iter()
        .map(|hyp| {
            let mut sum = 0.0;
            for pseudo_ref in &prepared {
                sum += utility.utility(hyp, pseudo_ref);
            }
            sum / n
        })
        .collect()
}

pub fn mbr_select<U: PairwiseUtility>(set: &CandidateSet, utility: &U) -> SelectionResult {
    SelectionResult::from_scores(set, mbr_scores(set, utility), None)
}

/// Scores each candidate independently. The first failing candidate (by
/// index) aborts the selection.
pub fn rerank_select<F, E>(set: &CandidateSet, scorer: F) -> Result<SelectionResult, MbrError>
where
    F: Fn(&str) -> Result<f64, E> + Sync,
    E: fmt::Display + Send,
{
    let scores = rerank_scores(set, scorer)?;
    Ok(SelectionResult::from_scores(set, scores, None))
}

fn rerank_scores<F, E>(set: &CandidateSet, scorer: F) -> Result<Vec<f64>, MbrError>
where
    F: Fn(&str) -> Result<f64, E> + Sync,
    E: fmt::Display + Send,
{
    let results: Vec<Result<f64, E>> = set.candidates.par_iter().map(|c| scorer(&c.text)).collect();
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            r.map_err(|e| MbrError::Scorer {
                prompt_id: set.prompt_id.clone(),
                index,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Objective-driven selection with its backends bound.
#[derive(Clone)]
pub struct Selector {
    objective: ObjectiveKind,
    scorer: Option<Arc<dyn DialectScorer>>,
    target_dialect: Option<String>,
    chrf: ChrfConfig,
    combined_weight: f64,
}

impl fmt::Debug for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Selector")
            .field("objective", &self.objective)
            .field("scorer", &self.scorer.as_ref().map(|s| s.backend_id()))
            .field("target_dialect", &self.target_dialect)
            .field("chrf", &self.chrf)
            .field("combined_weight", &self.combined_weight)
            .finish()
    }
}

impl Selector {
    pub fn new(
        objective: ObjectiveKind,
        scorer: Option<Arc<dyn DialectScorer>>,
        target_dialect: Option<String>,
        chrf: ChrfConfig,
        combined_weight: f64,
    ) -> Result<Self, MbrError> {
        chrf.validate()?;
        if objective.needs_scorer() {
            if scorer.is_none() {
                return Err(MbrError::MissingBackend { objective, missing: "a dialect scorer backend" });
            }
            if target_dialect.is_none() {
                return Err(MbrError::MissingBackend { objective, missing: "a target dialect" });
            }
        }
        if !(0.0..=1.0).contains(&combined_weight) {
            return Err(MetricsError::InvalidWeight(combined_weight).into());
        }
        Ok(Self { objective, scorer, target_dialect, chrf, combined_weight })
    }

    pub fn objective(&self) -> ObjectiveKind {
        self.objective
    }

    pub fn select(&self, set: &CandidateSet) -> Result<SelectionResult, MbrError> {
        let scores = match self.objective {
            ObjectiveKind::Adi2 => self.adi2_scores(set)?,
            ObjectiveKind::Chrfpp => mbr_scores(set, &ChrfUtility { cfg: self.chrf }),
            ObjectiveKind::Combined => {
                let dialect = self.adi2_scores(set)?;
                let chrf = mbr_scores(set, &ChrfUtility { cfg: self.chrf });
                dialect
                    .into_iter()
                    .zip(chrf)
                    .map(|(a, c)| combined_objective(a, c, self.combined_weight))
                    .collect::<Result<Vec<_>, _>>()?
            }
        };
        Ok(SelectionResult::from_scores(set, scores, Some(self.objective)))
    }

    fn adi2_scores(&self, set: &CandidateSet) -> Result<Vec<f64>, MbrError> {
        // Presence is checked in `new`.
        let scorer = self.scorer.as_deref().expect("scorer checked at construction");
        let dialect = self.target_dialect.as_deref().expect("dialect checked at construction");
        rerank_scores(set, |text| -> Result<f64, ScorerError> { scorer.adi2(text, dialect) })
    }
}

/// One-shot form of [`Selector::select`].
pub fn select_with_objective(
    set: &CandidateSet,
    objective: ObjectiveKind,
    scorer: Option<Arc<dyn DialectScorer>>,
    target_dialect: Option<&str>,
    chrf: &ChrfConfig,
    combined_weight: f64,
) -> Result<SelectionResult, MbrError> {
    Selector::new(objective, scorer, target_dialect.map(str::to_owned), *chrf, combined_weight)?.select(set)
}
