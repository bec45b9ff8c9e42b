//! chrF++: character n-gram F-score extended with word n-grams.
//!
//! Scoring is split into two stages so that MBR can extract each candidate's
//! [`NGramProfile`] once and reuse it for every pairwise comparison:
//!
//! 1. [`extract_profile`] counts n-grams of every configured order.
//! 2. [`order_stats`] clips hypothesis counts against reference counts and
//!    [`f_score`] turns the per-order statistics into the final score.
//!
//! The per-order F-beta values are averaged over the orders for which either
//! side produced at least one n-gram. Orders that neither string can fill
//! (e.g. 6-grams of a three-letter word) carry no information and are left
//! out, which keeps `chrF++(x, x) = 1` for every non-empty `x`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::MetricsError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChrfConfig {
    pub max_char_n: usize,
    pub max_word_n: usize,
    pub beta: f64,
    pub strip_whitespace: bool,
    pub epsilon_smoothing: f64,
}

impl Default for ChrfConfig {
    fn default() -> Self {
        Self {
            max_char_n: 6,
            max_word_n: 2,
            beta: 2.0,
            strip_whitespace: true,
            epsilon_smoothing: 1e-16,
        }
    }
}

impl ChrfConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.max_char_n < 1 {
            return Err(MetricsError::InvalidConfig("max_char_n must be >= 1".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(MetricsError::InvalidConfig(format!(
                "beta must be a positive finite number, got {}",
                self.beta
            )));
        }
        if !(self.epsilon_smoothing >= 0.0 && self.epsilon_smoothing.is_finite()) {
            return Err(MetricsError::InvalidConfig(format!(
                "epsilon_smoothing must be non-negative, got {}",
                self.epsilon_smoothing
            )));
        }
        Ok(())
    }

    /// Total number of n-gram orders (character plus word).
    pub fn num_orders(&self) -> usize {
        self.max_char_n + self.max_word_n
    }
}

/// Multiset of the character and word n-grams of one string.
///
/// `char_ngrams[n - 1]` maps each character n-gram to its count, likewise for
/// `word_ngrams`. Word n-grams are the whitespace-separated tokens joined by a
/// single space.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NGramProfile {
    char_ngrams: Vec<HashMap<String, usize>>,
    word_ngrams: Vec<HashMap<String, usize>>,
    char_totals: Vec<usize>,
    word_totals: Vec<usize>,
}

impl NGramProfile {
    /// Counts for character n-grams of the given order (1-based).
    pub fn char_ngrams(&self, order: usize) -> Option<&HashMap<String, usize>> {
        order.checked_sub(1).and_then(|i| self.char_ngrams.get(i))
    }

    /// Counts for word n-grams of the given order (1-based).
    pub fn word_ngrams(&self, order: usize) -> Option<&HashMap<String, usize>> {
        order.checked_sub(1).and_then(|i| self.word_ngrams.get(i))
    }

    pub fn max_char_n(&self) -> usize {
        self.char_ngrams.len()
    }

    pub fn max_word_n(&self) -> usize {
        self.word_ngrams.len()
    }

    /// True when no n-gram of any order was extracted.
    pub fn is_empty(&self) -> bool {
        self.char_totals.iter().chain(&self.word_totals).all(|&t| t == 0)
    }

    /// Per-order grouping: character orders first, then word orders.
    fn orders(&self) -> impl Iterator<Item = (&HashMap<String, usize>, usize)> {
        self.char_ngrams
            .iter()
            .zip(self.char_totals.iter().copied())
            .chain(self.word_ngrams.iter().zip(self.word_totals.iter().copied()))
    }
}

fn count_windows<T, F>(items: &[T], n: usize, join: F) -> (HashMap<String, usize>, usize)
where
    F: Fn(&[T]) -> String,
{
    let mut counts = HashMap::new();
    if n == 0 || items.len() < n {
        return (counts, 0);
    }
    let mut total = 0;
    for window in items.windows(n) {
        *counts.entry(join(window)).or_insert(0) += 1;
        total += 1;
    }
    (counts, total)
}

pub fn extract_profile(text: &str, cfg: &ChrfConfig) -> NGramProfile {
    let chars: Vec<char> = if cfg.strip_whitespace {
        text.chars().filter(|c| !c.is_whitespace()).collect()
    } else {
        text.chars().collect()
    };
    let words: Vec<&str> = text.split_whitespace().collect();

    let mut profile = NGramProfile::default();
    for n in 1..=cfg.max_char_n {
        let (counts, total) = count_windows(&chars, n, |w| w.iter().collect());
        profile.char_ngrams.push(counts);
        profile.char_totals.push(total);
    }
    for n in 1..=cfg.max_word_n {
        let (counts, total) = count_windows(&words, n, |w| w.join(" "));
        profile.word_ngrams.push(counts);
        profile.word_totals.push(total);
    }
    profile
}

/// Clipped match statistics for one n-gram order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OrderStats {
    pub hyp_total: u64,
    pub ref_total: u64,
    pub matches: u64,
}

impl std::ops::AddAssign for OrderStats {
    fn add_assign(&mut self, rhs: Self) {
        self.hyp_total += rhs.hyp_total;
        self.ref_total += rhs.ref_total;
        self.matches += rhs.matches;
    }
}

/// Per-order statistics of `hyp` against `reference`, character orders
/// followed by word orders. Both profiles must come from the same config.
pub fn order_stats(hyp: &NGramProfile, reference: &NGramProfile) -> Vec<OrderStats> {
    debug_assert_eq!(hyp.max_char_n(), reference.max_char_n());
    debug_assert_eq!(hyp.max_word_n(), reference.max_word_n());
    hyp.orders()
        .zip(reference.orders())
        .map(|((h, h_total), (r, r_total))| {
            let matches: usize = h
                .iter()
                .filter_map(|(gram, &hc)| r.get(gram).map(|&rc| hc.min(rc)))
                .sum();
            OrderStats {
                hyp_total: h_total as u64,
                ref_total: r_total as u64,
                matches: matches as u64,
            }
        })
        .collect()
}

/// Mean F-beta over the orders where hypothesis or reference has n-grams.
pub fn f_score(stats: &[OrderStats], cfg: &ChrfConfig) -> f64 {
    let eps = cfg.epsilon_smoothing;
    let beta2 = cfg.beta * cfg.beta;
    let mut sum = 0.0;
    let mut used = 0usize;
    for s in stats {
        if s.hyp_total == 0 && s.ref_total == 0 {
            continue;
        }
        used += 1;
        let precision = if s.hyp_total > 0 {
            s.matches as f64 / s.hyp_total as f64
        } else {
            eps
        };
        let recall = if s.ref_total > 0 {
            s.matches as f64 / s.ref_total as f64
        } else {
            eps
        };
        let denom = beta2 * precision + recall;
        sum += if denom > 0.0 {
            (1.0 + beta2) * precision * recall / denom
        } else {
            eps
        };
    }
    if used == 0 {
        return 0.0;
    }
    (sum / used as f64).clamp(0.0, 1.0)
}

pub fn chrfpp_from_profiles(hyp: &NGramProfile, reference: &NGramProfile, cfg: &ChrfConfig) -> f64 {
    f_score(&order_stats(hyp, reference), cfg)
}

pub fn chrfpp_sentence(hypothesis: &str, reference: &str, cfg: &ChrfConfig) -> f64 {
    chrfpp_from_profiles(
        &extract_profile(hypothesis, cfg),
        &extract_profile(reference, cfg),
        cfg,
    )
}

/// Corpus chrF++ with micro-averaging: per-order counts are summed over all
/// segments before the F-score is computed.
pub fn chrfpp_corpus<H, R>(pairs: &[(H, R)], cfg: &ChrfConfig) -> Result<f64, MetricsError>
where
    H: AsRef<str>,
    R: AsRef<str>,
{
    if pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut totals = vec![OrderStats::default(); cfg.num_orders()];
    for (hyp, reference) in pairs {
        let stats = order_stats(
            &extract_profile(hyp.as_ref(), cfg),
            &extract_profile(reference.as_ref(), cfg),
        );
        for (acc, s) in totals.iter_mut().zip(stats) {
            *acc += s;
        }
    }
    Ok(f_score(&totals, cfg))
}

/// Arithmetic mean of sentence-level chrF++ over the segments.
pub fn chrfpp_sentence_mean<H, R>(pairs: &[(H, R)], cfg: &ChrfConfig) -> Result<f64, MetricsError>
where
    H: AsRef<str>,
    R: AsRef<str>,
{
    if pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let sum: f64 = pairs
        .iter()
        .map(|(h, r)| chrfpp_sentence(h.as_ref(), r.as_ref(), cfg))
        .sum();
    Ok(sum / pairs.len() as f64)
}
