//! Dialect scorer backends: a remote ALDi/NADI service and a lexicon stub.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::ClientError;
use crate::metrics::{DialectScore, DialectScorer, ScorerError};

/// Marker tokens per dialect label for the stub scorer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubLexicon {
    markers: BTreeMap<String, BTreeSet<String>>,
}

impl StubLexicon {
    pub fn new<I, L, M, S>(entries: I) -> Result<Self, ClientError>
    where
        I: IntoIterator<Item = (L, M)>,
        L: Into<String>,
        M: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut markers = BTreeMap::new();
        for (label, words) in entries {
            let label = label.into();
            let set: BTreeSet<String> = words.into_iter().map(|w| normalize(&w.into()).to_string()).filter(|w| !w.is_empty()).collect();
            if set.is_empty() {
                return Err(ClientError::Lexicon(format!("dialect `{label}` has no markers")));
            }
            markers.insert(label, set);
        }
        if markers.is_empty() {
            return Err(ClientError::Lexicon("no dialects configured".into()));
        }
        Ok(Self { markers })
    }

    /// Small built-in lexicon of common Syrian, Moroccan and Saudi markers.
    pub fn builtin() -> Self {
        Self::new([
            ("syr", vec!["شو", "هلق", "كتير", "منيح", "بدي", "بدك", "هيك", "ليش", "لسا", "شلون", "هاد", "هاي"]),
            ("mor", vec!["واش", "دابا", "بزاف", "ديال", "مزيان", "كيفاش", "شنو", "علاش", "بغيت", "غادي", "كاين", "والو"]),
            ("sau", vec!["وش", "ابغى", "ابي", "كذا", "زين", "مره", "يبغى", "وشلون", "ليه", "حيل", "عشان", "كيفك"]),
        ])
        .expect("builtin lexicon is non-empty")
    }

    /// Reads `{"label": ["marker", ...], ...}`.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, ClientError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ClientError::Io { path: path.display().to_string(), source })?;
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(&text)
            .map_err(|e| ClientError::Lexicon(format!("{}: {e}", path.display())))?;
        Self::new(raw)
    }

    pub fn dialects(&self) -> impl Iterator<Item = &str> {
        self.markers.keys().map(String::as_str)
    }

    pub fn markers(&self, dialect: &str) -> Option<&BTreeSet<String>> {
        self.markers.get(dialect)
    }
}

fn is_edge_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '،' | '؛' | '؟' | '«' | '»' | '…' | '“' | '”')
}

fn normalize(word: &str) -> &str {
    word.trim_matches(is_edge_punct)
}

/// Deterministic lexicon-counting test double for the ALDi/NADI models.
///
/// `aldi` is the fraction of words that are markers of the target dialect;
/// `nadi_probs` are add-one smoothed marker counts over all dialects.
#[derive(Debug, Clone)]
pub struct StubScorer {
    lexicon: StubLexicon,
}

impl StubScorer {
    pub fn new(lexicon: StubLexicon) -> Self {
        Self { lexicon }
    }

    pub fn lexicon(&self) -> &StubLexicon {
        &self.lexicon
    }
}

impl DialectScorer for StubScorer {
    fn score(&self, text: &str, target_dialect: &str) -> Result<DialectScore, ScorerError> {
        if !self.lexicon.markers.contains_key(target_dialect) {
            return Err(ScorerError::UnknownDialect(target_dialect.to_string()));
        }
        let words: Vec<&str> = text.split_whitespace().map(normalize).filter(|w| !w.is_empty()).collect();
        let counts: BTreeMap<&str, usize> = self
            .lexicon
            .markers
            .iter()
            .map(|(label, set)| (label.as_str(), words.iter().filter(|w| set.contains(**w)).count()))
            .collect();

        let aldi = if words.is_empty() {
            0.0
        } else {
            (counts[target_dialect] as f64 / words.len() as f64).clamp(0.0, 1.0)
        };
        let total: usize = counts.values().sum();
        let denom = (total + counts.len()) as f64;
        let nadi_probs = counts
            .iter()
            .map(|(label, &c)| (label.to_string(), (c + 1) as f64 / denom))
            .collect();
        Ok(DialectScore { aldi, nadi_probs, target_dialect: target_dialect.to_string() })
    }

    fn backend_id(&self) -> String {
        format!("stub[{}]", self.lexicon.dialects().collect::<Vec<_>>().join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteScorerConfig {
    /// Service base URL; requests go to `<endpoint>/score`.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    pub retry_backoff: Duration,
}

impl Default for RemoteScorerConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8100".into(),
            api_key: None,
            timeout: Duration::from_secs(30),
            max_retries: 3,
            retry_backoff: Duration::from_millis(250),
        }
    }
}

#[derive(Deserialize)]
struct RemoteResponse {
    aldi: f64,
    #[serde(alias = "nadi")]
    nadi_probs: BTreeMap<String, f64>,
}

/// Client for `POST /score` returning `{"aldi", "nadi_probs"}`.
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    http: reqwest::blocking::Client,
    url: String,
    cfg: RemoteScorerConfig,
}

impl RemoteScorer {
    pub fn new(cfg: RemoteScorerConfig) -> Result<Self, ClientError> {
        if cfg.endpoint.is_empty() {
            return Err(ClientError::InvalidConfig("scorer endpoint is empty".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| ClientError::InvalidConfig(format!("http client: {e}")))?;
        let base = cfg.endpoint.trim_end_matches('/');
        let url = if base.ends_with("/score") { base.to_string() } else { format!("{base}/score") };
        Ok(Self { http, url, cfg })
    }

    fn attempt(&self, text: &str, target: &str) -> Result<DialectScore, ScorerError> {
        let mut req = self.http.post(&self.url).json(&json!({"text": text, "target_dialect": target}));
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ScorerError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| ScorerError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ScorerError::Status { status: status.as_u16(), body });
        }
        let parsed: RemoteResponse = serde_json::from_str(&body).map_err(|e| ScorerError::Schema(e.to_string()))?;
        let score = DialectScore { aldi: parsed.aldi, nadi_probs: parsed.nadi_probs, target_dialect: target.to_string() };
        score.validate()?;
        Ok(score)
    }
}

impl DialectScorer for RemoteScorer {
    fn score(&self, text: &str, target_dialect: &str) -> Result<DialectScore, ScorerError> {
        let mut backoff = self.cfg.retry_backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(text, target_dialect) {
                Ok(s) => return Ok(s),
                // Schema and range violations are not transient.
                Err(e @ (ScorerError::Schema(_) | ScorerError::Metrics(_))) => return Err(e),
                Err(e) if attempt >= self.cfg.max_retries => return Err(e),
                Err(_) => {
                    attempt += 1;
                    if !backoff.is_zero() {
                        std::thread::sleep(backoff);
                        backoff = (backoff * 2).min(Duration::from_secs(10));
                    }
                }
            }
        }
    }

    fn backend_id(&self) -> String {
        format!("remote:{}", self.url)
    }
}

#[derive(Debug, Clone)]
pub enum ScorerBackend {
    Remote(RemoteScorer),
    Stub(StubScorer),
}

impl DialectScorer for ScorerBackend {
    fn score(&self, text: &str, target_dialect: &str) -> Result<DialectScore, ScorerError> {
        match self {
            ScorerBackend::Remote(r) => r.score(text, target_dialect),
            ScorerBackend::Stub(s) => s.score(text, target_dialect),
        }
    }

    fn backend_id(&self) -> String {
        match self {
            ScorerBackend::Remote(r) => r.backend_id(),
            ScorerBackend::Stub(s) => s.backend_id(),
        }
    }
}

pub fn score_text(text: &str, target_dialect: &str, backend: &ScorerBackend) -> Result<DialectScore, ScorerError> {
    backend.score(text, target_dialect)
}
