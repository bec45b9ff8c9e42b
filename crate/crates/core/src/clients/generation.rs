//! Candidate sampling against an OpenAI-compatible chat-completions server.

use std::time::Duration;

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::ClientError;
use crate::mbr::{Candidate, CandidateSet};

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    /// Server base URL (e.g. `http://localhost:8000/v1`) or the full
    /// `/chat/completions` URL.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub num_candidates: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Candidate `i` is requested with seed `seed_base + i`.
    pub seed_base: Option<u64>,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub retry_backoff: Duration,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            api_key: None,
            num_candidates: 20,
            temperature: 0.9,
            top_p: 0.95,
            max_tokens: 256,
            seed_base: None,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            retry_backoff: Duration::from_millis(250),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.num_candidates < 1 {
            return Err(ClientError::InvalidConfig("num_candidates must be >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(ClientError::InvalidConfig(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ClientError::InvalidConfig(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.endpoint.is_empty() {
            return Err(ClientError::InvalidConfig("generation endpoint is empty".into()));
        }
        Ok(())
    }
}

pub fn chat_completions_url(endpoint: &str) -> String {
    let trimmed = endpoint.trim_end_matches('/');
    if trimmed.ends_with("/chat/completions") {
        trimmed.to_string()
    } else {
        format!("{trimmed}/chat/completions")
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

enum AttemptError {
    Transport(String),
    Status(u16, String),
    Malformed(String),
}

pub struct GenerationClient {
    http: reqwest::blocking::Client,
    url: String,
    cfg: GenConfig,
}

impl GenerationClient {
    pub fn new(cfg: GenConfig) -> Result<Self, ClientError> {
        cfg.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| ClientError::InvalidConfig(format!("http client: {e}")))?;
        Ok(Self { http, url: chat_completions_url(&cfg.endpoint), cfg })
    }

    pub fn config(&self) -> &GenConfig {
        &self.cfg
    }

    fn request_body(&self, prompt: &str, seed: Option<u64>) -> Value {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "top_p": self.cfg.top_p,
            "max_tokens": self.cfg.max_tokens,
        });
        if let Some(seed) = seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<String, AttemptError> {
        let mut req = self.http.post(&self.url).json(body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| AttemptError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| AttemptError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(AttemptError::Status(status.as_u16(), truncate(&text, 200)));
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| AttemptError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| AttemptError::Malformed("no choices[0].message.content".into()))
    }

    fn sample_one(&self, prompt: &str, prompt_id: &str, index: usize) -> Result<Candidate, ClientError> {
        let seed = self.cfg.seed_base.map(|b| b.wrapping_add(index as u64));
        let body = self.request_body(prompt, seed);
        let mut backoff = self.cfg.retry_backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(text) => {
                    let meta = seed.map(|s| {
                        let mut m = Map::new();
                        m.insert("seed".into(), json!(s));
                        m
                    });
                    return Ok(Candidate { index, text, meta });
                }
                Err(e) if attempts > self.cfg.max_retries => {
                    let prompt_id = prompt_id.to_string();
                    return Err(match e {
                        AttemptError::Transport(message) => ClientError::Transport { prompt_id, index, attempts, message },
                        AttemptError::Status(status, body) => ClientError::Status { prompt_id, index, attempts, status, body },
                        AttemptError::Malformed(message) => {
                            ClientError::MalformedResponse { prompt_id, index, attempts, message }
                        }
                    });
                }
                Err(_) => {
                    log::debug!("prompt {prompt_id} candidate {index}: attempt {attempts} failed, retrying");
                    if !backoff.is_zero() {
                        std::thread::sleep(backoff);
                        backoff = (backoff * 2).min(Duration::from_secs(10));
                    }
                }
            }
        }
    }

    /// Samples `num_candidates` outputs with one request each. Either every
    /// candidate succeeds or the whole set fails.
    pub fn generate_candidates(&self, prompt: &str, prompt_id: &str) -> Result<CandidateSet, ClientError> {
        let results: Vec<Result<Candidate, ClientError>> = (0..self.cfg.num_candidates)
            .into_par_iter()
            .map(|i| self.sample_one(prompt, prompt_id, i))
            .collect();
        let candidates = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        CandidateSet::new(prompt_id, prompt, candidates).map_err(|e| ClientError::InvalidConfig(e.to_string()))
    }
}

pub fn generate_candidates(prompt: &str, prompt_id: &str, cfg: &GenConfig) -> Result<CandidateSet, ClientError> {
    GenerationClient::new(cfg.clone())?.generate_candidates(prompt, prompt_id)
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}
