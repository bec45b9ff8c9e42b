//! External services and offline files that feed the decoder.

mod candidates;
mod generation;
mod scorer;

pub use candidates::{
    load_candidates, read_decode_inputs, save_candidates, write_jsonl_line, CandidateRecord, DecodeInput, JsonlReader, PromptRecord,
};
pub use generation::{chat_completions_url, generate_candidates, GenConfig, GenerationClient};
pub use scorer::{score_text, RemoteScorer, RemoteScorerConfig, ScorerBackend, StubLexicon, StubScorer};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("prompt `{prompt_id}` candidate {index}: transport failure after {attempts} attempt(s): {message}")]
    Transport { prompt_id: String, index: usize, attempts: u32, message: String },
    #[error("prompt `{prompt_id}` candidate {index}: HTTP {status} after {attempts} attempt(s): {body}")]
    Status { prompt_id: String, index: usize, attempts: u32, status: u16, body: String },
    #[error("prompt `{prompt_id}` candidate {index}: malformed response after {attempts} attempt(s): {message}")]
    MalformedResponse { prompt_id: String, index: usize, attempts: u32, message: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: malformed JSON record: {message}")]
    MalformedLine { path: String, line: usize, message: String },
    #[error("{path}:{line}: prompt `{prompt_id}` has an empty candidate list")]
    EmptyCandidates { path: String, line: usize, prompt_id: String },
    #[error("lexicon: {0}")]
    Lexicon(String),
}
