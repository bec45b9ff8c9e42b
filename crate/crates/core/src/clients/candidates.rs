//! JSONL files of prompts and candidate sets.
//!
//! Candidate files hold one object per prompt:
//! `{"prompt_id": ..., "source": ..., "candidates": ["...", ...]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::ClientError;
use crate::mbr::CandidateSet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub prompt_id: String,
    #[serde(default)]
    pub source: String,
    pub candidates: Vec<String>,
}

impl From<&CandidateSet> for CandidateRecord {
    fn from(set: &CandidateSet) -> Self {
        Self {
            prompt_id: set.prompt_id.clone(),
            source: set.source.clone(),
            candidates: set.texts().map(str::to_owned).collect(),
        }
    }
}

/// A decode input line: either a bare prompt (online mode) or a prompt with
/// pre-sampled candidates (offline mode).
#[derive(Debug, Clone, PartialEq)]
pub enum DecodeInput {
    Prompt(PromptRecord),
    Candidates(CandidateSet),
}

impl DecodeInput {
    pub fn prompt_id(&self) -> &str {
        match self {
            DecodeInput::Prompt(p) => &p.prompt_id,
            DecodeInput::Candidates(c) => &c.prompt_id,
        }
    }
}

#[derive(Deserialize)]
struct RawDecodeInput {
    prompt_id: String,
    #[serde(default)]
    source: String,
    #[serde(default)]
    candidates: Option<Vec<String>>,
}

/// Streaming reader over a JSONL file; blank lines are skipped and every
/// item carries its 1-based line number.
pub struct JsonlReader<T> {
    path: PathBuf,
    lines: Lines<BufReader<File>>,
    line_no: usize,
    _marker: PhantomData<T>,
}

impl<T: DeserializeOwned> JsonlReader<T> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ClientError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|source| ClientError::Io { path: path.display().to_string(), source })?;
        Ok(Self { path, lines: BufReader::new(file).lines(), line_no: 0, _marker: PhantomData })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl<T: DeserializeOwned> Iterator for JsonlReader<T> {
    type Item = Result<(usize, T), ClientError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(source) => return Some(Err(ClientError::Io { path: self.path.display().to_string(), source })),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(serde_json::from_str(&line).map(|v| (self.line_no, v)).map_err(|e| {
                ClientError::MalformedLine {
                    path: self.path.display().to_string(),
                    line: self.line_no,
                    message: e.to_string(),
                }
            }));
        }
    }
}

fn candidate_set(path: &Path, line: usize, prompt_id: String, source: String, texts: Vec<String>) -> Result<CandidateSet, ClientError> {
    if texts.is_empty() {
        return Err(ClientError::EmptyCandidates { path: path.display().to_string(), line, prompt_id });
    }
    CandidateSet::from_texts(prompt_id, source, texts).map_err(|e| ClientError::MalformedLine {
        path: path.display().to_string(),
        line,
        message: e.to_string(),
    })
}

/// Streams decode inputs, classifying each line as a prompt or a candidate set.
pub fn read_decode_inputs(
    path: impl AsRef<Path>,
) -> Result<impl Iterator<Item = Result<(usize, DecodeInput), ClientError>>, ClientError> {
    let reader = JsonlReader::<RawDecodeInput>::open(path)?;
    let path = reader.path().to_path_buf();
    Ok(reader.map(move |item| {
        let (line, raw) = item?;
        let input = match raw.candidates {
            Some(texts) => DecodeInput::Candidates(candidate_set(&path, line, raw.prompt_id, raw.source, texts)?),
            None => DecodeInput::Prompt(PromptRecord { prompt_id: raw.prompt_id, source: raw.source }),
        };
        Ok((line, input))
    }))
}

pub fn load_candidates(path: impl AsRef<Path>) -> Result<Vec<CandidateSet>, ClientError> {
    let path = path.as_ref();
    JsonlReader::<CandidateRecord>::open(path)?
        .map(|item| {
            let (line, rec) = item?;
            candidate_set(path, line, rec.prompt_id, rec.source, rec.candidates)
        })
        .collect()
}

pub fn write_jsonl_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")
}

pub fn save_candidates(sets: &[CandidateSet], path: impl AsRef<Path>) -> Result<(), ClientError> {
    let path = path.as_ref();
    let io_err = |source| ClientError::Io { path: path.display().to_string(), source };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for set in sets {
        write_jsonl_line(&mut out, &CandidateRecord::from(set)).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
