//! Corpus-level evaluation and report tables.
//!
//! Monolingual generation is scored with mean ADI2 over the final outputs;
//! each translation direction with corpus chrF++. Reports keep all scores in
//! `[0, 1]`; [`Scale::Percent`] multiplies chrF++ by 100 at serialization time
//! only, and ADI2 is always shown on the unit scale.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{
    chrfpp_corpus, chrfpp_sentence_mean, ChrfConfig, DialectScorer, MetricsError, ObjectiveKind, ScorerError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "DA->EN")]
    DaEn,
    #[serde(rename = "EN->DA")]
    EnDa,
    #[serde(rename = "DA->MSA")]
    DaMsa,
    #[serde(rename = "MSA->DA")]
    MsaDa,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::DaEn, Direction::EnDa, Direction::DaMsa, Direction::MsaDa];

    /// ASCII form used in files.
    pub fn code(self) -> &'static str {
        match self {
            Direction::DaEn => "DA->EN",
            Direction::EnDa => "EN->DA",
            Direction::DaMsa => "DA->MSA",
            Direction::MsaDa => "MSA->DA",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::DaEn => "DA→EN",
            Direction::EnDa => "EN→DA",
            Direction::DaMsa => "DA→MSA",
            Direction::MsaDa => "MSA→DA",
        })
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .to_ascii_uppercase()
            .replace('→', "->")
            .replace(['_', '2'], "->")
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect();
        let norm = if norm.contains("->") { norm } else { norm.replace('-', "->") };
        Direction::ALL
            .into_iter()
            .find(|d| d.code() == norm)
            .ok_or_else(|| format!("unknown direction `{s}` (expected DA->EN, EN->DA, DA->MSA or MSA->DA)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Monolingual,
    Translation(Direction),
}

impl TaskKind {
    fn key(self) -> &'static str {
        match self {
            TaskKind::Monolingual => "ADI2",
            TaskKind::Translation(d) => d.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub kind: TaskKind,
    pub dialect: String,
    pub outputs: Vec<String>,
    pub references: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChrfAveraging {
    /// Sum n-gram statistics over the corpus, then score.
    #[default]
    Micro,
    /// Mean of sentence-level scores.
    SentenceMean,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}: no outputs to evaluate")]
    Empty(String),
    #[error("translation task {direction} for `{dialect}` has no references")]
    MissingReferences { dialect: String, direction: Direction },
    #[error("{what}: {outputs} outputs but {references} references")]
    Misaligned { what: String, outputs: usize, references: usize },
    #[error("monolingual evaluation for `{0}` needs a scorer backend")]
    MissingScorer(String),
    #[error("scoring output {index} for `{dialect}`: {source}")]
    Scorer { dialect: String, index: usize, source: ScorerError },
    #[error("task {task} listed twice for dialect `{dialect}`")]
    DuplicateTask { dialect: String, task: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("report JSON: {0}")]
    Json(String),
}

pub fn eval_monolingual<S>(outputs: &[S], dialect: &str, scorer: &dyn DialectScorer) -> Result<f64, EvalError>
where
    S: AsRef<str> + Sync,
{
    if outputs.is_empty() {
        return Err(EvalError::Empty(format!("monolingual `{dialect}`")));
    }
    let per_output: Vec<Result<f64, ScorerError>> =
        outputs.par_iter().map(|o| scorer.adi2(o.as_ref(), dialect)).collect();
    let mut sum = 0.0;
    for (index, r) in per_output.into_iter().enumerate() {
        sum += r.map_err(|source| EvalError::Scorer { dialect: dialect.to_string(), index, source })?;
    }
    Ok(sum / outputs.len() as f64)
}

pub fn eval_translation<H, R>(
    outputs: &[H],
    references: &[R],
    cfg: &ChrfConfig,
    averaging: ChrfAveraging,
) -> Result<f64, EvalError>
where
    H: AsRef<str>,
    R: AsRef<str>,
{
    if outputs.len() != references.len() {
        return Err(EvalError::Misaligned {
            what: "translation".into(),
            outputs: outputs.len(),
            references: references.len(),
        });
    }
    if outputs.is_empty() {
        return Err(EvalError::Empty("translation".into()));
    }
    let pairs: Vec<(&str, &str)> = outputs.iter().zip(references).map(|(h, r)| (h.as_ref(), r.as_ref())).collect();
    Ok(match averaging {
        ChrfAveraging::Micro => chrfpp_corpus(&pairs, cfg)?,
        ChrfAveraging::SentenceMean => chrfpp_sentence_mean(&pairs, cfg)?,
    })
}

/// Settings that produced a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFingerprint {
    pub objective: Option<ObjectiveKind>,
    pub n_candidates: Option<usize>,
    pub trim_fraction: Option<f64>,
    pub lambda: Option<f64>,
    pub chrf: ChrfConfig,
    pub chrf_averaging: ChrfAveraging,
    pub scorer_backend: Option<String>,
}

impl Default for ConfigFingerprint {
    fn default() -> Self {
        Self {
            objective: None,
            n_candidates: None,
            trim_fraction: None,
            lambda: None,
            chrf: ChrfConfig::default(),
            chrf_averaging: ChrfAveraging::Micro,
            scorer_backend: None,
        }
    }
}

impl ConfigFingerprint {
    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn id(&self) -> String {
        let json = serde_json::to_vec(self).expect("fingerprint serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dialect: String,
    pub mono_adi2: Option<f64>,
    pub chrf_by_direction: BTreeMap<Direction, f64>,
    /// Number of evaluated outputs per task (`ADI2` or a direction code).
    pub counts: BTreeMap<String, usize>,
    pub fingerprint: ConfigFingerprint,
}

impl EvalReport {
    pub fn new(dialect: impl Into<String>, fingerprint: ConfigFingerprint) -> Self {
        Self {
            dialect: dialect.into(),
            mono_adi2: None,
            chrf_by_direction: BTreeMap::new(),
            counts: BTreeMap::new(),
            fingerprint,
        }
    }

    pub fn num_cells(&self) -> usize {
        usize::from(self.mono_adi2.is_some()) + self.chrf_by_direction.len()
    }
}

/// Runs every task and groups results per dialect, in first-seen order.
pub fn evaluate(
    tasks: &[EvalTask],
    scorer: Option<&dyn DialectScorer>,
    chrf: &ChrfConfig,
    averaging: ChrfAveraging,
    fingerprint: &ConfigFingerprint,
) -> Result<Vec<EvalReport>, EvalError> {
    let mut reports: Vec<EvalReport> = Vec::new();
    for task in tasks {
        let pos = match reports.iter().position(|r| r.dialect == task.dialect) {
            Some(p) => p,
            None => {
                reports.push(EvalReport::new(task.dialect.clone(), fingerprint.clone()));
                reports.len() - 1
            }
        };
        let report = &mut reports[pos];
        let key = task.kind.key().to_string();
        if report.counts.contains_key(&key) {
            return Err(EvalError::DuplicateTask { dialect: task.dialect.clone(), task: key });
        }
        match task.kind {
            TaskKind::Monolingual => {
                let scorer = scorer.ok_or_else(|| EvalError::MissingScorer(task.dialect.clone()))?;
                report.mono_adi2 = Some(eval_monolingual(&task.outputs, &task.dialect, scorer)?);
            }
            TaskKind::Translation(direction) => {
                let refs = task.references.as_ref().ok_or_else(|| EvalError::MissingReferences {
                    dialect: task.dialect.clone(),
                    direction,
                })?;
                let score = eval_translation(&task.outputs, refs, chrf, averaging)?;
                report.chrf_by_direction.insert(direction, score);
            }
        }
        report.counts.insert(key, task.outputs.len());
    }
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Text,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "text" | "table" | "text-table" => Ok(ReportFormat::Text),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Unit,
    Percent,
}

impl Scale {
    fn chrf(self, v: f64) -> f64 {
        match self {
            Scale::Unit => v,
            Scale::Percent => v * 100.0,
        }
    }

    fn chrf_text(self, v: f64) -> String {
        match self {
            Scale::Unit => format!("{:.4}", v),
            Scale::Percent => format!("{:.2}", v * 100.0),
        }
    }
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "unit" => Ok(Scale::Unit),
            "percent" | "pct" => Ok(Scale::Percent),
            other => Err(format!("unknown scale `{other}` (expected unit or percent)")),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    scale: Scale,
    reports: Vec<ScaledReport>,
}

#[derive(Serialize, Deserialize)]
struct ScaledReport {
    dialect: String,
    mono_adi2: Option<f64>,
    chrf_by_direction: BTreeMap<Direction, f64>,
    counts: BTreeMap<String, usize>,
    fingerprint: ConfigFingerprint,
    fingerprint_id: String,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Serializes reports; output bytes depend only on the inputs.
pub fn emit_report(reports: &[EvalReport], format: ReportFormat, scale: Scale) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let file = ReportFile {
                scale,
                reports: reports
                    .iter()
                    .map(|r| ScaledReport {
                        dialect: r.dialect.clone(),
                        mono_adi2: r.mono_adi2,
                        chrf_by_direction: r.chrf_by_direction.iter().map(|(d, v)| (*d, scale.chrf(*v))).collect(),
                        counts: r.counts.clone(),
                        fingerprint: r.fingerprint.clone(),
                        fingerprint_id: r.fingerprint.id(),
                    })
                    .collect(),
            };
            let mut out = serde_json::to_vec_pretty(&file).expect("report serializes");
            out.push(b'\n');
            out
        }
        ReportFormat::Csv => {
            let mut out = String::from("dialect,task,score,count,fingerprint\n");
            for r in reports {
                let id = r.fingerprint.id();
                if let Some(v) = r.mono_adi2 {
                    let n = r.counts.get("ADI2").copied().unwrap_or(0);
                    let _ = writeln!(out, "{},ADI2,{:.6},{n},{id}", csv_field(&r.dialect), v);
                }
                for (d, v) in &r.chrf_by_direction {
                    let n = r.counts.get(d.code()).copied().unwrap_or(0);
                    let score = match scale {
                        Scale::Unit => format!("{v:.6}"),
                        Scale::Percent => format!("{:.4}", v * 100.0),
                    };
                    let _ = writeln!(out, "{},{},{score},{n},{id}", csv_field(&r.dialect), d.code());
                }
            }
            out.into_bytes()
        }
        ReportFormat::Text => text_table(reports, scale).into_bytes(),
    }
}

fn text_table(reports: &[EvalReport], scale: Scale) -> String {
    let mut header = vec!["Dialect".to_string(), "ADI2".to_string()];
    header.extend(Direction::ALL.iter().map(|d| d.to_string()));
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.dialect.clone(), r.mono_adi2.map_or("-".into(), |v| format!("{v:.3}"))];
        row.extend(
            Direction::ALL
                .iter()
                .map(|d| r.chrf_by_direction.get(d).map_or("-".into(), |v| scale.chrf_text(*v))),
        );
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| {
                let pad = w - cell.chars().count();
                if c == 0 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    let unit = match scale {
        Scale::Unit => "unit",
        Scale::Percent => "percent",
    };
    let _ = writeln!(out, "\nchrF++ scale: {unit}");
    for r in reports {
        let _ = writeln!(out, "config[{}]: {}", r.dialect, r.fingerprint.id());
    }
    out
}

/// Reads back a JSON report, undoing the display scale.
pub fn parse_json_report(bytes: &[u8]) -> Result<Vec<EvalReport>, EvalError> {
    let file: ReportFile = serde_json::from_slice(bytes).map_err(|e| EvalError::Json(e.to_string()))?;
    Ok(file
        .reports
        .into_iter()
        .map(|r| EvalReport {
            dialect: r.dialect,
            mono_adi2: r.mono_adi2,
            chrf_by_direction: r
                .chrf_by_direction
                .into_iter()
                .map(|(d, v)| match file.scale {
                    Scale::Unit => (d, v),
                    Scale::Percent => (d, v / 100.0),
                })
                .collect(),
            counts: r.counts,
            fingerprint: r.fingerprint,
        })
        .collect())
}
