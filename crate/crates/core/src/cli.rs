//! `dialect-mbr` command line.
//!
//! Settings resolve as flags > environment > `--config` TOML file > built-in
//! defaults. Every command streams its JSONL input in bounded chunks and
//! writes output in input order regardless of `--jobs`.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;

use crate::clients::{
    read_decode_inputs, write_jsonl_line, CandidateRecord, DecodeInput, GenConfig, GenerationClient, JsonlReader,
    PromptRecord, RemoteScorer, RemoteScorerConfig, ScorerBackend, StubLexicon, StubScorer,
};
use crate::evalharness::{
    emit_report, evaluate, ChrfAveraging, ConfigFingerprint, Direction, EvalTask, ReportFormat, Scale, TaskKind,
};
use crate::mbr::{CandidateSet, SelectionResult, Selector};
use crate::metrics::{ChrfConfig, DialectScorer, ObjectiveKind};
use crate::ties::{self, KeyPolicy, LoraOverrides, MergeConfig, MergeSpace};

#[derive(Debug, Parser)]
#[command(name = "dialect-mbr", version, about = "Dialect-aware adapter merging, candidate selection and evaluation")]
pub struct Cli {
    /// Worker threads for all parallel work (0 = one per CPU).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// TOML file with default settings.
    #[arg(long, global = true, env = "DIALECT_MBR_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// TIES-merge LoRA adapter archives.
    Merge(MergeCmd),
    /// Sample candidate sets from a generation server.
    Generate(GenerateCmd),
    /// Select one output per prompt.
    Decode(DecodeCmd),
    /// Score outputs and write a report.
    Eval(EvalCmd),
    /// Merge (optional), decode and evaluate in one run.
    Pipeline(PipelineCmd),
}

#[derive(Debug, Args, Default, Clone)]
pub struct MergeArgs {
    #[arg(long)]
    pub trim_fraction: Option<f64>,
    #[arg(long = "lambda")]
    pub lambda: Option<f64>,
    /// materialized or factor
    #[arg(long)]
    pub merge_space: Option<MergeSpace>,
    /// intersect or union-error
    #[arg(long)]
    pub key_policy: Option<KeyPolicy>,
    /// Overrides `lora_alpha` from adapter metadata.
    #[arg(long)]
    pub lora_alpha: Option<f64>,
    /// Overrides `r` from adapter metadata.
    #[arg(long)]
    pub lora_rank: Option<usize>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct GenArgs {
    #[arg(long, env = "DIALECT_MBR_GEN_URL")]
    pub gen_url: Option<String>,
    #[arg(long, env = "DIALECT_MBR_GEN_TOKEN", hide_env_values = true)]
    pub gen_token: Option<String>,
    #[arg(long, env = "DIALECT_MBR_MODEL")]
    pub model: Option<String>,
    #[arg(long)]
    pub n_candidates: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// Seed base; candidate i is sampled with seed + i.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    #[arg(long)]
    pub retry_backoff_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Stub,
    Remote,
}

#[derive(Debug, Args, Default, Clone)]
pub struct ScorerArgs {
    #[arg(long, value_enum)]
    pub scorer: Option<ScorerKind>,
    #[arg(long, env = "DIALECT_MBR_SCORER_URL")]
    pub scorer_url: Option<String>,
    #[arg(long, env = "DIALECT_MBR_SCORER_TOKEN", hide_env_values = true)]
    pub scorer_token: Option<String>,
    /// JSON lexicon `{"label": ["marker", ...]}` for the stub scorer.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct ChrfArgs {
    #[arg(long)]
    pub chrf_char_order: Option<usize>,
    #[arg(long)]
    pub chrf_word_order: Option<usize>,
    #[arg(long)]
    pub chrf_beta: Option<f64>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct ObjectiveArgs {
    #[arg(long)]
    pub dialect: Option<String>,
    /// adi2, chrf or combined
    #[arg(long)]
    pub objective: Option<ObjectiveKind>,
    /// ADI2 weight of the combined objective.
    #[arg(long)]
    pub combined_weight: Option<f64>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct ReportArgs {
    /// json, csv or text
    #[arg(long)]
    pub format: Option<ReportFormat>,
    /// unit or percent (chrF++ only)
    #[arg(long)]
    pub scale: Option<Scale>,
    /// Use the mean of sentence chrF++ instead of corpus micro-averaging.
    #[arg(long)]
    pub sentence_mean: bool,
}

#[derive(Debug, Args)]
pub struct MergeCmd {
    /// Adapter archives to merge.
    #[arg(required = true)]
    pub adapters: Vec<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    #[command(flatten)]
    pub merge: MergeArgs,
}

#[derive(Debug, Args)]
pub struct GenerateCmd {
    /// Prompts JSONL `{"prompt_id", "source"}`.
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[command(flatten)]
    pub gen: GenArgs,
}

#[derive(Debug, Args)]
pub struct DecodeCmd {
    /// Prompts JSONL (online) or candidates JSONL (offline).
    #[arg(long)]
    pub input: PathBuf,
    /// SelectionResult JSONL.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Also write sampled candidate sets here.
    #[arg(long)]
    pub save_candidates: Option<PathBuf>,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    #[command(flatten)]
    pub gen: GenArgs,
    #[command(flatten)]
    pub chrf: ChrfArgs,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    /// Outputs: decode JSONL or plain text, one output per line.
    #[arg(long, required_unless_present = "manifest")]
    pub outputs: Option<PathBuf>,
    /// References, one per line; makes this a translation task.
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// Translation direction (DA->EN, EN->DA, DA->MSA, MSA->DA).
    #[arg(long)]
    pub direction: Option<Direction>,
    /// TOML manifest of `[[task]]` entries for multi-task reports.
    #[arg(long, conflicts_with_all = ["outputs", "refs", "direction"])]
    pub manifest: Option<PathBuf>,
    /// Report path (stdout if omitted).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    #[command(flatten)]
    pub chrf: ChrfArgs,
    #[command(flatten)]
    pub report_opts: ReportArgs,
    /// Recorded in the report fingerprint.
    #[arg(long)]
    pub n_candidates: Option<usize>,
    #[command(flatten)]
    pub merge: MergeArgs,
}

#[derive(Debug, Args)]
pub struct PipelineCmd {
    /// Prompts JSONL (online) or candidates JSONL (offline).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Adapters to TIES-merge before decoding.
    #[arg(long = "adapter")]
    pub adapters: Vec<PathBuf>,
    /// References for a translation evaluation of the selections.
    #[arg(long)]
    pub refs: Option<PathBuf>,
    #[arg(long, requires = "refs")]
    pub direction: Option<Direction>,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    #[command(flatten)]
    pub gen: GenArgs,
    #[command(flatten)]
    pub chrf: ChrfArgs,
    #[command(flatten)]
    pub merge: MergeArgs,
    #[command(flatten)]
    pub report_opts: ReportArgs,
}

/// Settings file; every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub jobs: Option<usize>,
    pub dialect: Option<String>,
    pub objective: Option<String>,
    pub combined_weight: Option<f64>,
    #[serde(default)]
    pub generation: FileGen,
    #[serde(default)]
    pub scorer: FileScorer,
    #[serde(default)]
    pub merge: FileMerge,
    #[serde(default)]
    pub chrf: FileChrf,
    #[serde(default)]
    pub report: FileReport,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileGen {
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub n_candidates: Option<usize>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_tokens: Option<u32>,
    pub seed: Option<u64>,
    pub timeout_secs: Option<u64>,
    pub max_retries: Option<u32>,
    pub retry_backoff_ms: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileScorer {
    pub kind: Option<ScorerKind>,
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub lexicon: Option<PathBuf>,
    pub timeout_secs: Option<u64>,
    pub max_retries: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileMerge {
    pub trim_fraction: Option<f64>,
    pub lambda: Option<f64>,
    pub space: Option<String>,
    pub key_policy: Option<String>,
    pub lora_alpha: Option<f64>,
    pub lora_rank: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileChrf {
    pub char_order: Option<usize>,
    pub word_order: Option<usize>,
    pub beta: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileReport {
    pub format: Option<String>,
    pub scale: Option<String>,
    pub sentence_mean: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

fn parse_opt<T>(value: &Option<String>, what: &str) -> Result<Option<T>>
where
    T: std::str::FromStr<Err = String>,
{
    value
        .as_deref()
        .map(|s| s.parse::<T>().map_err(|e| anyhow!("config {what}: {e}")))
        .transpose()
}

/// Resolves settings against flags, environment, config file and defaults.
pub struct Ctx {
    file: FileConfig,
}

impl Ctx {
    pub fn new(file: FileConfig) -> Self {
        Self { file }
    }

    fn merge_config(&self, a: &MergeArgs) -> Result<(MergeConfig, LoraOverrides)> {
        let f = &self.file.merge;
        let d = MergeConfig::default();
        let cfg = MergeConfig {
            trim_fraction: a.trim_fraction.or(f.trim_fraction).unwrap_or(d.trim_fraction),
            lambda: a.lambda.or(f.lambda).unwrap_or(d.lambda),
            space: match a.merge_space {
                Some(s) => s,
                None => parse_opt(&f.space, "merge.space")?.unwrap_or(d.space),
            },
            key_policy: match a.key_policy {
                Some(k) => k,
                None => parse_opt(&f.key_policy, "merge.key_policy")?.unwrap_or(d.key_policy),
            },
        };
        cfg.validate()?;
        let overrides = LoraOverrides { alpha: a.lora_alpha.or(f.lora_alpha), rank: a.lora_rank.or(f.lora_rank) };
        Ok((cfg, overrides))
    }

    fn gen_config(&self, a: &GenArgs) -> Result<GenConfig> {
        let f = &self.file.generation;
        let d = GenConfig::default();
        let cfg = GenConfig {
            endpoint: a.gen_url.clone().or_else(|| f.endpoint.clone()).unwrap_or(d.endpoint),
            model: a.model.clone().or_else(|| f.model.clone()).unwrap_or(d.model),
            api_key: a.gen_token.clone().or_else(|| f.api_key.clone()),
            num_candidates: a.n_candidates.or(f.n_candidates).unwrap_or(d.num_candidates),
            temperature: a.temperature.or(f.temperature).unwrap_or(d.temperature),
            top_p: a.top_p.or(f.top_p).unwrap_or(d.top_p),
            max_tokens: a.max_tokens.or(f.max_tokens).unwrap_or(d.max_tokens),
            seed_base: a.seed.or(f.seed),
            timeout: a.timeout_secs.or(f.timeout_secs).map(Duration::from_secs).unwrap_or(d.timeout),
            max_retries: a.max_retries.or(f.max_retries).unwrap_or(d.max_retries),
            retry_backoff: a
                .retry_backoff_ms
                .or(f.retry_backoff_ms)
                .map(Duration::from_millis)
                .unwrap_or(d.retry_backoff),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn scorer(&self, a: &ScorerArgs) -> Result<Arc<dyn DialectScorer>> {
        let f = &self.file.scorer;
        let kind = a.scorer.or(f.kind).unwrap_or(ScorerKind::Stub);
        let backend = match kind {
            ScorerKind::Stub => {
                let lexicon = match a.lexicon.as_ref().or(f.lexicon.as_ref()) {
                    Some(p) => StubLexicon::from_json_file(p)?,
                    None => StubLexicon::builtin(),
                };
                ScorerBackend::Stub(StubScorer::new(lexicon))
            }
            ScorerKind::Remote => {
                let d = RemoteScorerConfig::default();
                let endpoint = a
                    .scorer_url
                    .clone()
                    .or_else(|| f.endpoint.clone())
                    .ok_or_else(|| anyhow!("--scorer remote needs --scorer-url or DIALECT_MBR_SCORER_URL"))?;
                ScorerBackend::Remote(RemoteScorer::new(RemoteScorerConfig {
                    endpoint,
                    api_key: a.scorer_token.clone().or_else(|| f.api_key.clone()),
                    timeout: f.timeout_secs.map(Duration::from_secs).unwrap_or(d.timeout),
                    max_retries: f.max_retries.unwrap_or(d.max_retries),
                    retry_backoff: d.retry_backoff,
                })?)
            }
        };
        Ok(Arc::new(backend))
    }

    fn chrf(&self, a: &ChrfArgs) -> Result<ChrfConfig> {
        let f = &self.file.chrf;
        let d = ChrfConfig::default();
        let cfg = ChrfConfig {
            max_char_n: a.chrf_char_order.or(f.char_order).unwrap_or(d.max_char_n),
            max_word_n: a.chrf_word_order.or(f.word_order).unwrap_or(d.max_word_n),
            beta: a.chrf_beta.or(f.beta).unwrap_or(d.beta),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn objective(&self, a: &ObjectiveArgs) -> Result<(ObjectiveKind, Option<String>, f64)> {
        let objective = match a.objective {
            Some(o) => o,
            None => parse_opt(&self.file.objective, "objective")?.unwrap_or(ObjectiveKind::Adi2),
        };
        let dialect = a.dialect.clone().or_else(|| self.file.dialect.clone());
        let weight = a.combined_weight.or(self.file.combined_weight).unwrap_or(0.5);
        Ok((objective, dialect, weight))
    }

    fn report(&self, a: &ReportArgs) -> Result<(ReportFormat, Scale, ChrfAveraging)> {
        let f = &self.file.report;
        let format = match a.format {
            Some(v) => v,
            None => parse_opt(&f.format, "report.format")?.unwrap_or(ReportFormat::Json),
        };
        let scale = match a.scale {
            Some(v) => v,
            None => parse_opt(&f.scale, "report.scale")?.unwrap_or(Scale::Unit),
        };
        let averaging = if a.sentence_mean || f.sentence_mean.unwrap_or(false) {
            ChrfAveraging::SentenceMean
        } else {
            ChrfAveraging::Micro
        };
        Ok((format, scale, averaging))
    }

    fn selector(&self, o: &ObjectiveArgs, s: &ScorerArgs, c: &ChrfArgs) -> Result<Selector> {
        let (objective, dialect, weight) = self.objective(o)?;
        let scorer = if objective.needs_scorer() { Some(self.scorer(s)?) } else { None };
        if objective.needs_scorer() && dialect.is_none() {
            bail!("objective `{objective}` needs --dialect");
        }
        Ok(Selector::new(objective, scorer, dialect, self.chrf(c)?, weight)?)
    }
}

fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn chunk_size() -> usize {
    (rayon::current_num_threads() * 4).max(16)
}

pub fn cmd_merge(cmd: &MergeCmd, ctx: &Ctx) -> Result<()> {
    let (cfg, overrides) = ctx.merge_config(&cmd.merge)?;
    let adapters = cmd
        .adapters
        .iter()
        .map(|p| ties::read_archive(p).with_context(|| format!("reading adapter {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let merged = ties::merge_adapters(&adapters, &cfg, overrides)?;
    if let Some(parent) = cmd.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    ties::write_archive(&merged, &cmd.out)?;
    log::info!("merged {} adapters into {} ({} tensors)", adapters.len(), cmd.out.display(), merged.tensors.len());
    Ok(())
}

pub fn cmd_generate(cmd: &GenerateCmd, ctx: &Ctx) -> Result<()> {
    let client = GenerationClient::new(ctx.gen_config(&cmd.gen)?)?;
    let mut out = create_writer(&cmd.out)?;
    let mut reader = JsonlReader::<PromptRecord>::open(&cmd.prompts)?.peekable();
    let mut failures = 0usize;
    while reader.peek().is_some() {
        let chunk: Vec<PromptRecord> = reader
            .by_ref()
            .take(chunk_size())
            .map(|r| r.map(|(_, p)| p))
            .collect::<Result<_, _>>()?;
        let results: Vec<_> = chunk
            .par_iter()
            .map(|p| client.generate_candidates(&p.source, &p.prompt_id))
            .collect();
        for r in results {
            match r {
                Ok(set) => write_jsonl_line(&mut out, &CandidateRecord::from(&set))?,
                Err(e) => {
                    failures += 1;
                    eprintln!("error: {e}");
                }
            }
        }
    }
    out.flush()?;
    if failures > 0 {
        bail!("{failures} prompt(s) failed");
    }
    Ok(())
}

/// Streams decode inputs to SelectionResult JSONL. Returns the selections
/// when `collect` is set (used by the pipeline).
fn decode_stream(
    input: &Path,
    out_path: &Path,
    save_candidates: Option<&Path>,
    selector: &Selector,
    client: Option<&GenerationClient>,
    collect: bool,
) -> Result<Vec<SelectionResult>> {
    let mut out = create_writer(out_path)?;
    let mut cand_out = save_candidates.map(create_writer).transpose()?;
    let mut reader = read_decode_inputs(input)?.peekable();
    let mut collected = Vec::new();
    let mut failures = 0usize;
    while reader.peek().is_some() {
        let chunk: Vec<DecodeInput> = reader
            .by_ref()
            .take(chunk_size())
            .map(|r| r.map(|(_, d)| d))
            .collect::<Result<_, _>>()?;
        let results: Vec<Result<(CandidateSet, SelectionResult)>> = chunk
            .into_par_iter()
            .map(|item| {
                let set = match item {
                    DecodeInput::Candidates(set) => set,
                    DecodeInput::Prompt(p) => {
                        let client = client.ok_or_else(|| {
                            anyhow!("prompt `{}` has no candidates and no generation server is configured", p.prompt_id)
                        })?;
                        client.generate_candidates(&p.source, &p.prompt_id)?
                    }
                };
                let sel = selector.select(&set)?;
                Ok((set, sel))
            })
            .collect();
        for r in results {
            match r {
                Ok((set, sel)) => {
                    write_jsonl_line(&mut out, &sel)?;
                    if let Some(c) = cand_out.as_mut() {
                        write_jsonl_line(c, &CandidateRecord::from(&set))?;
                    }
                    if collect {
                        collected.push(sel);
                    }
                }
                Err(e) => {
                    failures += 1;
                    eprintln!("error: {e:#}");
                }
            }
        }
    }
    out.flush()?;
    if let Some(mut c) = cand_out {
        c.flush()?;
    }
    if failures > 0 {
        bail!("{failures} prompt(s) failed");
    }
    Ok(collected)
}

fn needs_generation(input: &Path) -> Result<bool> {
    for item in read_decode_inputs(input)? {
        if let (_, DecodeInput::Prompt(_)) = item? {
            return Ok(true);
        }
    }
    Ok(false)
}

pub fn cmd_decode(cmd: &DecodeCmd, ctx: &Ctx) -> Result<()> {
    let selector = ctx.selector(&cmd.objective, &cmd.scorer, &cmd.chrf)?;
    let client = if needs_generation(&cmd.input)? {
        Some(GenerationClient::new(ctx.gen_config(&cmd.gen)?)?)
    } else {
        None
    };
    decode_stream(&cmd.input, &cmd.out, cmd.save_candidates.as_deref(), &selector, client.as_ref(), false)?;
    Ok(())
}

/// Reads outputs from decode JSONL (`chosen_text`) or plain text lines.
pub fn read_outputs(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading outputs {}", path.display()))?;
    let first = text.lines().find(|l| !l.trim().is_empty());
    let is_jsonl = first
        .map(|l| l.trim_start().starts_with('{') && serde_json::from_str::<SelectionResult>(l).is_ok())
        .unwrap_or(false);
    if is_jsonl {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<SelectionResult>(l)
                    .map(|s| s.chosen_text)
                    .with_context(|| format!("{}:{}: not a selection record", path.display(), i + 1))
            })
            .collect()
    } else {
        read_lines(path)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    BufReader::new(file)
        .lines()
        .map(|l| l.map(|s| s.trim_end_matches('\r').to_string()).map_err(Into::into))
        .collect()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    task: Vec<ManifestTask>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestTask {
    dialect: String,
    kind: String,
    direction: Option<String>,
    outputs: PathBuf,
    references: Option<PathBuf>,
}

fn load_manifest(path: &Path) -> Result<Vec<EvalTask>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let manifest: Manifest = toml::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest
        .task
        .into_iter()
        .map(|t| {
            let kind = match t.kind.to_ascii_lowercase().as_str() {
                "monolingual" | "mono" => TaskKind::Monolingual,
                "translation" | "mt" => {
                    let d = t.direction.as_deref().ok_or_else(|| anyhow!("translation task for `{}` needs a direction", t.dialect))?;
                    TaskKind::Translation(d.parse().map_err(|e: String| anyhow!(e))?)
                }
                other => bail!("unknown task kind `{other}`"),
            };
            let outputs = read_outputs(&base.join(&t.outputs))?;
            let references = t.references.map(|r| read_lines(&base.join(r))).transpose()?;
            Ok(EvalTask { kind, dialect: t.dialect, outputs, references })
        })
        .collect()
}

fn single_task(cmd: &EvalCmd, dialect: Option<String>) -> Result<EvalTask> {
    let outputs_path = cmd.outputs.as_ref().ok_or_else(|| anyhow!("--outputs is required without --manifest"))?;
    let dialect = dialect.ok_or_else(|| anyhow!("--dialect is required"))?;
    let outputs = read_outputs(outputs_path)?;
    let (kind, references) = match (cmd.direction, &cmd.refs) {
        (Some(d), Some(refs)) => (TaskKind::Translation(d), Some(read_lines(refs)?)),
        (Some(d), None) => bail!("translation task {d} needs --refs"),
        (None, Some(_)) => bail!("--refs given without --direction"),
        (None, None) => (TaskKind::Monolingual, None),
    };
    Ok(EvalTask { kind, dialect, outputs, references })
}

fn write_report(bytes: &[u8], path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = create_writer(p)?;
            w.write_all(bytes)?;
            w.flush()?;
        }
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

pub fn cmd_eval(cmd: &EvalCmd, ctx: &Ctx) -> Result<()> {
    let dialect = cmd.objective.dialect.clone().or_else(|| ctx.file.dialect.clone());
    let tasks = match &cmd.manifest {
        Some(m) => load_manifest(m)?,
        None => vec![single_task(cmd, dialect)?],
    };
    let chrf = ctx.chrf(&cmd.chrf)?;
    let (format, scale, averaging) = ctx.report(&cmd.report_opts)?;
    let needs_scorer = tasks.iter().any(|t| t.kind == TaskKind::Monolingual);
    let scorer = if needs_scorer { Some(ctx.scorer(&cmd.scorer)?) } else { None };
    let fingerprint = ConfigFingerprint {
        objective: match cmd.objective.objective {
            Some(o) => Some(o),
            None => parse_opt(&ctx.file.objective, "objective")?,
        },
        n_candidates: cmd.n_candidates.or(ctx.file.generation.n_candidates),
        trim_fraction: cmd.merge.trim_fraction.or(ctx.file.merge.trim_fraction),
        lambda: cmd.merge.lambda.or(ctx.file.merge.lambda),
        chrf,
        chrf_averaging: averaging,
        scorer_backend: scorer.as_ref().map(|s| s.backend_id()),
    };
    let reports = evaluate(&tasks, scorer.as_deref(), &chrf, averaging, &fingerprint)?;
    write_report(&emit_report(&reports, format, scale), cmd.report.as_deref())
}

pub fn cmd_pipeline(cmd: &PipelineCmd, ctx: &Ctx) -> Result<()> {
    fs::create_dir_all(&cmd.out_dir).with_context(|| format!("creating {}", cmd.out_dir.display()))?;
    let (merge_cfg, _) = ctx.merge_config(&cmd.merge)?;
    let merged = !cmd.adapters.is_empty();
    if merged {
        let merge = MergeCmd { adapters: cmd.adapters.clone(), out: cmd.out_dir.join("merged.safetensors"), merge: cmd.merge.clone() };
        cmd_merge(&merge, ctx)?;
    }

    let selector = ctx.selector(&cmd.objective, &cmd.scorer, &cmd.chrf)?;
    let online = needs_generation(&cmd.input)?;
    let gen_cfg = if online { Some(ctx.gen_config(&cmd.gen)?) } else { None };
    let client = gen_cfg.clone().map(GenerationClient::new).transpose()?;
    let selections = decode_stream(
        &cmd.input,
        &cmd.out_dir.join("selections.jsonl"),
        online.then(|| cmd.out_dir.join("candidates.jsonl")).as_deref(),
        &selector,
        client.as_ref(),
        true,
    )?;

    let (objective, dialect, _) = ctx.objective(&cmd.objective)?;
    let dialect = dialect.ok_or_else(|| anyhow!("pipeline evaluation needs --dialect"))?;
    let outputs: Vec<String> = selections.into_iter().map(|s| s.chosen_text).collect();
    let task = match (cmd.direction, &cmd.refs) {
        (Some(d), Some(r)) => EvalTask { kind: TaskKind::Translation(d), dialect, outputs, references: Some(read_lines(r)?) },
        (None, Some(_)) => bail!("--refs given without --direction"),
        _ => EvalTask { kind: TaskKind::Monolingual, dialect, outputs, references: None },
    };
    let chrf = ctx.chrf(&cmd.chrf)?;
    let (format, scale, averaging) = ctx.report(&cmd.report_opts)?;
    let scorer = if task.kind == TaskKind::Monolingual { Some(ctx.scorer(&cmd.scorer)?) } else { None };
    let fingerprint = ConfigFingerprint {
        objective: Some(objective),
        n_candidates: gen_cfg.map(|g| g.num_candidates),
        trim_fraction: merged.then_some(merge_cfg.trim_fraction),
        lambda: merged.then_some(merge_cfg.lambda),
        chrf,
        chrf_averaging: averaging,
        scorer_backend: scorer.as_ref().map(|s| s.backend_id()),
    };
    let reports = evaluate(std::slice::from_ref(&task), scorer.as_deref(), &chrf, averaging, &fingerprint)?;
    let ext = match format {
        ReportFormat::Json => "json",
        ReportFormat::Csv => "csv",
        ReportFormat::Text => "txt",
    };
    write_report(&emit_report(&reports, format, scale), Some(&cmd.out_dir.join(format!("report.{ext}"))))
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let jobs = cli.jobs.or(file.jobs).unwrap_or(0);
    let ctx = Ctx::new(file);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().context("building worker pool")?;
    pool.install(|| match &cli.command {
        Command::Merge(c) => cmd_merge(c, &ctx),
        Command::Generate(c) => cmd_generate(c, &ctx),
        Command::Decode(c) => cmd_decode(c, &ctx),
        Command::Eval(c) => cmd_eval(c, &ctx),
        Command::Pipeline(c) => cmd_pipeline(c, &ctx),
    })
}

/// Parses and runs; usage errors are returned rather than exiting.
pub fn run_from_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run(Cli::try_parse_from(args)?)
}

pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
