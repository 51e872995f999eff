//! Command-line front end.
//!
//! Exit status: 0 success, 1 usage error, 2 bad input data, 3 unreachable
//! upstream service.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::agent::{run_episode, EpisodeConfig, EpisodeInput, ImageRef};
use crate::augment::{
    assemble_dataset, build_samples, export_pairs, AugmentError, ContextConfig, Conversation,
    FineTuneConfig,
};
use crate::clients::{
    ChatEndpoint, ClientError, HttpModelClient, HttpToolHost, MockToolHost, ModelClient,
    ReplayModelClient, ToolHost, DEFAULT_API_KEY_ENV,
};
use crate::curation::{
    curate, CurationConfig, CurationError, EmbeddingEndpoint, EmbeddingSimilarity, KeywordRules,
    LcsSimilarity, DEFAULT_THRESHOLD,
};
use crate::datagen::{
    build_image_content, run_generation, CaptionRecord, DatagenError, GenerationPlan,
    InstructionTriple, Reject,
};
use crate::eval::{evaluate, EvalConfig, EvalError, EvalMode};
use crate::jsonl;
use crate::metrics::{
    render_csv, render_text, EvalRecord, NoToolPolicy, PathMode, ScoreOptions, ScoreReport,
};
use crate::react::serialize_transcript;
use crate::registry::{Prompts, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage = 1,
    Data = 2,
    Upstream = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub class: ErrorClass,
    pub message: String,
}

impl CliError {
    fn usage(m: impl Display) -> Self {
        Self {
            class: ErrorClass::Usage,
            message: m.to_string(),
        }
    }

    fn data(m: impl Display) -> Self {
        Self {
            class: ErrorClass::Data,
            message: m.to_string(),
        }
    }

    fn upstream(m: impl Display) -> Self {
        Self {
            class: ErrorClass::Upstream,
            message: m.to_string(),
        }
    }

    fn classify(upstream: bool, m: impl Display) -> Self {
        if upstream {
            Self::upstream(m)
        } else {
            Self::data(m)
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        Self::classify(e.is_upstream(), e)
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        let up = match &e {
            DatagenError::TeacherUnavailable(c) => c.is_upstream(),
            DatagenError::Record { source, .. } => {
                matches!(&**source, DatagenError::TeacherUnavailable(c) if c.is_upstream())
            }
            _ => false,
        };
        Self::classify(up, e)
    }
}

impl From<CurationError> for CliError {
    fn from(e: CurationError) -> Self {
        Self::classify(matches!(e, CurationError::EmbeddingUnavailable(_)), e)
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        Self::classify(
            matches!(&e, AugmentError::Observation(c) if c.is_upstream()),
            e,
        )
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::classify(e.is_upstream(), e)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tooluse",
    version,
    about = "Tool-use instruction data and benchmark toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ask a teacher model for tool-use instructions about captioned images.
    Generate(GenerateArgs),
    /// Validate generated triples and drop near-duplicates.
    Curate(CurateArgs),
    /// Build the training dataset from curated triples.
    Augment(AugmentArgs),
    /// Score a model on an evaluation set.
    Eval(EvalArgs),
    /// Run one episode and print the transcript.
    Agent(AgentArgs),
    /// Render a stored score report.
    Report(ReportArgs),
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct CommonArgs {
    /// Tool registry file (TOML); the built-in registry when omitted.
    #[arg(long)]
    pub tools: Option<PathBuf>,
    /// Directory with prompt template overrides.
    #[arg(long)]
    pub prompts_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct ModelArgs {
    /// Chat-completion URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name sent to the endpoint.
    #[arg(long, default_value = "gpt-3.5-turbo")]
    pub model: String,
    /// Environment variable holding the bearer credential.
    #[arg(long, default_value = DEFAULT_API_KEY_ENV)]
    pub api_key_env: String,
    /// Replay file of canned completions; no network access.
    #[arg(long, conflicts_with = "endpoint")]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Caption records, one per line.
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Tools shown per request.
    #[arg(long, default_value_t = 5)]
    pub subset_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Leave the image content out of the prompt.
    #[arg(long)]
    pub unconditioned: bool,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct CurateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Generated triples.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Unparseable teacher lines from the generate stage.
    #[arg(long)]
    pub rejects: Option<PathBuf>,
    /// Output directory; `<input dir>/curated` when omitted.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Keyword rule file replacing the built-in rules.
    #[arg(long)]
    pub keyword_rules: Option<PathBuf>,
    #[arg(long, conflicts_with = "keyword_rules")]
    pub no_keyword_rules: bool,
    /// Embedding endpoint; lexical similarity when omitted.
    #[arg(long)]
    pub embedding_endpoint: Option<String>,
    #[arg(long, default_value = "text-embedding-ada-002")]
    pub embedding_model: String,
    #[arg(long, default_value = DEFAULT_API_KEY_ENV)]
    pub api_key_env: String,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Curated triples.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Caption records, to attach image descriptions.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// (user, assistant) records for negative samples.
    #[arg(long)]
    pub conversations: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.15)]
    pub cut_ratio: f64,
    #[arg(long, default_value_t = 0.15)]
    pub multiturn_ratio: f64,
    /// Tool host URL for observations; deterministic mock when omitted.
    #[arg(long)]
    pub tool_host: Option<String>,
    /// Also write instruction/response pairs and fine-tuning settings.
    #[arg(long)]
    pub export: bool,
    #[arg(long, default_value = "vicuna-13b")]
    pub base_model: String,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PathModeArg {
    Filename,
    Extension,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NoToolArg {
    Vacuous,
    Exclude,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Evaluation records, one per line.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Report file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Per-record predictions file.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "filename")]
    pub path_mode: PathModeArg,
    #[arg(long, value_enum, default_value = "vacuous")]
    pub no_tool: NoToolArg,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    /// Tool host for live episodes; deterministic mock when omitted.
    #[arg(long)]
    pub tool_host: Option<String>,
    #[arg(long, default_value_t = crate::agent::DEFAULT_MAX_STEPS)]
    pub max_steps: usize,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct AgentArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// The user's request.
    #[arg(long)]
    pub input: String,
    #[arg(long)]
    pub image: Option<String>,
    #[arg(long)]
    pub image_description: Option<String>,
    #[arg(long)]
    pub tool_host: Option<String>,
    #[arg(long, default_value_t = crate::agent::DEFAULT_MAX_STEPS)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum ReportFormat {
    Text,
    Csv,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    pub format: ReportFormat,
}

fn load_registry(c: &CommonArgs) -> Result<Registry, CliError> {
    match &c.tools {
        Some(p) => Registry::load(p).map_err(CliError::data),
        None => Ok(Registry::builtin()),
    }
}

fn load_prompts(c: &CommonArgs) -> Result<Prompts, CliError> {
    match &c.prompts_dir {
        Some(d) => {
            Prompts::from_dir(d).map_err(|e| CliError::data(format!("{}: {e}", d.display())))
        }
        None => Ok(Prompts::default()),
    }
}

fn model_client(m: &ModelArgs) -> Result<Box<dyn ModelClient>, CliError> {
    match (&m.replay, &m.endpoint) {
        (Some(p), _) => Ok(Box::new(ReplayModelClient::from_file(p)?)),
        (None, Some(url)) => {
            let mut ep = ChatEndpoint::new(url.clone(), m.model.clone());
            ep.api_key_env = m.api_key_env.clone();
            Ok(Box::new(HttpModelClient::new(ep)?))
        }
        (None, None) => Err(CliError::usage("either --endpoint or --replay is required")),
    }
}

fn tool_host(
    url: Option<&str>,
    r: &Registry,
    concurrency: usize,
) -> Result<Box<dyn ToolHost>, CliError> {
    match url {
        Some(u) => Ok(Box::new(HttpToolHost::new(u, concurrency)?)),
        None => Ok(Box::new(MockToolHost::from_registry(r))),
    }
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<usize, CliError> {
    jsonl::write(path, items).map_err(CliError::data)
}

fn write_manifest(
    path: &Path,
    command: &str,
    config: &impl Serialize,
    outputs: serde_json::Value,
) -> Result<(), CliError> {
    let manifest = json!({ "command": command, "config": config, "outputs": outputs });
    jsonl::write_json(path, &manifest).map_err(CliError::data)
}

fn cmd_generate(a: &GenerateArgs) -> Result<(), CliError> {
    let r = load_registry(&a.common)?;
    let prompts = load_prompts(&a.common)?;
    let teacher = model_client(&a.model)?;
    let records: Vec<CaptionRecord> = jsonl::read(&a.captions).map_err(CliError::data)?;
    let plan = GenerationPlan {
        subset_size: a.subset_size,
        seed: a.seed,
        conditioned: !a.unconditioned,
        temperature: a.temperature,
        concurrency: a.concurrency,
        tool_pool: None,
    };
    let out = run_generation(teacher.as_ref(), &prompts, &r, &records, &plan)?;
    let n_triples = write_lines(&a.out_dir.join("triples.jsonl"), &out.triples)?;
    let n_rejects = write_lines(&a.out_dir.join("rejects.jsonl"), &out.rejects)?;
    write_lines(&a.out_dir.join("completions.jsonl"), &out.completions)?;
    write_manifest(
        &a.out_dir.join("manifest.json"),
        "generate",
        &json!({ "args": a, "plan": plan }),
        json!({ "images": records.len(), "triples": n_triples, "rejects": n_rejects }),
    )?;
    println!(
        "{n_triples} triples, {n_rejects} rejected lines from {} images",
        records.len()
    );
    Ok(())
}

fn cmd_curate(a: &CurateArgs) -> Result<(), CliError> {
    let r = load_registry(&a.common)?;
    let triples: Vec<InstructionTriple> = jsonl::read(&a.input).map_err(CliError::data)?;
    let rejects: Vec<Reject> = match &a.rejects {
        Some(p) => jsonl::read(p).map_err(CliError::data)?,
        None => Vec::new(),
    };
    let rules = if a.no_keyword_rules {
        None
    } else {
        Some(match &a.keyword_rules {
            Some(p) => KeywordRules::load(p).map_err(CliError::data)?,
            None => KeywordRules::default(),
        })
    };
    let cfg = CurationConfig {
        threshold: a.threshold,
        rules,
    };
    if !(cfg.threshold > 0.0 && cfg.threshold <= 1.0) {
        return Err(CliError::usage(format!(
            "--threshold must be in (0, 1], got {}",
            cfg.threshold
        )));
    }
    let out = match &a.embedding_endpoint {
        Some(url) => {
            let mut ep = EmbeddingEndpoint::new(url.clone(), a.embedding_model.clone());
            ep.api_key_env = a.api_key_env.clone();
            curate(&triples, &rejects, &r, &cfg, &EmbeddingSimilarity::new(ep)?)?
        }
        None => curate(&triples, &rejects, &r, &cfg, &LcsSimilarity)?,
    };
    let dir = a
        .out_dir
        .clone()
        .unwrap_or_else(|| a.input.parent().unwrap_or(Path::new(".")).join("curated"));
    write_lines(&dir.join("retained.jsonl"), &out.retained)?;
    write_lines(&dir.join("rejected.jsonl"), &out.rejected)?;
    write_lines(&dir.join("removed.jsonl"), &out.removed)?;
    write_lines(&dir.join("flagged.jsonl"), &out.flagged)?;
    let counts = out.counts();
    write_manifest(&dir.join("manifest.json"), "curate", a, json!(counts))?;
    println!(
        "{} retained ({} flagged), {} rejected, {} duplicates",
        counts.retained, counts.flagged, counts.rejected, counts.duplicates
    );
    Ok(())
}

fn cmd_augment(a: &AugmentArgs) -> Result<(), CliError> {
    let r = load_registry(&a.common)?;
    let prompts = load_prompts(&a.common)?;
    let triples: Vec<InstructionTriple> = jsonl::read(&a.input).map_err(CliError::data)?;
    let mut contents = HashMap::new();
    if let Some(p) = &a.captions {
        let recs: Vec<CaptionRecord> = jsonl::read(p).map_err(CliError::data)?;
        for rec in &recs {
            let c = build_image_content(rec)?;
            contents.insert(c.image_path.clone(), c);
        }
    }
    let conversations: Vec<Conversation> = match &a.conversations {
        Some(p) => jsonl::read(p).map_err(CliError::data)?,
        None => Vec::new(),
    };
    for (name, v) in [
        ("--cut-ratio", a.cut_ratio),
        ("--multiturn-ratio", a.multiturn_ratio),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(CliError::usage(format!(
                "{name} must be in [0, 1], got {v}"
            )));
        }
    }
    let host = tool_host(a.tool_host.as_deref(), &r, 4)?;
    let ctx = ContextConfig {
        seed: a.seed,
        cut_ratio: a.cut_ratio,
        multiturn_ratio: a.multiturn_ratio,
    };
    let out = build_samples(&triples, &contents, &conversations, &r, host.as_ref(), &ctx)?;
    let manifest = assemble_dataset(
        &out.positives,
        &out.negatives,
        &out.contexts,
        &a.out_dir.join("dataset.jsonl"),
        a.seed,
    )?;
    write_lines(&a.out_dir.join("failures.jsonl"), &out.failures)?;
    let mut outputs = json!(manifest);
    outputs["failures"] = json!(out.failures.len());
    if a.export {
        let mut pairs = Vec::new();
        for s in out
            .positives
            .iter()
            .chain(&out.negatives)
            .chain(&out.contexts)
        {
            pairs.extend(export_pairs(s, &r, &prompts)?);
        }
        outputs["exported_pairs"] = json!(write_lines(&a.out_dir.join("pairs.jsonl"), &pairs)?);
        jsonl::write_json(
            &a.out_dir.join("finetune.json"),
            &FineTuneConfig::for_base(&a.base_model),
        )
        .map_err(CliError::data)?;
    }
    write_manifest(&a.out_dir.join("manifest.json"), "augment", a, outputs)?;
    println!(
        "{} samples ({} tool-using, {} pairs), {} failures",
        manifest.total,
        manifest.tool_using_samples,
        manifest.instruction_pairs,
        out.failures.len()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let r = load_registry(&a.common)?;
    let prompts = load_prompts(&a.common)?;
    let records: Vec<EvalRecord> = jsonl::read(&a.dataset).map_err(CliError::data)?;
    let model = model_client(&a.model)?;
    let cfg = EvalConfig {
        score: ScoreOptions {
            path_mode: match a.path_mode {
                PathModeArg::Filename => PathMode::Filename,
                PathModeArg::Extension => PathMode::Extension,
            },
            no_tool_policy: match a.no_tool {
                NoToolArg::Vacuous => NoToolPolicy::Vacuous,
                NoToolArg::Exclude => NoToolPolicy::Exclude,
            },
        },
        concurrency: a.concurrency,
    };
    let host;
    let mode = if a.model.replay.is_some() {
        EvalMode::Replay
    } else {
        host = tool_host(a.tool_host.as_deref(), &r, a.concurrency)?;
        EvalMode::Live {
            tools: host.as_ref(),
            episode: EpisodeConfig {
                max_steps: a.max_steps,
                ..EpisodeConfig::default()
            },
        }
    };
    let out = evaluate(&records, &r, &prompts, model.as_ref(), &mode, &cfg)?;
    jsonl::write_json(&a.out, &out.report).map_err(CliError::data)?;
    if let Some(p) = &a.predictions {
        write_lines(p, &out.predictions)?;
    }
    write_manifest(
        &a.out.with_extension("manifest.json"),
        "eval",
        &json!({ "args": a, "scoring": cfg }),
        json!({ "n": out.report.overall.n }),
    )?;
    print!("{}", render_text(&out.report));
    Ok(())
}

fn cmd_agent(a: &AgentArgs) -> Result<(), CliError> {
    let r = load_registry(&a.common)?;
    let prompts = load_prompts(&a.common)?;
    let model = model_client(&a.model)?;
    let host = tool_host(a.tool_host.as_deref(), &r, 1)?;
    let cfg = EpisodeConfig {
        max_steps: a.max_steps,
        temperature: a.temperature,
        ..EpisodeConfig::default()
    };
    let input = EpisodeInput {
        user_input: a.input.clone(),
        image: a.image.as_ref().map(|p| ImageRef {
            path: p.clone(),
            description: a.image_description.clone(),
        }),
        history: Vec::new(),
        key: None,
    };
    let res = run_episode(model.as_ref(), host.as_ref(), &r, &prompts, &cfg, &input)
        .map_err(|e| CliError::classify(e.is_upstream(), e))?;
    println!("{}", serialize_transcript(&res.transcript));
    println!(
        "[{:?} after {} steps]",
        res.status,
        res.transcript.steps.len()
    );
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    let report: ScoreReport = jsonl::read_json(&a.input).map_err(CliError::data)?;
    match a.format {
        ReportFormat::Text => print!("{}", render_text(&report)),
        ReportFormat::Csv => print!("{}", render_csv(&report)),
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Curate(a) => cmd_curate(a),
        Command::Augment(a) => cmd_augment(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Agent(a) => cmd_agent(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ErrorClass::Usage as i32
            } else {
                0
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.class as i32
        }
    }
}
