//! Benchmark driver: obtains a prediction for every evaluation record and
//! scores it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{run_episode, AgentError, EpisodeConfig, EpisodeInput, EpisodeStatus, ImageRef};
use crate::clients::{ClientError, ModelClient, ModelRequest, ReplayEntry, ToolHost};
use crate::metrics::{
    aggregate, malformed_score, score_prediction_text, score_sample, EvalRecord, MetricsError,
    SampleScore, ScoreOptions, ScoreReport,
};
use crate::react::{serialize_steps, Decision, Step};
use crate::registry::{
    render_tool_usage_prompt, Prompts, Registry, RegistryError, UsagePromptInput,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("record {id}: {source}")]
    Model {
        id: String,
        #[source]
        source: ClientError,
    },
    #[error("record {id}: {source}")]
    Agent {
        id: String,
        #[source]
        source: AgentError,
    },
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

impl EvalError {
    pub fn is_upstream(&self) -> bool {
        match self {
            EvalError::Model { source, .. } => source.is_upstream(),
            EvalError::Agent { source, .. } => source.is_upstream(),
            _ => false,
        }
    }
}

pub enum EvalMode<'a> {
    /// One completion per record, looked up by record id, scored as a whole
    /// transcript.
    Replay,
    /// A full episode per record against a tool host.
    Live {
        tools: &'a dyn ToolHost,
        episode: EpisodeConfig,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub score: ScoreOptions,
    pub concurrency: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score: ScoreOptions::default(),
            concurrency: 1,
        }
    }
}

/// What the model produced for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<EpisodeStatus>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: ScoreReport,
    pub predictions: Vec<PredictionRecord>,
}

/// The tool-usage prompt a record is evaluated with.
pub fn record_prompt(
    r: &Registry,
    prompts: &Prompts,
    rec: &EvalRecord,
) -> Result<String, RegistryError> {
    let all: Vec<String>;
    let subset: &[String] = match &rec.tools {
        Some(t) => t,
        None => {
            all = r.names().map(str::to_string).collect();
            &all
        }
    };
    render_tool_usage_prompt(
        prompts,
        r,
        &UsagePromptInput {
            subset,
            image: rec.image.as_ref(),
            history: &rec.history,
            user_input: &rec.user_input,
            scratchpad: "",
        },
    )
}

/// The reference transcript of a record: its `gt_response` when present,
/// otherwise one built from the ground-truth chain.
pub fn reference_transcript(rec: &EvalRecord) -> String {
    if let Some(t) = &rec.gt_response {
        return t.clone();
    }
    let mut steps: Vec<Step> = rec
        .gt_chain
        .iter()
        .enumerate()
        .map(|(i, a)| {
            Step::use_tool(
                &a.tool,
                a.arguments.join(", "),
                Some(format!("result {}", i + 1)),
            )
        })
        .collect();
    let reply = match rec.gt_decision {
        Decision::UseTool => "Done.",
        Decision::NoTool => "OK.",
    };
    steps.push(Step::no_tool(reply));
    serialize_steps(&steps)
}

/// Replay entries answering every record with its reference transcript.
pub fn reference_replay(records: &[EvalRecord]) -> Vec<ReplayEntry> {
    records
        .iter()
        .map(|r| ReplayEntry {
            key: r.id.clone(),
            completion: reference_transcript(r),
        })
        .collect()
}

fn predict_one(
    rec: &EvalRecord,
    r: &Registry,
    prompts: &Prompts,
    model: &dyn ModelClient,
    mode: &EvalMode<'_>,
    opts: &ScoreOptions,
) -> Result<(SampleScore, PredictionRecord), EvalError> {
    match mode {
        EvalMode::Replay => {
            let req = ModelRequest::new(record_prompt(r, prompts, rec)?).with_key(rec.id.clone());
            let text = model.complete(&req).map_err(|source| EvalError::Model {
                id: rec.id.clone(),
                source,
            })?;
            let score = score_prediction_text(&text, rec, r, opts);
            Ok((
                score,
                PredictionRecord {
                    id: rec.id.clone(),
                    prediction: text,
                    status: None,
                },
            ))
        }
        EvalMode::Live { tools, episode } => {
            let cfg = EpisodeConfig {
                subset: rec.tools.clone().or_else(|| episode.subset.clone()),
                ..episode.clone()
            };
            let input = EpisodeInput {
                user_input: rec.user_input.clone(),
                image: rec.image.as_ref().map(|i| ImageRef {
                    path: i.path.clone(),
                    description: Some(i.description.clone()),
                }),
                history: rec.history.clone(),
                key: Some(rec.id.clone()),
            };
            let res = run_episode(model, *tools, r, prompts, &cfg, &input).map_err(|source| {
                EvalError::Agent {
                    id: rec.id.clone(),
                    source,
                }
            })?;
            let score = match res.status {
                EpisodeStatus::Failed => {
                    malformed_score(rec, opts, "malformed prediction: episode failed".into())
                }
                _ => score_sample(&res.transcript, rec, r, opts),
            };
            Ok((
                score,
                PredictionRecord {
                    id: rec.id.clone(),
                    prediction: serialize_steps(&res.transcript.steps),
                    status: Some(res.status),
                },
            ))
        }
    }
}

/// Scores every record. Records run concurrently up to
/// `cfg.concurrency`; the report keeps input order.
pub fn evaluate(
    records: &[EvalRecord],
    r: &Registry,
    prompts: &Prompts,
    model: &dyn ModelClient,
    mode: &EvalMode<'_>,
    cfg: &EvalConfig,
) -> Result<EvalOutcome, EvalError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyEvalSet.into());
    }
    for rec in records {
        rec.validate(r)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<_> = pool.install(|| {
        records
            .par_iter()
            .map(|rec| predict_one(rec, r, prompts, model, mode, &cfg.score))
            .collect()
    });
    let mut scores = Vec::with_capacity(records.len());
    let mut predictions = Vec::with_capacity(records.len());
    for res in results {
        let (s, p) = res?;
        scores.push(s);
        predictions.push(p);
    }
    Ok(EvalOutcome {
        report: aggregate(&scores, r, &cfg.score)?,
        predictions,
    })
}
