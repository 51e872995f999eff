//! Step-by-step agent loop: prompt, complete, parse, dispatch, observe.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{
    prompt_digest, ClientError, ModelClient, ModelRequest, ToolHost, ToolRequest,
};
use crate::react::{
    fold_text, parse_transcript, serialize_steps, split_arguments, ActionCall, CodecError, Step,
    Transcript, THOUGHT_CUE,
};
use crate::registry::{
    describe_arguments, render_tool_usage_prompt, ConversationTurn, ImageIntro, Prompts, Registry,
    RegistryError, UsagePromptInput,
};

pub const DEFAULT_MAX_STEPS: usize = 6;
/// Completions are cut here so observations always come from the runtime.
pub const OBSERVATION_STOP: &str = "\nObservation:";
pub const DEFAULT_CAPTION_TOOL: &str = "Get Photo Description";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Model(ClientError),
    #[error("tool host unavailable: {0}")]
    ToolHostUnavailable(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("max_steps must be at least 1")]
    InvalidConfig,
}

impl AgentError {
    pub fn is_upstream(&self) -> bool {
        match self {
            AgentError::Model(e) => e.is_upstream(),
            AgentError::ToolHostUnavailable(_) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub max_steps: usize,
    /// Tools offered in the prompt; all registry tools when `None`.
    pub subset: Option<Vec<String>>,
    pub temperature: f64,
    pub max_new_tokens: u32,
    /// Tool used to describe an image given without a description.
    pub caption_tool: Option<String>,
    /// Re-request once after a completion that does not parse.
    pub retry_malformed: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            subset: None,
            temperature: 0.0,
            max_new_tokens: crate::clients::DEFAULT_MAX_NEW_TOKENS,
            caption_tool: Some(DEFAULT_CAPTION_TOOL.to_string()),
            retry_malformed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeInput {
    pub user_input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<ConversationTurn>,
    /// Prefix for model request keys, e.g. a sample id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeStatus {
    Completed,
    Truncated,
    Failed,
}

/// One model exchange of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub index: usize,
    pub prompt_digest: String,
    pub completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<Step>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub transcript: Transcript,
    pub final_reply: Option<String>,
    pub status: EpisodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_description: Option<String>,
    pub log: Vec<StepLog>,
}

impl EpisodeResult {
    /// The result with latencies zeroed, for comparing runs.
    pub fn without_timings(mut self) -> Self {
        for l in &mut self.log {
            l.latency_ms = 0;
        }
        self
    }
}

/// Why an action could not be carried out. All but `Unavailable` are fed
/// back to the model as the observation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DispatchError {
    #[error("unknown tool {0}")]
    UnknownTool(String),
    #[error("{tool} expects {expected} arguments: {usage}")]
    Arity {
        tool: String,
        expected: usize,
        usage: String,
    },
    #[error("{tool} failed: {detail}")]
    ToolFailure { tool: String, detail: String },
    #[error("tool host unavailable: {0}")]
    Unavailable(String),
}

impl DispatchError {
    pub fn as_observation(&self) -> String {
        format!("Error: {self}")
    }
}

/// Validates the action against the registry, splits its input and invokes
/// the tool. The observation is returned as the host produced it.
pub fn dispatch_action(
    a: &ActionCall,
    r: &Registry,
    tools: &dyn ToolHost,
) -> Result<String, DispatchError> {
    let spec = r
        .get(a.tool_name.trim())
        .ok_or_else(|| DispatchError::UnknownTool(a.tool_name.trim().to_string()))?;
    let args = split_arguments(&a.raw_input, spec.arity()).map_err(|_| DispatchError::Arity {
        tool: spec.name.clone(),
        expected: spec.arity(),
        usage: describe_arguments(&spec.schema),
    })?;
    let req = ToolRequest::new(&spec.name, args).map_err(|e| DispatchError::ToolFailure {
        tool: spec.name.clone(),
        detail: e.to_string(),
    })?;
    tools.invoke(&req).map_err(|e| match e {
        ClientError::ToolHostUnavailable(m) => DispatchError::Unavailable(m),
        ClientError::ToolFailure { status, body, .. } => DispatchError::ToolFailure {
            tool: spec.name.clone(),
            detail: format!("status {status}: {body}"),
        },
        other => DispatchError::ToolFailure {
            tool: spec.name.clone(),
            detail: other.to_string(),
        },
    })
}

/// Reads the first step out of a completion that continues the prompt's
/// `Thought: Do I need to use a tool?` cue. Anything from the first
/// `Observation:` line on is discarded.
pub fn extract_step(completion: &str) -> Result<Step, CodecError> {
    let mut kept = Vec::new();
    for line in completion.lines() {
        if line.trim_start().starts_with("Observation:") {
            break;
        }
        kept.push(line);
    }
    let body = kept.join("\n");
    let text = if body.trim_start().starts_with("Thought:") {
        body
    } else {
        format!("{THOUGHT_CUE}{body}")
    };
    let t = parse_transcript(&text)?;
    match t.steps.into_iter().next() {
        Some(Step::UseTool { action, .. }) => Ok(Step::UseTool {
            action,
            observation: None,
        }),
        Some(step) => Ok(step),
        None => Err(CodecError::Malformed("no complete step".into())),
    }
}

fn describe_image(
    image: &ImageRef,
    r: &Registry,
    tools: &dyn ToolHost,
    cfg: &EpisodeConfig,
) -> Result<String, AgentError> {
    if let Some(d) = &image.description {
        return Ok(d.clone());
    }
    let Some(tool) = cfg.caption_tool.as_deref().filter(|t| r.get(t).is_some()) else {
        return Ok(String::new());
    };
    match dispatch_action(&ActionCall::new(tool, image.path.clone()), r, tools) {
        Ok(d) => Ok(fold_text(&d)),
        Err(DispatchError::Unavailable(m)) => Err(AgentError::ToolHostUnavailable(m)),
        Err(e) => {
            log::warn!("caption pre-pass for {}: {e}", image.path);
            Ok(String::new())
        }
    }
}

pub fn run_episode(
    model: &dyn ModelClient,
    tools: &dyn ToolHost,
    r: &Registry,
    prompts: &Prompts,
    cfg: &EpisodeConfig,
    input: &EpisodeInput,
) -> Result<EpisodeResult, AgentError> {
    if cfg.max_steps == 0 {
        return Err(AgentError::InvalidConfig);
    }
    let all: Vec<String>;
    let subset: &[String] = match &cfg.subset {
        Some(s) => s,
        None => {
            all = r.names().map(str::to_string).collect();
            &all
        }
    };
    let image_description = input
        .image
        .as_ref()
        .map(|img| describe_image(img, r, tools, cfg))
        .transpose()?;
    let intro = input.image.as_ref().map(|img| ImageIntro {
        path: img.path.clone(),
        description: image_description.clone().unwrap_or_default(),
    });

    let mut steps: Vec<Step> = Vec::new();
    let mut log = Vec::new();
    let mut malformed_in_a_row = 0;
    let mut status = EpisodeStatus::Truncated;
    let mut request_no = 0;
    while steps.len() < cfg.max_steps {
        let scratchpad = serialize_steps(&steps);
        let prompt = render_tool_usage_prompt(
            prompts,
            r,
            &UsagePromptInput {
                subset,
                image: intro.as_ref(),
                history: &input.history,
                user_input: &input.user_input,
                scratchpad: &scratchpad,
            },
        )?;
        let mut req = ModelRequest::new(prompt)
            .with_temperature(cfg.temperature)
            .with_stop(OBSERVATION_STOP);
        req.max_new_tokens = cfg.max_new_tokens;
        if let Some(key) = &input.key {
            req = req.with_key(format!("{key}/{request_no}"));
        }
        request_no += 1;

        let started = Instant::now();
        let completion = model.complete(&req).map_err(AgentError::Model)?;
        let mut entry = StepLog {
            index: steps.len(),
            prompt_digest: prompt_digest(&req.prompt),
            completion: completion.clone(),
            step: None,
            observation: None,
            error: None,
            latency_ms: 0,
        };

        let step = match extract_step(&completion) {
            Ok(step) => step,
            Err(e) => {
                malformed_in_a_row += 1;
                entry.error = Some(e.to_string());
                entry.latency_ms = started.elapsed().as_millis() as u64;
                log.push(entry);
                if cfg.retry_malformed && malformed_in_a_row == 1 {
                    continue;
                }
                status = EpisodeStatus::Failed;
                break;
            }
        };
        malformed_in_a_row = 0;

        match step {
            Step::NoTool { .. } => {
                entry.step = Some(step.clone());
                entry.latency_ms = started.elapsed().as_millis() as u64;
                log.push(entry);
                steps.push(step);
                status = EpisodeStatus::Completed;
                break;
            }
            Step::UseTool { action, .. } => {
                let observation = match dispatch_action(&action, r, tools) {
                    Ok(obs) => {
                        let obs = fold_text(&obs);
                        if obs.is_empty() {
                            format!("Error: {} returned no output", action.tool_name)
                        } else {
                            obs
                        }
                    }
                    Err(DispatchError::Unavailable(m)) => {
                        return Err(AgentError::ToolHostUnavailable(m))
                    }
                    Err(e) => fold_text(&e.as_observation()),
                };
                let step = Step::UseTool {
                    action,
                    observation: Some(observation.clone()),
                };
                entry.step = Some(step.clone());
                entry.observation = Some(observation);
                entry.latency_ms = started.elapsed().as_millis() as u64;
                log.push(entry);
                steps.push(step);
            }
        }
    }

    let transcript = Transcript::new(steps);
    Ok(EpisodeResult {
        final_reply: transcript.final_reply().map(str::to_string),
        transcript,
        status,
        image_description,
        log,
    })
}
