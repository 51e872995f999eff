//! Turns retained triples into training samples and assembles the dataset.
//!
//! Three sample kinds are produced: positives (the instruction answered by a
//! tool chain), negatives (plain conversation answered without tools) and
//! context samples (a chain cut between context and response, or several
//! samples merged into one multi-turn conversation).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clients::{ClientError, ToolHost, ToolRequest};
use crate::datagen::{ImageContent, InstructionTriple};
use crate::jsonl::{self, JsonlError};
use crate::react::{
    fold_text, parse_transcript, serialize_step, serialize_steps, split_arguments, CodecError,
    Step, Transcript, THOUGHT_CUE,
};
use crate::registry::{
    image_name_for, render_tool_usage_prompt, ArgKind, ConversationTurn, ImageIntro, Prompts,
    Registry, RegistryError, UsagePromptInput,
};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error(transparent)]
    UnknownTool(#[from] RegistryError),
    #[error("arguments for {tool:?}: {source}")]
    Arguments {
        tool: String,
        #[source]
        source: CodecError,
    },
    #[error("tool host: {0}")]
    Observation(#[from] ClientError),
    #[error("tool {0:?} returned an empty observation")]
    EmptyObservation(String),
    #[error("conversation {index}: empty {field}")]
    EmptyConversation { index: usize, field: &'static str },
    #[error("sample {id}: {reason}")]
    InvalidSample { id: String, reason: String },
    #[error("ratio {name} must be in [0, 1], got {value}")]
    InvalidRatio { name: &'static str, value: f64 },
    #[error(transparent)]
    WriteFailure(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SampleKind {
    Positive,
    Negative,
    Context,
}

impl SampleKind {
    pub const ALL: [SampleKind; 3] = [
        SampleKind::Positive,
        SampleKind::Negative,
        SampleKind::Context,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SampleKind::Positive => "Positive",
            SampleKind::Negative => "Negative",
            SampleKind::Context => "Context",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user_input: String,
    /// Steps already taken before the response starts (cut-off samples).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub response: String,
    /// Image of this turn when it differs from the sample's image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

impl Turn {
    pub fn new(user_input: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            user_input: user_input.into(),
            context: None,
            response: response.into(),
            image_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub kind: SampleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    /// Description of the image shown to the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_content: Option<String>,
    pub turns: Vec<Turn>,
    pub tools_used: Vec<String>,
}

impl Sample {
    /// Parsed response of every turn.
    pub fn transcripts(&self) -> Result<Vec<Transcript>, CodecError> {
        self.turns
            .iter()
            .map(|t| parse_transcript(&t.response))
            .collect()
    }

    /// Checks that every response parses and validates, that the turn
    /// context (if any) parses, and the kind invariants.
    pub fn validate(&self) -> Result<(), AugmentError> {
        let invalid = |reason: String| AugmentError::InvalidSample {
            id: self.id.clone(),
            reason,
        };
        if self.turns.is_empty() {
            return Err(invalid("no turns".into()));
        }
        let mut actions = 0;
        for (i, turn) in self.turns.iter().enumerate() {
            let t =
                parse_transcript(&turn.response).map_err(|e| invalid(format!("turn {i}: {e}")))?;
            t.validate()
                .map_err(|e| invalid(format!("turn {i}: {e}")))?;
            if !t.terminated {
                return Err(invalid(format!("turn {i}: response has no closing reply")));
            }
            actions += t.action_count();
            if let Some(ctx) = &turn.context {
                let c =
                    parse_transcript(ctx).map_err(|e| invalid(format!("turn {i} context: {e}")))?;
                actions += c.action_count();
            }
        }
        match (self.kind, actions) {
            (SampleKind::Negative, n) if n > 0 => {
                Err(invalid(format!("negative sample has {n} tool steps")))
            }
            (SampleKind::Positive | SampleKind::Context, 0) => {
                Err(invalid("tool-using sample has no tool step".into()))
            }
            _ => Ok(()),
        }
    }

    /// Tool steps in responses (context excluded).
    pub fn response_actions(&self) -> usize {
        self.transcripts()
            .map(|ts| ts.iter().map(Transcript::action_count).sum())
            .unwrap_or(0)
    }

    /// Training pairs this sample exports to: one per tool step of each
    /// turn's response, and one for a turn without tool steps.
    pub fn pair_count(&self) -> usize {
        self.transcripts()
            .map(|ts| ts.iter().map(|t| t.action_count().max(1)).sum())
            .unwrap_or(0)
    }
}

fn digest_id(prefix: &str, parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    format!("{prefix}-{}", &hex::encode(h.finalize())[..12])
}

fn observe(host: &dyn ToolHost, tool: &str, args: Vec<String>) -> Result<String, AugmentError> {
    let obs = fold_text(&host.invoke(&ToolRequest::new(tool, args)?)?);
    if obs.is_empty() {
        return Err(AugmentError::EmptyObservation(tool.to_string()));
    }
    Ok(obs)
}

/// Builds the single-turn positive sample for an accepted triple.
///
/// Image arguments are replaced by the sample's image name. A tool whose
/// registry entry declares `chain_from` is preceded by that tool, and its
/// image argument becomes the first tool's output. Observations come from
/// `host`; the closing reply is `Result saved as <path>` for image outputs
/// and the tool's text otherwise.
pub fn to_positive_sample(
    t: &InstructionTriple,
    r: &Registry,
    content: Option<&ImageContent>,
    host: &dyn ToolHost,
) -> Result<Sample, AugmentError> {
    let spec = r.lookup(&t.tool_name)?;
    let mut args = split_arguments(&t.raw_arguments, spec.arity()).map_err(|source| {
        AugmentError::Arguments {
            tool: spec.name.clone(),
            source,
        }
    })?;
    let image_slot = spec
        .schema
        .iter()
        .position(|a| a.kind == ArgKind::ImagePath);
    let image = (t.source_image.is_some() || image_slot.is_some())
        .then(|| image_name_for(t.source_image.as_deref().unwrap_or(&t.instruction)));
    if let Some(image) = &image {
        for (arg, a) in args.iter_mut().zip(&spec.schema) {
            if a.kind == ArgKind::ImagePath {
                *arg = image.clone();
            }
        }
    }

    let mut steps = Vec::new();
    let mut tools_used = Vec::new();
    let first = spec
        .chain_from
        .as_deref()
        .and_then(|name| r.get(name))
        .filter(|pre| pre.arity() == 1 && pre.schema[0].kind == ArgKind::ImagePath);
    if let (Some(pre), Some(slot), Some(image)) = (first, image_slot, &image) {
        let obs = observe(host, &pre.name, vec![image.clone()])?;
        steps.push(Step::use_tool(&pre.name, image.clone(), Some(obs.clone())));
        tools_used.push(pre.name.clone());
        args[slot] = obs;
    }
    let obs = observe(host, &spec.name, args.clone())?;
    steps.push(Step::use_tool(
        &spec.name,
        args.join(", "),
        Some(obs.clone()),
    ));
    tools_used.push(spec.name.clone());
    let reply = match spec.output {
        ArgKind::ImagePath => format!("Result saved as {obs}"),
        ArgKind::Text => obs,
    };
    steps.push(Step::no_tool(reply));

    let user_input = fold_text(&t.instruction);
    Ok(Sample {
        id: digest_id("pos", &[&user_input, &t.tool_name, &t.raw_arguments]),
        kind: SampleKind::Positive,
        image_content: image
            .as_ref()
            .and(content)
            .map(ImageContent::description)
            .filter(|d| !d.is_empty()),
        image_path: image,
        turns: vec![Turn::new(user_input, serialize_steps(&steps))],
        tools_used,
    })
}

/// One (user, assistant) exchange used for negative samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub user: String,
    pub assistant: String,
}

pub fn make_negative_sample(user: &str, assistant: &str) -> Result<Sample, AugmentError> {
    let user_input = fold_text(user);
    let reply = fold_text(assistant);
    if user_input.is_empty() {
        return Err(AugmentError::EmptyConversation {
            index: 0,
            field: "user",
        });
    }
    if reply.is_empty() {
        return Err(AugmentError::EmptyConversation {
            index: 0,
            field: "assistant",
        });
    }
    Ok(Sample {
        id: digest_id("neg", &[&user_input, &reply]),
        kind: SampleKind::Negative,
        image_path: None,
        image_content: None,
        turns: vec![Turn::new(user_input, serialize_step(&Step::no_tool(reply)))],
        tools_used: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub seed: u64,
    pub cut_ratio: f64,
    pub multiturn_ratio: f64,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cut_ratio: 0.15,
            multiturn_ratio: 0.15,
        }
    }
}

fn check_ratio(name: &'static str, value: f64) -> Result<(), AugmentError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(AugmentError::InvalidRatio { name, value })
    }
}

fn portion(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).min(n)
}

/// Moves the first step of a multi-step, single-turn positive into the turn
/// context. Returns `None` for samples with fewer than two tool steps.
pub fn cut_sample(s: &Sample) -> Option<Sample> {
    let [turn] = s.turns.as_slice() else {
        return None;
    };
    let t = parse_transcript(&turn.response).ok()?;
    if t.action_count() < 2 {
        return None;
    }
    Some(Sample {
        id: format!("ctx-cut-{}", s.id),
        kind: SampleKind::Context,
        image_path: s.image_path.clone(),
        image_content: s.image_content.clone(),
        turns: vec![Turn {
            user_input: turn.user_input.clone(),
            context: Some(serialize_step(&t.steps[0])),
            response: serialize_steps(&t.steps[1..]),
            image_path: None,
        }],
        tools_used: s.tools_used.clone(),
    })
}

/// Derives context samples from positives and negatives.
///
/// A `cut_ratio` share of the multi-step positives is cut after the first
/// step. For `multiturn_ratio` of the pooled samples a conversation of 2 to 4
/// turns is built: one positive followed by turns drawn from the pool.
pub fn make_context_samples(
    positives: &[Sample],
    negatives: &[Sample],
    cfg: &ContextConfig,
) -> Result<Vec<Sample>, AugmentError> {
    check_ratio("cut_ratio", cfg.cut_ratio)?;
    check_ratio("multiturn_ratio", cfg.multiturn_ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();

    let eligible: Vec<Sample> = positives.iter().filter_map(cut_sample).collect();
    let take = portion(cfg.cut_ratio, eligible.len());
    let mut picks: Vec<usize> = (0..eligible.len()).collect();
    picks.shuffle(&mut rng);
    picks.truncate(take);
    picks.sort_unstable();
    out.extend(picks.into_iter().map(|i| eligible[i].clone()));

    let single_turn = |s: &&Sample| s.turns.len() == 1;
    let anchors: Vec<&Sample> = positives.iter().filter(single_turn).collect();
    let pool: Vec<&Sample> = positives
        .iter()
        .chain(negatives)
        .filter(single_turn)
        .collect();
    if anchors.is_empty() || pool.len() < 2 {
        return Ok(out);
    }
    for _ in 0..portion(cfg.multiturn_ratio, pool.len()) {
        let anchor = anchors[rng.gen_range(0..anchors.len())];
        let k = rng.gen_range(2..=4usize).min(pool.len());
        let mut members = vec![anchor];
        let mut rest: Vec<&Sample> = pool.iter().copied().filter(|s| s.id != anchor.id).collect();
        rest.shuffle(&mut rng);
        members.extend(rest.into_iter().take(k - 1));

        let mut turns = Vec::new();
        let mut tools_used = Vec::new();
        for m in &members {
            let mut turn = m.turns[0].clone();
            if m.image_path != anchor.image_path {
                turn.image_path = m.image_path.clone();
            }
            turns.push(turn);
            tools_used.extend(m.tools_used.iter().cloned());
        }
        let ids: Vec<&str> = members.iter().map(|m| m.id.as_str()).collect();
        out.push(Sample {
            id: digest_id("ctx-multi", &ids),
            kind: SampleKind::Context,
            image_path: anchor.image_path.clone(),
            image_content: anchor.image_content.clone(),
            turns,
            tools_used,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub total: usize,
    pub kinds: BTreeMap<String, usize>,
    /// Tool-using samples per tool; a sample counts once, under the last
    /// tool of its chain.
    pub tool_histogram: BTreeMap<String, usize>,
    pub tool_using_samples: usize,
    pub instruction_pairs: usize,
    pub tool_using_pairs: usize,
    pub shuffle_seed: u64,
}

/// Validates every sample, shuffles under `seed` and writes one record per
/// line to `out`.
pub fn assemble_dataset(
    positives: &[Sample],
    negatives: &[Sample],
    contexts: &[Sample],
    out: &Path,
    seed: u64,
) -> Result<DatasetManifest, AugmentError> {
    let mut all: Vec<&Sample> = positives.iter().chain(negatives).chain(contexts).collect();
    for s in &all {
        s.validate()?;
    }
    let manifest = manifest_for(&all, seed);
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    jsonl::write(out, all)?;
    Ok(manifest)
}

pub fn manifest_for(samples: &[&Sample], seed: u64) -> DatasetManifest {
    let mut m = DatasetManifest {
        total: samples.len(),
        kinds: SampleKind::ALL
            .iter()
            .map(|k| (k.name().to_string(), 0))
            .collect(),
        shuffle_seed: seed,
        ..Default::default()
    };
    for s in samples {
        *m.kinds.entry(s.kind.name().to_string()).or_default() += 1;
        let pairs = s.pair_count();
        m.instruction_pairs += pairs;
        if let Some(tool) = s.tools_used.last() {
            m.tool_using_samples += 1;
            m.tool_using_pairs += pairs;
            *m.tool_histogram.entry(tool.clone()).or_default() += 1;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AugmentConfig {
    pub context: ContextConfig,
    pub shuffle_seed: u64,
}

/// A triple that could not be turned into a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentFailure {
    #[serde(flatten)]
    pub triple: InstructionTriple,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentOutput {
    pub positives: Vec<Sample>,
    pub negatives: Vec<Sample>,
    pub contexts: Vec<Sample>,
    pub failures: Vec<AugmentFailure>,
}

/// Builds positives (in parallel, order preserved), negatives and context
/// samples. Triples that fail are reported, not dropped silently; an empty
/// conversation is an input error.
pub fn build_samples(
    triples: &[InstructionTriple],
    contents: &HashMap<String, ImageContent>,
    conversations: &[Conversation],
    r: &Registry,
    host: &dyn ToolHost,
    cfg: &ContextConfig,
) -> Result<AugmentOutput, AugmentError> {
    let built: Vec<Result<Sample, AugmentError>> = triples
        .par_iter()
        .map(|t| {
            let content = t.source_image.as_ref().and_then(|p| contents.get(p));
            to_positive_sample(t, r, content, host)
        })
        .collect();
    let mut out = AugmentOutput::default();
    for (t, s) in triples.iter().zip(built) {
        match s {
            Ok(s) => out.positives.push(s),
            Err(AugmentError::Observation(e)) if e.is_upstream() => {
                return Err(AugmentError::Observation(e))
            }
            Err(e) => out.failures.push(AugmentFailure {
                triple: t.clone(),
                reason: e.to_string(),
            }),
        }
    }
    for (index, c) in conversations.iter().enumerate() {
        out.negatives.push(
            make_negative_sample(&c.user, &c.assistant).map_err(|e| match e {
                AugmentError::EmptyConversation { field, .. } => {
                    AugmentError::EmptyConversation { index, field }
                }
                e => e,
            })?,
        );
    }
    out.contexts = make_context_samples(&out.positives, &out.negatives, cfg)?;
    Ok(out)
}

/// One (instruction, response) record for an external fine-tuning harness.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub sample_id: String,
    pub instruction: String,
    pub response: String,
}

/// Expands a sample into training pairs.
///
/// For every tool step `j` of a turn, the instruction is the tool-usage
/// prompt whose scratchpad holds the turn context plus steps before `j`, and
/// the response is the rest of the turn after the `Thought:` cue. Earlier
/// turns become the conversation history.
pub fn export_pairs(
    s: &Sample,
    r: &Registry,
    prompts: &Prompts,
) -> Result<Vec<TrainingPair>, AugmentError> {
    let subset: Vec<&str> = r.names().collect();
    let intro = s.image_path.as_ref().map(|p| ImageIntro {
        path: p.clone(),
        description: s.image_content.clone().unwrap_or_default(),
    });
    let mut history: Vec<ConversationTurn> = Vec::new();
    let mut pairs = Vec::new();
    for (ti, turn) in s.turns.iter().enumerate() {
        let t = parse_transcript(&turn.response).map_err(|e| AugmentError::InvalidSample {
            id: s.id.clone(),
            reason: format!("turn {ti}: {e}"),
        })?;
        if let Some(p) = &turn.image_path {
            history.push(
                ImageIntro {
                    path: p.clone(),
                    description: String::new(),
                }
                .turn(),
            );
        }
        let starts: Vec<usize> = match t.action_count() {
            0 => vec![0],
            _ => (0..t.steps.len())
                .filter(|&i| t.steps[i].action().is_some())
                .collect(),
        };
        for j in starts {
            let mut scratch: Vec<String> = turn.context.iter().cloned().collect();
            if j > 0 {
                scratch.push(serialize_steps(&t.steps[..j]));
            }
            let scratchpad = scratch.join("\n");
            let instruction = render_tool_usage_prompt(
                prompts,
                r,
                &UsagePromptInput {
                    subset: &subset,
                    image: intro.as_ref(),
                    history: &history,
                    user_input: &turn.user_input,
                    scratchpad: &scratchpad,
                },
            )?;
            let rest = serialize_steps(&t.steps[j..]);
            pairs.push(TrainingPair {
                sample_id: s.id.clone(),
                instruction,
                response: rest.strip_prefix(THOUGHT_CUE).unwrap_or(&rest).to_string(),
            });
        }
        history.push(ConversationTurn::new(
            turn.user_input.clone(),
            t.final_reply().unwrap_or_default(),
        ));
    }
    Ok(pairs)
}

/// Fine-tuning hyperparameters written next to exported pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub base_model: String,
    pub optimizer: String,
    pub learning_rate: f64,
    pub warmup_steps: u32,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: u32,
    pub epochs: u32,
    pub max_length: u32,
    pub lora_r: u32,
    pub lora_alpha: u32,
    pub lora_dropout: f64,
    pub lora_target_modules: Vec<String>,
}

impl FineTuneConfig {
    /// Settings for a base model family; OPT uses a lower learning rate.
    pub fn for_base(base_model: &str) -> Self {
        let opt = base_model.to_lowercase().contains("opt");
        Self {
            base_model: base_model.to_string(),
            optimizer: "AdamW".into(),
            learning_rate: if opt { 1.2e-4 } else { 3e-4 },
            warmup_steps: 100,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 512,
            epochs: 3,
            max_length: 2048,
            lora_r: 16,
            lora_alpha: 16,
            lora_dropout: 0.05,
            lora_target_modules: ["q_proj", "k_proj", "v_proj", "o_proj"]
                .map(String::from)
                .to_vec(),
        }
    }
}
