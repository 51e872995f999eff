//! Teacher-driven generation of tool-use instructions.
//!
//! Each request shows the teacher an image's captions and boxes together with
//! a handful of tool definitions and asks for one instruction per tool, one
//! per line, in the form `<instruction>, [<tool name>, <arguments>]`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, ModelClient, ModelRequest};
use crate::react::strip_quotes;
use crate::registry::{assemble_generation_prompt, Prompts, Registry, RegistryError};

/// Sampling temperature used when the teacher sees no image content.
pub const UNCONDITIONED_TEMPERATURE: f64 = 0.9;
/// Sampling temperature used for image-conditioned requests.
pub const CONDITIONED_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid box {label:?} ({x1}, {y1}, {x2}, {y2}): need x1 < x2 and y1 < y2")]
    InvalidBox {
        label: String,
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
    },
    #[error("caption record for {0:?} has no caption")]
    NoCaption(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("teacher unavailable: {0}")]
    TeacherUnavailable(#[source] ClientError),
    #[error("teacher returned an empty completion")]
    EmptyCompletion,
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: Box<DatagenError>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub label: String,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(label: impl Into<String>, x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            label: label.into(),
            x1,
            y1,
            x2,
            y2,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    /// `label (x1, y1, x2, y2)`
    pub fn render(&self) -> String {
        format!(
            "{} ({}, {}, {}, {})",
            self.label, self.x1, self.y1, self.x2, self.y2
        )
    }
}

/// Textual surrogate of an image: its captions and labelled boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageContent {
    pub image_path: String,
    pub captions: Vec<String>,
    pub boxes: Vec<BoundingBox>,
}

impl ImageContent {
    /// Captions as one description line.
    pub fn description(&self) -> String {
        self.captions
            .iter()
            .map(|c| c.trim())
            .filter(|c| !c.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One line of a caption file:
/// `{"image_path": "...", "captions": ["..."], "boxes": [{"label": "...", "bbox": [x1, y1, x2, y2]}]}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_path: String,
    pub captions: Vec<String>,
    #[serde(default)]
    pub boxes: Vec<CaptionBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionBox {
    pub label: String,
    pub bbox: [f64; 4],
}

pub fn build_image_content(record: &CaptionRecord) -> Result<ImageContent, DatagenError> {
    if record.captions.iter().all(|c| c.trim().is_empty()) {
        return Err(DatagenError::NoCaption(record.image_path.clone()));
    }
    let boxes = record
        .boxes
        .iter()
        .map(|b| {
            let [x1, y1, x2, y2] = b.bbox;
            let bb = BoundingBox::new(b.label.trim(), x1, y1, x2, y2);
            if bb.is_valid() {
                Ok(bb)
            } else {
                Err(DatagenError::InvalidBox {
                    label: bb.label,
                    x1,
                    y1,
                    x2,
                    y2,
                })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ImageContent {
        image_path: record.image_path.clone(),
        captions: record
            .captions
            .iter()
            .map(|c| c.trim().to_string())
            .filter(|c| !c.is_empty())
            .collect(),
        boxes,
    })
}

/// A raw generated item: `<instruction>, [<tool name>, <arguments>]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionTriple {
    pub instruction: String,
    pub tool_name: String,
    pub raw_arguments: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image: Option<String>,
    /// Whether the teacher saw the image content.
    #[serde(default)]
    pub conditioned: bool,
}

impl InstructionTriple {
    pub fn new(
        instruction: impl Into<String>,
        tool_name: impl Into<String>,
        raw_arguments: impl Into<String>,
    ) -> Self {
        Self {
            instruction: instruction.into(),
            tool_name: tool_name.into(),
            raw_arguments: raw_arguments.into(),
            source_image: None,
            conditioned: false,
        }
    }

    pub fn with_source(mut self, image: impl Into<String>) -> Self {
        self.source_image = Some(image.into());
        self.conditioned = true;
        self
    }
}

/// Renders a triple back into the teacher's line format.
pub fn render_generated_line(t: &InstructionTriple) -> String {
    format!(
        "{}, [{}, \"{}\"]",
        t.instruction, t.tool_name, t.raw_arguments
    )
}

fn strip_list_marker(line: &str) -> &str {
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return r.trim_start();
        }
    }
    line.strip_prefix("- ")
        .or_else(|| line.strip_prefix("* "))
        .map(str::trim_start)
        .unwrap_or(line)
}

/// Parses one teacher output line.
///
/// The bracketed `[tool, arguments]` part must close the line and be
/// preceded by a comma; the tool name is the text before the first comma
/// inside the brackets. Enumeration markers (`1. `, `- `) are ignored.
pub fn parse_generated_line(line: &str) -> Result<InstructionTriple, DatagenError> {
    let fmt = |m: &str| DatagenError::Format(m.to_string());
    let mut text = strip_list_marker(line.trim());
    if text.len() >= 2 && text.starts_with('"') && text.ends_with('"') {
        let inner = text[1..text.len() - 1].trim();
        if inner.ends_with(']') {
            text = inner;
        }
    }
    if text.is_empty() {
        return Err(fmt("empty line"));
    }
    if text.matches('[').count() != text.matches(']').count() {
        return Err(fmt("unbalanced brackets"));
    }
    if !text.ends_with(']') {
        return Err(fmt("missing [tool, arguments] at end of line"));
    }
    let mut depth = 0usize;
    let mut open = None;
    for (i, c) in text.char_indices().rev() {
        match c {
            ']' => depth += 1,
            '[' => {
                depth -= 1;
                if depth == 0 {
                    open = Some(i);
                    break;
                }
            }
            _ => {}
        }
    }
    let open = open.ok_or_else(|| fmt("unbalanced brackets"))?;
    let before = text[..open].trim_end();
    let instruction = before
        .strip_suffix(',')
        .ok_or_else(|| fmt("instruction is not separated by a comma"))?;
    let instruction = strip_quotes(instruction.trim()).to_string();
    if instruction.is_empty() {
        return Err(fmt("empty instruction"));
    }
    let inner = &text[open + 1..text.len() - 1];
    let (tool, args) = inner
        .split_once(',')
        .ok_or_else(|| fmt("missing arguments after tool name"))?;
    let tool_name = strip_quotes(tool.trim()).to_string();
    if tool_name.is_empty() {
        return Err(fmt("empty tool name"));
    }
    Ok(InstructionTriple::new(
        instruction,
        tool_name,
        strip_quotes(args.trim()),
    ))
}

/// A teacher line that could not be parsed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image: Option<String>,
    pub line: String,
    pub reason: String,
}

/// The verbatim teacher output for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCompletion {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image: Option<String>,
    pub tools: Vec<String>,
    pub conditioned: bool,
    pub temperature: f64,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub triples: Vec<InstructionTriple>,
    pub rejects: Vec<Reject>,
    pub raw: RawCompletion,
}

/// Sends one generation request and parses the returned lines.
///
/// Lines that fail to parse are returned in `rejects`; nothing is dropped
/// silently. Without `content` the request uses the unconditioned prompt and
/// a default temperature of 0.9.
pub fn generate_instructions<S: AsRef<str>>(
    teacher: &dyn ModelClient,
    prompts: &Prompts,
    content: Option<&ImageContent>,
    r: &Registry,
    subset: &[S],
    temperature: Option<f64>,
) -> Result<Generation, DatagenError> {
    let prompt = assemble_generation_prompt(prompts, content, r, subset)?;
    let temperature = temperature.unwrap_or(if content.is_some() {
        CONDITIONED_TEMPERATURE
    } else {
        UNCONDITIONED_TEMPERATURE
    });
    let mut request = ModelRequest::new(prompt).with_temperature(temperature);
    let source_image = content.map(|c| c.image_path.clone());
    if let Some(image) = &source_image {
        request = request.with_key(image.clone());
    }
    let completion = teacher
        .complete(&request)
        .map_err(DatagenError::TeacherUnavailable)?;
    if completion.trim().is_empty() {
        return Err(DatagenError::EmptyCompletion);
    }

    let mut triples = Vec::new();
    let mut rejects = Vec::new();
    for line in completion.lines().filter(|l| !l.trim().is_empty()) {
        match parse_generated_line(line) {
            Ok(mut t) => {
                t.source_image = source_image.clone();
                t.conditioned = content.is_some();
                triples.push(t);
            }
            Err(e) => rejects.push(Reject {
                source_image: source_image.clone(),
                line: line.to_string(),
                reason: e.to_string(),
            }),
        }
    }
    Ok(Generation {
        triples,
        rejects,
        raw: RawCompletion {
            source_image,
            tools: subset.iter().map(|s| s.as_ref().to_string()).collect(),
            conditioned: content.is_some(),
            temperature,
            completion,
        },
    })
}

/// Settings for a generation run over a caption file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPlan {
    /// Tools shown per request (one instruction is requested per tool).
    pub subset_size: usize,
    pub seed: u64,
    /// Show the teacher the captions and boxes.
    pub conditioned: bool,
    pub temperature: Option<f64>,
    pub concurrency: usize,
    /// Candidate tools; defaults to the registry's seen tools.
    pub tool_pool: Option<Vec<String>>,
}

impl Default for GenerationPlan {
    fn default() -> Self {
        Self {
            subset_size: 5,
            seed: 0,
            conditioned: true,
            temperature: None,
            concurrency: 1,
            tool_pool: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationOutput {
    pub triples: Vec<InstructionTriple>,
    pub rejects: Vec<Reject>,
    pub completions: Vec<RawCompletion>,
}

/// The tool subset used for the `index`-th image of a run.
pub fn subset_for(pool: &[String], size: usize, seed: u64, index: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let k = size.min(pool.len());
    sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

/// Runs one teacher request per caption record. Records are processed
/// concurrently but results are returned in input order.
pub fn run_generation(
    teacher: &dyn ModelClient,
    prompts: &Prompts,
    r: &Registry,
    records: &[CaptionRecord],
    plan: &GenerationPlan,
) -> Result<GenerationOutput, DatagenError> {
    let pool: Vec<String> = match &plan.tool_pool {
        Some(pool) => {
            for name in pool {
                r.lookup(name)?;
            }
            pool.clone()
        }
        None => r.seen_names().into_iter().map(str::to_string).collect(),
    };
    if pool.is_empty() || plan.subset_size == 0 {
        return Err(RegistryError::InvalidTool {
            tool: String::new(),
            reason: "empty tool subset".into(),
        }
        .into());
    }

    let contents = records
        .iter()
        .enumerate()
        .map(|(index, rec)| {
            build_image_content(rec).map_err(|e| DatagenError::Record {
                index,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let one = |index: usize, content: &ImageContent| {
        let subset = subset_for(&pool, plan.subset_size, plan.seed, index);
        let shown = plan.conditioned.then_some(content);
        match generate_instructions(teacher, prompts, shown, r, &subset, plan.temperature) {
            Ok(mut g) => {
                // Unconditioned triples still belong to an image slot of the run.
                if !plan.conditioned {
                    for t in &mut g.triples {
                        t.source_image = Some(content.image_path.clone());
                    }
                }
                Ok(g)
            }
            Err(DatagenError::EmptyCompletion) => Ok(Generation {
                triples: Vec::new(),
                rejects: vec![Reject {
                    source_image: Some(content.image_path.clone()),
                    line: String::new(),
                    reason: DatagenError::EmptyCompletion.to_string(),
                }],
                raw: RawCompletion {
                    source_image: Some(content.image_path.clone()),
                    tools: subset,
                    conditioned: plan.conditioned,
                    temperature: plan.temperature.unwrap_or(if plan.conditioned {
                        CONDITIONED_TEMPERATURE
                    } else {
                        UNCONDITIONED_TEMPERATURE
                    }),
                    completion: String::new(),
                },
            }),
            Err(e) => Err(DatagenError::Record {
                index,
                source: Box::new(e),
            }),
        }
    };

    let pool_threads = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.concurrency.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<Result<Generation, DatagenError>> = pool_threads.install(|| {
        contents
            .par_iter()
            .enumerate()
            .map(|(i, c)| one(i, c))
            .collect()
    });

    let mut out = GenerationOutput::default();
    for g in results {
        let g = g?;
        out.triples.extend(g.triples);
        out.rejects.extend(g.rejects);
        out.completions.push(g.raw);
    }
    Ok(out)
}
