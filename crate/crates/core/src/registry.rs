//! Tool definitions and prompt assembly.
//!
//! Tools are loaded from a TOML file holding `[[tool]]` tables (see
//! `assets/tools.toml` for the documented schema and the default tool
//! pocket). Load order is significant: it is the order in which tools are
//! rendered into prompts.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::ImageContent;
use crate::template::Template;

pub const DEFAULT_TOOLS: &str = include_str!("../assets/tools.toml");
const TOOL_USAGE_PROMPT: &str = include_str!("../assets/tool_usage_prompt.txt");
const GENERATION_PROMPT: &str = include_str!("../assets/generation_prompt.txt");
const GENERATION_PROMPT_UNCONDITIONED: &str =
    include_str!("../assets/generation_prompt_unconditioned.txt");

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("duplicate tool {0:?}")]
    DuplicateTool(String),
    #[error("tool #{index}: missing field `{field}`")]
    MissingField { index: usize, field: &'static str },
    #[error("unreadable tool file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
    #[error("tool {tool:?}: {reason}")]
    InvalidTool { tool: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgKind {
    ImagePath,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgSpec {
    pub kind: ArgKind,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub usage_scenario: String,
    pub schema: Vec<ArgSpec>,
    pub seen: bool,
    /// The argument sentence rendered after the scenario.
    pub arguments_text: String,
    pub output: ArgKind,
    pub chain_from: Option<String>,
    pub mock_response: Option<String>,
}

impl ToolSpec {
    pub fn arity(&self) -> usize {
        self.schema.len()
    }

    /// `<name>: <usage scenario> <arguments>`
    pub fn definition_line(&self) -> String {
        format!(
            "{}: {} {}",
            self.name, self.usage_scenario, self.arguments_text
        )
    }
}

/// Builds the conventional argument sentence for a schema.
pub fn describe_arguments(schema: &[ArgSpec]) -> String {
    let descriptions: Vec<&str> = schema.iter().map(|a| a.description.as_str()).collect();
    match descriptions.as_slice() {
        [one] => format!("The input to this tool should be a string, representing {one}."),
        many => {
            let count = match many.len() {
                2 => "two".to_string(),
                3 => "three".to_string(),
                4 => "four".to_string(),
                n => n.to_string(),
            };
            let (last, head) = many.split_last().expect("schema is never empty");
            format!(
                "The input to this tool should be a comma separated string of {count}, representing {} and {last}.",
                head.join(", ")
            )
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawFile {
    #[serde(default)]
    tool: Vec<RawTool>,
}

#[derive(Debug, Deserialize)]
struct RawTool {
    name: Option<String>,
    scenario: Option<String>,
    arguments: Option<String>,
    args: Option<Vec<ArgSpec>>,
    output: Option<ArgKind>,
    seen: Option<bool>,
    chain_from: Option<String>,
    mock_response: Option<String>,
}

/// An immutable, ordered set of uniquely named tools.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    tools: Vec<ToolSpec>,
    index: HashMap<String, usize>,
}

impl Registry {
    pub fn new(tools: Vec<ToolSpec>) -> Result<Self, RegistryError> {
        let mut index = HashMap::with_capacity(tools.len());
        for (i, tool) in tools.iter().enumerate() {
            if index.insert(tool.name.clone(), i).is_some() {
                return Err(RegistryError::DuplicateTool(tool.name.clone()));
            }
        }
        let registry = Self { tools, index };
        for tool in &registry.tools {
            if let Some(source) = &tool.chain_from {
                let feeder = registry
                    .get(source)
                    .ok_or_else(|| RegistryError::UnknownTool(source.clone()))?;
                if feeder.output != ArgKind::ImagePath
                    || tool.schema.first().map(|a| a.kind) != Some(ArgKind::ImagePath)
                {
                    return Err(RegistryError::InvalidTool {
                        tool: tool.name.clone(),
                        reason: format!("cannot chain from {source:?}"),
                    });
                }
            }
        }
        Ok(registry)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, RegistryError> {
        let raw: RawFile = toml::from_str(text).map_err(|e| RegistryError::UnreadableFile {
            path: PathBuf::from("<inline>"),
            reason: e.to_string(),
        })?;
        let mut tools = Vec::with_capacity(raw.tool.len());
        for (index, t) in raw.tool.into_iter().enumerate() {
            let missing = |field| RegistryError::MissingField { index, field };
            let name = t
                .name
                .map(|n| n.trim().to_string())
                .filter(|n| !n.is_empty());
            let name = name.ok_or_else(|| missing("name"))?;
            let usage_scenario = t.scenario.ok_or_else(|| missing("scenario"))?;
            let schema = t
                .args
                .filter(|a| !a.is_empty())
                .ok_or_else(|| missing("args"))?;
            let arguments_text = t.arguments.unwrap_or_else(|| describe_arguments(&schema));
            tools.push(ToolSpec {
                name,
                usage_scenario: usage_scenario.trim().to_string(),
                arguments_text: arguments_text.trim().to_string(),
                output: t.output.unwrap_or(ArgKind::Text),
                seen: t.seen.unwrap_or(true),
                chain_from: t.chain_from,
                mock_response: t.mock_response,
                schema,
            });
        }
        Self::new(tools)
    }

    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        let text = fs::read_to_string(path).map_err(|e| RegistryError::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            RegistryError::UnreadableFile { reason, .. } => RegistryError::UnreadableFile {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    /// The bundled 31-tool pocket.
    pub fn builtin() -> Self {
        Self::from_toml_str(DEFAULT_TOOLS).expect("bundled tool file is valid")
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn tools(&self) -> &[ToolSpec] {
        &self.tools
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.index.get(name.trim()).map(|&i| &self.tools[i])
    }

    pub fn lookup(&self, name: &str) -> Result<&ToolSpec, RegistryError> {
        self.get(name)
            .ok_or_else(|| RegistryError::UnknownTool(name.trim().to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.iter().map(|t| t.name.as_str())
    }

    pub fn seen_names(&self) -> Vec<&str> {
        self.tools
            .iter()
            .filter(|t| t.seen)
            .map(|t| t.name.as_str())
            .collect()
    }

    /// Resolves a subset in the given order; `None` selects every tool.
    pub fn select<S: AsRef<str>>(
        &self,
        subset: Option<&[S]>,
    ) -> Result<Vec<&ToolSpec>, RegistryError> {
        match subset {
            None => Ok(self.tools.iter().collect()),
            Some(names) => names.iter().map(|n| self.lookup(n.as_ref())).collect(),
        }
    }
}

pub fn load_registry(path: &Path) -> Result<Registry, RegistryError> {
    Registry::load(path)
}

/// One definition line per tool, in subset order (or load order).
pub fn render_tool_definitions<S: AsRef<str>>(
    r: &Registry,
    subset: Option<&[S]>,
) -> Result<String, RegistryError> {
    let tools = r.select(subset)?;
    Ok(tools
        .iter()
        .map(|t| t.definition_line())
        .collect::<Vec<_>>()
        .join("\n"))
}

/// Prompt templates. Defaults are the bundled assets; any of them can be
/// replaced from files for auditing or experimentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompts {
    pub tool_usage: Template,
    pub generation: Template,
    pub generation_unconditioned: Template,
}

impl Default for Prompts {
    fn default() -> Self {
        Self {
            tool_usage: asset(TOOL_USAGE_PROMPT),
            generation: asset(GENERATION_PROMPT),
            generation_unconditioned: asset(GENERATION_PROMPT_UNCONDITIONED),
        }
    }
}

fn asset(text: &str) -> Template {
    Template::new(text.strip_suffix('\n').unwrap_or(text))
}

impl Prompts {
    /// Loads `tool_usage_prompt.txt`, `generation_prompt.txt` and
    /// `generation_prompt_unconditioned.txt` from `dir`, falling back to the
    /// bundled text for any file that is absent.
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut prompts = Self::default();
        let slots: [(&str, &mut Template); 3] = [
            ("tool_usage_prompt.txt", &mut prompts.tool_usage),
            ("generation_prompt.txt", &mut prompts.generation),
            (
                "generation_prompt_unconditioned.txt",
                &mut prompts.generation_unconditioned,
            ),
        ];
        for (file, slot) in slots {
            let path = dir.join(file);
            if path.exists() {
                *slot = asset(&fs::read_to_string(path)?);
            }
        }
        Ok(prompts)
    }
}

/// One exchange of the "Previous conversation" block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub human: String,
    pub ai: String,
}

impl ConversationTurn {
    pub fn new(human: impl Into<String>, ai: impl Into<String>) -> Self {
        Self {
            human: human.into(),
            ai: ai.into(),
        }
    }
}

/// An image introduced to the conversation before the user's request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageIntro {
    pub path: String,
    pub description: String,
}

impl ImageIntro {
    pub fn turn(&self) -> ConversationTurn {
        image_intro_turn(&self.path, &self.description)
    }
}

/// The conventional opening exchange that hands an image to the model.
pub fn image_intro_turn(path: &str, description: &str) -> ConversationTurn {
    let description = description.trim().trim_end_matches('.');
    ConversationTurn::new(
        format!(
            "Provide an image named {path}. Description: {description}. Understand the image using tools."
        ),
        "Received.",
    )
}

fn render_history(image: Option<&ImageIntro>, history: &[ConversationTurn]) -> String {
    let mut out = String::new();
    let intro = image.map(ImageIntro::turn);
    for turn in intro.iter().chain(history) {
        out.push_str("Human: ");
        out.push_str(&turn.human);
        out.push_str("\nAI: ");
        out.push_str(&turn.ai);
        out.push_str("\n\n");
    }
    out
}

impl Registry {
    /// Caption line for the generation prompt: captions in order, then each
    /// box as `label (x1, y1, x2, y2)`.
    fn caption_text(content: &ImageContent) -> String {
        let mut parts: Vec<String> = content
            .captions
            .iter()
            .map(|c| c.trim().trim_end_matches('.').to_string())
            .filter(|c| !c.is_empty())
            .collect();
        let mut caption = parts.join(". ");
        if !content.boxes.is_empty() {
            parts = content.boxes.iter().map(|b| b.render()).collect();
            if !caption.is_empty() {
                caption.push_str(". ");
            }
            caption.push_str(&parts.join(", "));
        }
        caption
    }
}

/// Fills the generation template. With `content == None` the unconditioned
/// variant (no caption) is used.
pub fn assemble_generation_prompt<S: AsRef<str>>(
    prompts: &Prompts,
    content: Option<&ImageContent>,
    r: &Registry,
    subset: &[S],
) -> Result<String, RegistryError> {
    if subset.is_empty() {
        return Err(RegistryError::InvalidTool {
            tool: String::new(),
            reason: "empty tool subset".into(),
        });
    }
    let tools = render_tool_definitions(r, Some(subset))?;
    let n = subset.len().to_string();
    Ok(match content {
        Some(content) => {
            let caption = Registry::caption_text(content);
            prompts
                .generation
                .render(&[("caption", &caption), ("n", &n), ("tools", &tools)])
        }
        None => prompts
            .generation_unconditioned
            .render(&[("n", &n), ("tools", &tools)]),
    })
}

/// Inputs for the tool-usage prompt.
#[derive(Debug, Clone, Copy)]
pub struct UsagePromptInput<'a, S: AsRef<str>> {
    pub subset: &'a [S],
    pub image: Option<&'a ImageIntro>,
    pub history: &'a [ConversationTurn],
    pub user_input: &'a str,
    /// Serialized steps already taken in this episode.
    pub scratchpad: &'a str,
}

pub fn render_tool_usage_prompt<S: AsRef<str>>(
    prompts: &Prompts,
    r: &Registry,
    input: &UsagePromptInput<'_, S>,
) -> Result<String, RegistryError> {
    if input.subset.is_empty() {
        return Err(RegistryError::InvalidTool {
            tool: String::new(),
            reason: "empty tool subset".into(),
        });
    }
    let tools = r.select(Some(input.subset))?;
    let definitions = tools
        .iter()
        .map(|t| t.definition_line())
        .collect::<Vec<_>>()
        .join("\n");
    let names = tools
        .iter()
        .map(|t| t.name.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    let history = render_history(input.image, input.history);
    let scratchpad = if input.scratchpad.is_empty() {
        String::new()
    } else {
        format!("{}\n", input.scratchpad)
    };
    Ok(prompts.tool_usage.render(&[
        ("tools", &definitions),
        ("tool_names", &names),
        ("history", &history),
        ("user_input", input.user_input.trim()),
        ("scratchpad", &scratchpad),
    ]))
}

/// The tool-usage prompt ending in the `Thought: Do I need to use a tool?` cue.
pub fn assemble_tool_usage_prompt<S: AsRef<str>>(
    prompts: &Prompts,
    r: &Registry,
    subset: &[S],
    image: Option<&ImageIntro>,
    history: &[ConversationTurn],
    user_input: &str,
) -> Result<String, RegistryError> {
    render_tool_usage_prompt(
        prompts,
        r,
        &UsagePromptInput {
            subset,
            image,
            history,
            user_input,
            scratchpad: "",
        },
    )
}

/// Eight random lowercase letters, e.g. `hybowtyx`.
pub fn random_image_stem<R: Rng + ?Sized>(rng: &mut R) -> String {
    (0..8).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

/// A stable pseudo-random `image/<8 letters>.png` name derived from `key`.
pub fn image_name_for(key: &str) -> String {
    let mut rng = ChaCha8Rng::from_seed(Sha256::digest(key.as_bytes()).into());
    format!("image/{}.png", random_image_stem(&mut rng))
}
