//! Reader and writer for the Thought / Action / Action Input / Observation
//! transcript format.
//!
//! The grammar is line oriented. A keyword line starts (after optional
//! leading whitespace) with one of `Thought:`, `Action:`, `Action Input:`,
//! `Observation:` or `AI:`. Lines that do not start with a keyword are folded
//! into the preceding field with a single space. Everything after `AI:` up to
//! the end of input is the reply.
//!
//! Keyword-like lines inside an observation are not escaped: the first line
//! that looks like a keyword ends the observation. Tool hosts that emit such
//! lines produce transcripts whose meaning is undefined.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The literal question every step opens with.
pub const DECISION_QUESTION: &str = "Do I need to use a tool?";
/// Prompt cue that precedes a model's decision token.
pub const THOUGHT_CUE: &str = "Thought: Do I need to use a tool?";

const THOUGHT: &str = "Thought:";
const ACTION: &str = "Action:";
const ACTION_INPUT: &str = "Action Input:";
const OBSERVATION: &str = "Observation:";
const AI: &str = "AI:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed transcript: {0}")]
    Malformed(String),
    #[error("expected {expected} arguments, found {found}")]
    ArityMismatch { expected: usize, found: usize },
}

/// A single tool invocation as written on the `Action` / `Action Input` lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCall {
    pub tool_name: String,
    pub raw_input: String,
    /// Empty until [`ActionCall::split`] has been applied.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub arguments: Vec<String>,
}

impl ActionCall {
    pub fn new(tool_name: impl Into<String>, raw_input: impl Into<String>) -> Self {
        Self {
            tool_name: tool_name.into().trim().to_string(),
            raw_input: raw_input.into().trim().to_string(),
            arguments: Vec::new(),
        }
    }

    /// Split `raw_input` against a schema of `arity` arguments.
    pub fn split(&self, arity: usize) -> Result<ActionCall, CodecError> {
        let arguments = split_arguments(&self.raw_input, arity)?;
        Ok(ActionCall {
            arguments,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    UseTool,
    NoTool,
}

impl Decision {
    pub fn token(self) -> &'static str {
        match self {
            Decision::UseTool => "Yes",
            Decision::NoTool => "No",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision")]
pub enum Step {
    UseTool {
        action: ActionCall,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        observation: Option<String>,
    },
    NoTool {
        reply: String,
    },
}

impl Step {
    pub fn decision(&self) -> Decision {
        match self {
            Step::UseTool { .. } => Decision::UseTool,
            Step::NoTool { .. } => Decision::NoTool,
        }
    }

    pub fn action(&self) -> Option<&ActionCall> {
        match self {
            Step::UseTool { action, .. } => Some(action),
            Step::NoTool { .. } => None,
        }
    }

    pub fn use_tool(
        tool_name: impl Into<String>,
        raw_input: impl Into<String>,
        observation: Option<String>,
    ) -> Self {
        Step::UseTool {
            action: ActionCall::new(tool_name, raw_input),
            observation,
        }
    }

    pub fn no_tool(reply: impl Into<String>) -> Self {
        Step::NoTool {
            reply: reply.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub steps: Vec<Step>,
    pub terminated: bool,
    /// Text seen before the first `Thought:` line, kept for diagnostics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preamble: Option<String>,
}

impl Transcript {
    pub fn new(steps: Vec<Step>) -> Self {
        let terminated = matches!(steps.last(), Some(Step::NoTool { .. }));
        Self {
            steps,
            terminated,
            preamble: None,
        }
    }

    pub fn actions(&self) -> impl Iterator<Item = &ActionCall> {
        self.steps.iter().filter_map(Step::action)
    }

    pub fn action_count(&self) -> usize {
        self.actions().count()
    }

    pub fn first_decision(&self) -> Option<Decision> {
        self.steps.first().map(Step::decision)
    }

    pub fn final_reply(&self) -> Option<&str> {
        match self.steps.last() {
            Some(Step::NoTool { reply }) => Some(reply),
            _ => None,
        }
    }

    /// Checks the structural invariants: at most one `NoTool` step and only
    /// in last position, `terminated` agrees with it, and every non-final
    /// `UseTool` step carries an observation.
    pub fn validate(&self) -> Result<(), CodecError> {
        let last = self.steps.len().saturating_sub(1);
        for (i, step) in self.steps.iter().enumerate() {
            match step {
                Step::NoTool { .. } if i != last => {
                    return Err(CodecError::Malformed(format!(
                        "step {i}: reply before the end of the transcript"
                    )))
                }
                Step::UseTool {
                    action,
                    observation,
                } => {
                    if action.tool_name.is_empty() {
                        return Err(CodecError::Malformed(format!("step {i}: empty action")));
                    }
                    if i != last && observation.as_deref().is_none_or(str::is_empty) {
                        return Err(CodecError::Malformed(format!(
                            "step {i}: missing observation"
                        )));
                    }
                }
                _ => {}
            }
        }
        let ends_in_reply = matches!(self.steps.last(), Some(Step::NoTool { .. }));
        if ends_in_reply != self.terminated {
            return Err(CodecError::Malformed(
                "terminated flag disagrees with final step".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Keyword {
    Thought,
    Action,
    ActionInput,
    Observation,
    Ai,
}

impl Keyword {
    const ALL: [(Keyword, &'static str); 5] = [
        (Keyword::Thought, THOUGHT),
        (Keyword::ActionInput, ACTION_INPUT),
        (Keyword::Action, ACTION),
        (Keyword::Observation, OBSERVATION),
        (Keyword::Ai, AI),
    ];

    fn match_line(line: &str) -> Option<(Keyword, &str)> {
        let line = line.trim_start();
        Keyword::ALL
            .iter()
            .find_map(|(kw, tag)| line.strip_prefix(tag).map(|rest| (*kw, rest)))
    }

    fn is_partial(line: &str) -> bool {
        let line = line.trim_start();
        !line.is_empty()
            && Keyword::ALL
                .iter()
                .any(|(_, tag)| tag.len() > line.len() && tag.starts_with(line))
    }
}

struct Field {
    keyword: Keyword,
    value: String,
}

fn fold(value: &mut String, piece: &str) {
    let piece = piece.trim();
    if piece.is_empty() {
        return;
    }
    if !value.is_empty() {
        value.push(' ');
    }
    value.push_str(piece);
}

/// Splits the text into keyword fields plus the preamble. A final line that
/// is a cut-off keyword (e.g. `Action Inp`) is discarded.
fn tokenize(text: &str) -> (Option<String>, Vec<Field>) {
    let mut lines: Vec<&str> = text.lines().collect();
    if !text.ends_with('\n') {
        if let Some(last) = lines.last() {
            if Keyword::match_line(last).is_none() && Keyword::is_partial(last) {
                lines.pop();
            }
        }
    }

    let mut preamble = String::new();
    let mut fields: Vec<Field> = Vec::new();
    let mut in_reply = false;
    for line in lines {
        if in_reply {
            if let Some(field) = fields.last_mut() {
                fold(&mut field.value, line);
            }
            continue;
        }
        match Keyword::match_line(line) {
            Some((keyword, rest)) if !(fields.is_empty() && keyword != Keyword::Thought) => {
                let mut value = String::new();
                fold(&mut value, rest);
                in_reply = keyword == Keyword::Ai;
                fields.push(Field { keyword, value });
            }
            _ => match fields.last_mut() {
                Some(field) => fold(&mut field.value, line),
                None => {
                    if !preamble.is_empty() {
                        preamble.push('\n');
                    }
                    preamble.push_str(line);
                }
            },
        }
    }
    let preamble = (!preamble.trim().is_empty()).then_some(preamble);
    (preamble, fields)
}

enum ThoughtValue {
    Decided(Decision),
    Partial,
}

fn parse_thought(value: &str) -> Result<ThoughtValue, CodecError> {
    let malformed = || CodecError::Malformed(format!("unrecognised thought {value:?}"));
    match value.strip_prefix(DECISION_QUESTION) {
        Some(rest) => match rest.trim() {
            "Yes" => Ok(ThoughtValue::Decided(Decision::UseTool)),
            "No" => Ok(ThoughtValue::Decided(Decision::NoTool)),
            "" => Ok(ThoughtValue::Partial),
            token if "Yes".starts_with(token) || "No".starts_with(token) => {
                Ok(ThoughtValue::Partial)
            }
            _ => Err(malformed()),
        },
        None if DECISION_QUESTION.starts_with(value) => Ok(ThoughtValue::Partial),
        None => Err(malformed()),
    }
}

/// Parses model or teacher output into a [`Transcript`].
///
/// Output cut off in the middle of a step yields `terminated == false` and
/// the complete steps before the cut. An `Action Input` line without an
/// observation is a complete step.
pub fn parse_transcript(text: &str) -> Result<Transcript, CodecError> {
    let (preamble, fields) = tokenize(text);
    if fields.is_empty() {
        return Err(CodecError::Malformed("no recognizable keyword line".into()));
    }

    let n = fields.len();
    let unexpected = |i: usize, expected: &str| {
        CodecError::Malformed(format!(
            "field {i}: expected {expected}, found {:?}",
            fields[i].keyword
        ))
    };

    let mut steps = Vec::new();
    let mut i = 0;
    while i < n {
        if fields[i].keyword != Keyword::Thought {
            return Err(unexpected(i, "Thought"));
        }
        let decision = match parse_thought(&fields[i].value)? {
            ThoughtValue::Decided(d) => d,
            ThoughtValue::Partial if i + 1 == n => break,
            ThoughtValue::Partial => {
                return Err(CodecError::Malformed(format!(
                    "field {i}: thought without a decision"
                )))
            }
        };
        i += 1;
        if i == n {
            break;
        }
        match decision {
            Decision::NoTool => {
                if fields[i].keyword != Keyword::Ai {
                    return Err(unexpected(i, "AI"));
                }
                steps.push(Step::NoTool {
                    reply: fields[i].value.clone(),
                });
                i += 1;
                debug_assert_eq!(i, n);
            }
            Decision::UseTool => {
                if fields[i].keyword != Keyword::Action {
                    return Err(unexpected(i, "Action"));
                }
                let tool_name = fields[i].value.clone();
                if tool_name.is_empty() {
                    // Cut off right after the keyword.
                    if i + 1 == n {
                        break;
                    }
                    return Err(CodecError::Malformed(format!("field {i}: empty action")));
                }
                i += 1;
                if i == n {
                    break;
                }
                if fields[i].keyword != Keyword::ActionInput {
                    return Err(CodecError::Malformed(format!(
                        "field {i}: Action without Action Input"
                    )));
                }
                let raw_input = fields[i].value.clone();
                i += 1;
                let mut observation = None;
                if i < n && fields[i].keyword == Keyword::Observation {
                    observation = Some(fields[i].value.clone()).filter(|o| !o.is_empty());
                    i += 1;
                }
                if i < n && observation.is_none() {
                    return Err(CodecError::Malformed(format!(
                        "field {i}: action followed by another step without an observation"
                    )));
                }
                steps.push(Step::UseTool {
                    action: ActionCall {
                        tool_name,
                        raw_input,
                        arguments: Vec::new(),
                    },
                    observation,
                });
            }
        }
    }

    let terminated = matches!(steps.last(), Some(Step::NoTool { .. }));
    Ok(Transcript {
        steps,
        terminated,
        preamble,
    })
}

fn write_step(out: &mut String, step: &Step) {
    match step {
        Step::UseTool {
            action,
            observation,
        } => {
            out.push_str(THOUGHT_CUE);
            out.push_str(" Yes\n");
            out.push_str(ACTION);
            out.push(' ');
            out.push_str(&action.tool_name);
            out.push('\n');
            out.push_str(ACTION_INPUT);
            out.push(' ');
            out.push_str(&action.raw_input);
            if let Some(obs) = observation {
                out.push('\n');
                out.push_str(OBSERVATION);
                out.push(' ');
                out.push_str(obs);
            }
        }
        Step::NoTool { reply } => {
            out.push_str(THOUGHT_CUE);
            out.push_str(" No\n");
            out.push_str(AI);
            out.push(' ');
            out.push_str(reply);
        }
    }
}

/// Renders a single step without a trailing newline.
pub fn serialize_step(step: &Step) -> String {
    let mut out = String::new();
    write_step(&mut out, step);
    out
}

/// Renders steps in the exact keyword-line format, separated by newlines.
pub fn serialize_steps(steps: &[Step]) -> String {
    let mut out = String::new();
    for (i, step) in steps.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        write_step(&mut out, step);
    }
    out
}

pub fn serialize_transcript(t: &Transcript) -> String {
    serialize_steps(&t.steps)
}

/// Splits an `Action Input` value into `arity` arguments.
///
/// Only the first `arity - 1` commas separate arguments, so the last argument
/// may itself contain commas. A double-quoted input has its quotes removed
/// first.
pub fn split_arguments(raw: &str, arity: usize) -> Result<Vec<String>, CodecError> {
    if arity == 0 {
        return Err(CodecError::ArityMismatch {
            expected: 0,
            found: 1,
        });
    }
    let trimmed = strip_quotes(raw.trim());
    let pieces: Vec<String> = trimmed
        .splitn(arity, ',')
        .map(|p| p.trim().to_string())
        .collect();
    if pieces.len() < arity {
        return Err(CodecError::ArityMismatch {
            expected: arity,
            found: pieces.len(),
        });
    }
    Ok(pieces)
}

/// Collapses a multi-line text into one line the way the reader folds
/// continuation lines, so the result survives a write/read cycle unchanged.
pub fn fold_text(text: &str) -> String {
    let mut out = String::new();
    for line in text.lines() {
        fold(&mut out, line);
    }
    out
}

/// Removes one pair of surrounding double quotes, if present.
pub fn strip_quotes(s: &str) -> &str {
    if s.len() >= 2 && s.starts_with('"') && s.ends_with('"') {
        s[1..s.len() - 1].trim()
    } else {
        s
    }
}
