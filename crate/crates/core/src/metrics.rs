//! Tool-use success rates.
//!
//! Each prediction is scored against a ground-truth record with three
//! indicators: `tau` (decision to use a tool matches), `alpha` (tool names
//! match) and `eta` (argument score in `[0, 1]`). A sample succeeds when
//! every ground-truth action has a matching name and `eta > 0.5`, the
//! decision matches, and the prediction takes no extra actions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::bleu::{bleu, bleu_tokens};
use crate::react::{parse_transcript, split_arguments, ActionCall, Decision, Transcript};
use crate::registry::{ArgKind, ConversationTurn, ImageIntro, Registry};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
}

/// A ground-truth action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtAction {
    pub tool: String,
    pub arguments: Vec<String>,
}

impl GtAction {
    pub fn new<S: Into<String>>(
        tool: impl Into<String>,
        arguments: impl IntoIterator<Item = S>,
    ) -> Self {
        Self {
            tool: tool.into(),
            arguments: arguments.into_iter().map(Into::into).collect(),
        }
    }
}

/// One line of an evaluation set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub user_input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageIntro>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<ConversationTurn>,
    /// Tools offered in the prompt; all registry tools when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tools: Option<Vec<String>>,
    pub gt_decision: Decision,
    #[serde(default)]
    pub gt_chain: Vec<GtAction>,
    /// Reference transcript, used to build replay files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_response: Option<String>,
}

impl EvalRecord {
    pub fn validate(&self, r: &Registry) -> Result<(), MetricsError> {
        let invalid = |reason: String| MetricsError::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        match (self.gt_decision, self.gt_chain.len()) {
            (Decision::NoTool, 0) => {}
            (Decision::NoTool, _) => return Err(invalid("no-tool record with a chain".into())),
            (Decision::UseTool, 0) => return Err(invalid("tool record without a chain".into())),
            _ => {}
        }
        for a in &self.gt_chain {
            let spec = r.lookup(&a.tool).map_err(|e| invalid(e.to_string()))?;
            if spec.arity() != a.arguments.len() {
                return Err(invalid(format!(
                    "{:?} takes {} arguments, chain gives {}",
                    a.tool,
                    spec.arity(),
                    a.arguments.len()
                )));
            }
        }
        Ok(())
    }

    /// The tool a record is filed under in per-tool tables.
    pub fn primary_tool(&self) -> Option<&str> {
        self.gt_chain.last().map(|a| a.tool.as_str())
    }
}

/// How image-path arguments are compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    /// Final path segment (file name with extension) must be equal.
    #[default]
    Filename,
    /// Only the file extension must be equal.
    Extension,
}

/// Scoring of records whose ground truth is a no-tool reply.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoToolPolicy {
    /// `alpha` and `eta` equal `tau`; every record counts in every rate.
    #[default]
    Vacuous,
    /// `alpha` and `eta` are undefined and the record is left out of the
    /// SR_act and SR_args denominators.
    Exclude,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub path_mode: PathMode,
    pub no_tool_policy: NoToolPolicy,
}

fn final_segment(path: &str) -> &str {
    let p = path.trim().trim_matches('"');
    p.rsplit(['/', '\\']).next().unwrap_or(p)
}

fn extension(path: &str) -> Option<String> {
    let name = final_segment(path);
    name.rfind('.')
        .filter(|&i| i > 0)
        .map(|i| name[i + 1..].to_lowercase())
}

pub fn path_matches(pred: &str, gt: &str, mode: PathMode) -> bool {
    match mode {
        PathMode::Filename => {
            let p = final_segment(pred);
            !p.is_empty() && p == final_segment(gt)
        }
        PathMode::Extension => extension(pred).is_some() && extension(pred) == extension(gt),
    }
}

/// Mean per-argument score; 0 when the input does not split into the
/// ground-truth argument count.
pub fn score_arguments(pred: &ActionCall, gt: &GtAction, kinds: &[ArgKind], mode: PathMode) -> f64 {
    let k = gt.arguments.len();
    if k == 0 {
        return 0.0;
    }
    let Ok(args) = split_arguments(&pred.raw_input, k) else {
        return 0.0;
    };
    let total: f64 = args
        .iter()
        .zip(&gt.arguments)
        .enumerate()
        .map(
            |(j, (p, g))| match kinds.get(j).copied().unwrap_or(ArgKind::Text) {
                ArgKind::ImagePath => f64::from(u8::from(path_matches(p, g, mode))),
                ArgKind::Text => bleu(p, g),
            },
        )
        .sum();
    total / k as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionScore {
    pub gt_tool: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_tool: Option<String>,
    pub alpha: u8,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub tau: u8,
    /// `None` for excluded no-tool records.
    pub alpha: Option<u8>,
    pub eta: Option<f64>,
    pub sr: u8,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub actions: Vec<ActionScore>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gt_tools: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn kinds_for(r: &Registry, tool: &str) -> Vec<ArgKind> {
    r.get(tool)
        .map(|s| s.schema.iter().map(|a| a.kind).collect())
        .unwrap_or_default()
}

pub fn score_sample(
    pred: &Transcript,
    gt: &EvalRecord,
    r: &Registry,
    opts: &ScoreOptions,
) -> SampleScore {
    let tau = u8::from(pred.first_decision() == Some(gt.gt_decision));
    let gt_tools: Vec<String> = gt.gt_chain.iter().map(|a| a.tool.clone()).collect();
    if gt.gt_decision == Decision::NoTool {
        let (alpha, eta) = match opts.no_tool_policy {
            NoToolPolicy::Vacuous => (Some(tau), Some(f64::from(tau))),
            NoToolPolicy::Exclude => (None, None),
        };
        return SampleScore {
            id: gt.id.clone(),
            tau,
            alpha,
            eta,
            sr: tau,
            actions: Vec::new(),
            gt_tools,
            note: None,
        };
    }

    let pred_actions: Vec<&ActionCall> = pred.actions().collect();
    let actions: Vec<ActionScore> = gt
        .gt_chain
        .iter()
        .enumerate()
        .map(|(j, g)| match pred_actions.get(j) {
            Some(p) => ActionScore {
                gt_tool: g.tool.clone(),
                pred_tool: Some(p.tool_name.clone()),
                alpha: u8::from(p.tool_name.trim() == g.tool.trim()),
                eta: score_arguments(p, g, &kinds_for(r, &g.tool), opts.path_mode),
            },
            None => ActionScore {
                gt_tool: g.tool.clone(),
                pred_tool: None,
                alpha: 0,
                eta: 0.0,
            },
        })
        .collect();
    let alpha = u8::from(actions.iter().all(|a| a.alpha == 1));
    let eta = actions.iter().map(|a| a.eta).sum::<f64>() / actions.len() as f64;
    let chain_ok = actions.iter().all(|a| a.alpha == 1 && a.eta > 0.5);
    let extra = pred_actions.len() > gt.gt_chain.len();
    let note = extra.then(|| {
        format!(
            "{} predicted actions for a chain of {}",
            pred_actions.len(),
            gt.gt_chain.len()
        )
    });
    SampleScore {
        id: gt.id.clone(),
        tau,
        alpha: Some(alpha),
        eta: Some(eta),
        sr: u8::from(tau == 1 && chain_ok && !extra),
        actions,
        gt_tools,
        note,
    }
}

/// Scores raw model output; text that does not parse scores zero.
pub fn score_prediction_text(
    text: &str,
    gt: &EvalRecord,
    r: &Registry,
    opts: &ScoreOptions,
) -> SampleScore {
    match parse_transcript(text) {
        Ok(t) => score_sample(&t, gt, r, opts),
        Err(e) => malformed_score(gt, opts, format!("malformed prediction: {e}")),
    }
}

/// Zero score for a record whose prediction could not be obtained or read.
pub fn malformed_score(gt: &EvalRecord, opts: &ScoreOptions, note: String) -> SampleScore {
    let excluded =
        gt.gt_decision == Decision::NoTool && opts.no_tool_policy == NoToolPolicy::Exclude;
    SampleScore {
        id: gt.id.clone(),
        tau: 0,
        alpha: (!excluded).then_some(0),
        eta: (!excluded).then_some(0.0),
        sr: 0,
        actions: Vec::new(),
        gt_tools: gt.gt_chain.iter().map(|a| a.tool.clone()).collect(),
        note: Some(note),
    }
}

/// The four rates for a group of samples, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n: usize,
    pub sr_t: f64,
    pub sr_act: f64,
    pub sr_args: f64,
    pub sr: f64,
    /// Samples counted in SR_act and SR_args.
    pub n_act: usize,
}

/// Rates as `100 * sum / count`, sums taken in input order.
pub fn aggregates<'a>(scores: impl IntoIterator<Item = &'a SampleScore>) -> Option<Aggregates> {
    let (mut n, mut n_act) = (0usize, 0usize);
    let (mut t, mut a, mut e, mut s) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for sc in scores {
        n += 1;
        t += f64::from(sc.tau);
        s += f64::from(sc.sr);
        if let (Some(alpha), Some(eta)) = (sc.alpha, sc.eta) {
            n_act += 1;
            a += f64::from(alpha);
            e += eta;
        }
    }
    if n == 0 {
        return None;
    }
    let pct = |sum: f64, count: usize| {
        if count == 0 {
            0.0
        } else {
            100.0 * sum / count as f64
        }
    };
    Some(Aggregates {
        n,
        sr_t: pct(t, n),
        sr_act: pct(a, n_act),
        sr_args: pct(e, n_act),
        sr: pct(s, n),
        n_act,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRow {
    pub tool: String,
    pub seen: Option<bool>,
    #[serde(flatten)]
    pub rates: Aggregates,
}

pub const NO_TOOL_ROW: &str = "(no tool)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    #[serde(flatten)]
    pub overall: Aggregates,
    pub per_tool: Vec<ToolRow>,
    /// Tool-using samples whose tools are all seen.
    pub seen: Option<Aggregates>,
    /// Tool-using samples with at least one unseen tool.
    pub unseen: Option<Aggregates>,
    pub path_mode: PathMode,
    pub no_tool_policy: NoToolPolicy,
    pub samples: Vec<SampleScore>,
}

pub fn aggregate(
    scores: &[SampleScore],
    r: &Registry,
    opts: &ScoreOptions,
) -> Result<ScoreReport, MetricsError> {
    let overall = aggregates(scores).ok_or(MetricsError::EmptyEvalSet)?;
    let mut groups: BTreeMap<&str, Vec<&SampleScore>> = BTreeMap::new();
    for s in scores {
        let key = s.gt_tools.last().map_or(NO_TOOL_ROW, String::as_str);
        groups.entry(key).or_default().push(s);
    }
    let per_tool = groups
        .into_iter()
        .filter_map(|(tool, group)| {
            Some(ToolRow {
                tool: tool.to_string(),
                seen: r.get(tool).map(|t| t.seen),
                rates: aggregates(group)?,
            })
        })
        .collect();
    let all_seen = |s: &&SampleScore| s.gt_tools.iter().all(|t| r.get(t).is_some_and(|t| t.seen));
    let tool_using = || scores.iter().filter(|s| !s.gt_tools.is_empty());
    Ok(ScoreReport {
        overall,
        per_tool,
        seen: aggregates(tool_using().filter(all_seen)),
        unseen: aggregates(tool_using().filter(|s| !all_seen(s))),
        path_mode: opts.path_mode,
        no_tool_policy: opts.no_tool_policy,
        samples: scores.to_vec(),
    })
}

/// Aligned-column text rendering.
pub fn render_text(report: &ScoreReport) -> String {
    let mut out = String::new();
    let width = report
        .per_tool
        .iter()
        .map(|r| r.tool.len())
        .chain(["overall".len(), "unseen".len()])
        .max()
        .unwrap_or(8);
    let _ = writeln!(
        out,
        "{:<width$}  {:>5}  {:>6}  {:>6}  {:>7}  {:>6}",
        "", "N", "SR_t", "SR_act", "SR_args", "SR"
    );
    let mut row = |label: &str, a: &Aggregates| {
        let _ = writeln!(
            out,
            "{:<width$}  {:>5}  {:>6.1}  {:>6.1}  {:>7.1}  {:>6.1}",
            label, a.n, a.sr_t, a.sr_act, a.sr_args, a.sr
        );
    };
    row("overall", &report.overall);
    if let Some(a) = &report.seen {
        row("seen", a);
    }
    if let Some(a) = &report.unseen {
        row("unseen", a);
    }
    out.push('\n');
    let mut rows = String::new();
    for t in &report.per_tool {
        let a = &t.rates;
        let _ = writeln!(
            rows,
            "{:<width$}  {:>5}  {:>6.1}  {:>6.1}  {:>7.1}  {:>6.1}",
            t.tool, a.n, a.sr_t, a.sr_act, a.sr_args, a.sr
        );
    }
    out.push_str(&rows);
    let _ = writeln!(
        out,
        "\npath mode: {:?}; no-tool records: {:?}",
        report.path_mode, report.no_tool_policy
    );
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Comma-separated rendering: the overall rates, then the per-tool table.
pub fn render_csv(report: &ScoreReport) -> String {
    let a = &report.overall;
    let mut out = String::from("SR_t,SR_act,SR_args,SR\n");
    let _ = writeln!(
        out,
        "{:.1},{:.1},{:.1},{:.1}",
        a.sr_t, a.sr_act, a.sr_args, a.sr
    );
    out.push_str("\ntool,seen,N,SR_t,SR_act,SR_args,SR\n");
    for t in &report.per_tool {
        let a = &t.rates;
        let seen = t.seen.map_or(String::new(), |s| s.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{:.1},{:.1},{:.1},{:.1}",
            csv_field(&t.tool),
            seen,
            a.n,
            a.sr_t,
            a.sr_act,
            a.sr_args,
            a.sr
        );
    }
    out
}
