//! Seeded generators for evaluation sets, predictions and transcripts.

use rand::seq::SliceRandom;
use rand::Rng;
use tooluse::metrics::{EvalRecord, GtAction};
use tooluse::react::{serialize_steps, Decision, Step};
use tooluse::registry::{ArgKind, ImageIntro, Registry};

use super::oracle::{GtCase, Kind, PredCase};

pub const WORDS: &[&str] = &[
    "cat", "dog", "red", "blue", "car", "tree", "sky", "house", "man", "woman", "boat", "apple",
    "table", "snow", "beach", "field", "bird", "flower", "river", "lamp", "green", "old", "small",
];

pub fn words<R: Rng>(rng: &mut R, lo: usize, hi: usize) -> String {
    let n = rng.gen_range(lo..=hi);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn stem<R: Rng>(rng: &mut R) -> String {
    (0..8).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

fn kinds(r: &Registry, tool: &str) -> Vec<Kind> {
    r.lookup(tool)
        .unwrap()
        .schema
        .iter()
        .map(|a| match a.kind {
            ArgKind::ImagePath => Kind::Image,
            ArgKind::Text => Kind::Text,
        })
        .collect()
}

fn args_for<R: Rng>(rng: &mut R, r: &Registry, tool: &str, image: &str) -> Vec<String> {
    kinds(r, tool)
        .iter()
        .map(|k| match k {
            Kind::Image => image.to_string(),
            Kind::Text => words(rng, 1, 5),
        })
        .collect()
}

/// A generated record with its oracle-side ground truth.
pub struct Case {
    pub record: EvalRecord,
    pub gt: GtCase,
}

/// `n` records over the registry: about a fifth no-tool, a fifth two-step
/// chains, the rest single actions. Each carries a `gt_response`.
pub fn eval_set<R: Rng>(rng: &mut R, r: &Registry, n: usize) -> Vec<Case> {
    let chained: Vec<&str> = r
        .tools()
        .iter()
        .filter(|t| t.chain_from.is_some())
        .map(|t| t.name.as_str())
        .collect();
    (0..n)
        .map(|i| {
            let id = format!("s{i:05}");
            let image = format!("image/{}.png", stem(rng));
            let roll = rng.gen_range(0..10);
            let intro = ImageIntro {
                path: image.clone(),
                description: format!("a photo of a {}", words(rng, 1, 3)),
            };
            if roll < 2 {
                let reply = format!("It is a {}.", words(rng, 1, 4));
                let record = EvalRecord {
                    id,
                    user_input: format!("what is in the picture with the {}", words(rng, 1, 2)),
                    image: Some(intro),
                    history: Vec::new(),
                    tools: None,
                    gt_decision: Decision::NoTool,
                    gt_chain: Vec::new(),
                    gt_response: Some(serialize_steps(&[Step::no_tool(reply)])),
                };
                return Case {
                    record,
                    gt: GtCase {
                        uses_tool: false,
                        chain: Vec::new(),
                    },
                };
            }
            let mut chain = Vec::new();
            if roll < 4 {
                let tool = *chained.choose(rng).unwrap();
                let feeder = r.lookup(tool).unwrap().chain_from.clone().unwrap();
                let mid = format!("image/{}.png", stem(rng));
                chain.push(GtAction::new(
                    feeder.clone(),
                    args_for(rng, r, &feeder, &image),
                ));
                chain.push(GtAction::new(tool, args_for(rng, r, tool, &mid)));
            } else {
                let tool = r.tools().choose(rng).unwrap().name.clone();
                chain.push(GtAction::new(tool.clone(), args_for(rng, r, &tool, &image)));
            }
            let mut steps: Vec<Step> = Vec::new();
            for (j, a) in chain.iter().enumerate() {
                let obs = match chain.get(j + 1) {
                    Some(next) => next.arguments[0].clone(),
                    None => format!("image/{}.png", stem(rng)),
                };
                steps.push(Step::use_tool(&a.tool, a.arguments.join(", "), Some(obs)));
            }
            steps.push(Step::no_tool("Here is the result."));
            let gt = GtCase {
                uses_tool: true,
                chain: chain
                    .iter()
                    .map(|a| (a.tool.clone(), a.arguments.clone(), kinds(r, &a.tool)))
                    .collect(),
            };
            Case {
                record: EvalRecord {
                    id,
                    user_input: format!("please {} the {}", words(rng, 1, 2), words(rng, 1, 3)),
                    image: Some(intro),
                    history: Vec::new(),
                    tools: None,
                    gt_decision: Decision::UseTool,
                    gt_chain: chain,
                    gt_response: Some(serialize_steps(&steps)),
                },
                gt,
            }
        })
        .collect()
}

/// Renders an oracle-side prediction as model output text.
pub fn render(pred: &PredCase) -> String {
    match pred {
        PredCase::Malformed => "I think the answer is a cat".to_string(),
        PredCase::NoTool => serialize_steps(&[Step::no_tool("No tool needed.")]),
        PredCase::Actions(actions) => {
            let mut steps: Vec<Step> = actions
                .iter()
                .enumerate()
                .map(|(i, (t, raw))| Step::use_tool(t, raw, Some(format!("out/{i}.png"))))
                .collect();
            steps.push(Step::no_tool("Done."));
            serialize_steps(&steps)
        }
    }
}

/// A random perturbation of the ground truth.
pub fn perturb<R: Rng>(rng: &mut R, r: &Registry, gt: &GtCase) -> PredCase {
    let roll = rng.gen_range(0..12);
    if roll == 0 {
        return PredCase::Malformed;
    }
    if !gt.uses_tool {
        return if roll < 7 {
            PredCase::NoTool
        } else {
            let t = r.tools().choose(rng).unwrap();
            PredCase::Actions(vec![(t.name.clone(), format!("image/{}.png", stem(rng)))])
        };
    }
    let mut actions: Vec<(String, Vec<String>)> = gt
        .chain
        .iter()
        .map(|(t, a, _)| (t.clone(), a.clone()))
        .collect();
    let j = rng.gen_range(0..actions.len());
    match roll {
        1 => return PredCase::NoTool,
        2 => {
            let other = r.tools().choose(rng).unwrap().name.clone();
            actions[j].0 = other;
        }
        3 => {
            for (k, kind) in gt.chain[j].2.iter().enumerate() {
                if *kind == Kind::Image {
                    let name = actions[j].1[k].rsplit('/').next().unwrap().to_string();
                    actions[j].1[k] = format!("elsewhere/{name}");
                }
            }
        }
        4 => {
            for (k, kind) in gt.chain[j].2.iter().enumerate() {
                if *kind == Kind::Image {
                    actions[j].1[k] = format!("image/{}.png", stem(rng));
                }
            }
        }
        5 | 6 => {
            for (k, kind) in gt.chain[j].2.iter().enumerate() {
                if *kind == Kind::Text {
                    actions[j].1[k] = words(rng, 1, 5);
                }
            }
        }
        7 => {
            actions[j].1.pop();
            if actions[j].1.is_empty() {
                actions[j].1.push(String::new());
            }
        }
        8 => {
            let t = r.tools().choose(rng).unwrap().name.clone();
            actions.push((t, vec![format!("image/{}.png", stem(rng))]));
        }
        9 => {
            actions.truncate(1);
        }
        _ => {}
    }
    PredCase::Actions(
        actions
            .into_iter()
            .map(|(t, a)| (t, a.join(", ")))
            .collect(),
    )
}

/// A random well-formed transcript with single-line fields.
pub fn transcript<R: Rng>(rng: &mut R, r: &Registry) -> Vec<Step> {
    let n = rng.gen_range(0..=4);
    let mut steps: Vec<Step> = (0..n)
        .map(|_| {
            let tool = r.tools().choose(rng).unwrap().name.clone();
            let input = if rng.gen_bool(0.5) {
                format!("image/{}.png, {}", stem(rng), words(rng, 1, 6))
            } else {
                format!("image/{}.png", stem(rng))
            };
            let obs = if rng.gen_bool(0.5) {
                format!("image/{}.png", stem(rng))
            } else {
                words(rng, 1, 12)
            };
            Step::use_tool(tool, input, Some(obs))
        })
        .collect();
    steps.push(Step::no_tool(words(rng, 1, 15)));
    steps
}
