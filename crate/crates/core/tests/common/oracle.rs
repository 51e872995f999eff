//! Brute-force reference implementations used to check the library.
//! Deliberately naive: linear scans instead of maps, exhaustive subsequence
//! enumeration instead of dynamic programming.

pub fn bleu_tokens(s: &str) -> Vec<String> {
    let mut t = s.to_lowercase().trim().to_string();
    while t.ends_with(['.', ',', '!', '?', ';', ':']) {
        t.pop();
    }
    t.split_whitespace().map(String::from).collect()
}

fn count(grams: &[Vec<String>], g: &[String]) -> usize {
    grams.iter().filter(|x| x.as_slice() == g).count()
}

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n)
        .map(|i| tokens[i..i + n].to_vec())
        .collect()
}

/// Sentence BLEU by exhaustive n-gram counting.
pub fn bleu(candidate: &str, reference: &str) -> f64 {
    let c = bleu_tokens(candidate);
    let r = bleu_tokens(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let orders = c.len().min(4);
    let mut logs = 0.0;
    for n in 1..=orders {
        let cg = ngrams(&c, n);
        let rg = ngrams(&r, n);
        let mut distinct: Vec<Vec<String>> = Vec::new();
        for g in &cg {
            if !distinct.contains(g) {
                distinct.push(g.clone());
            }
        }
        let mut clipped = 0usize;
        for g in &distinct {
            clipped += count(&cg, g).min(count(&rg, g));
        }
        if clipped == 0 {
            return 0.0;
        }
        logs += (clipped as f64 / cg.len() as f64).ln();
    }
    let bp = if c.len() < r.len() {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    } else {
        1.0
    };
    bp * (logs / orders as f64).exp()
}

pub fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == *n))
}

/// Longest common subsequence length by enumerating every subsequence of
/// the shorter sequence (fine for the short instructions used in tests).
pub fn brute_lcs(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 16, "brute force limited to 16 tokens");
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let picked: Vec<&String> = (0..short.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| &short[i])
            .collect();
        if picked.len() > best && is_subsequence(&picked, long) {
            best = picked.len();
        }
    }
    best
}

pub fn lcs_similarity(a: &str, b: &str) -> f64 {
    let (ta, tb) = (tokens(a), tokens(b));
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    2.0 * brute_lcs(&ta, &tb) as f64 / (ta.len() + tb.len()) as f64
}

/// Greedy first-wins dedup computed from a full pairwise matrix.
/// Returns (retained indices, removed indices).
pub fn dedup(texts: &[String], threshold: f64) -> (Vec<usize>, Vec<usize>) {
    let n = texts.len();
    let matrix: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| lcs_similarity(&texts[i], &texts[j]))
                .collect()
        })
        .collect();
    let mut retained = Vec::new();
    let mut removed = Vec::new();
    for i in 0..n {
        let dup = retained
            .iter()
            .any(|&j: &usize| tokens(&texts[i]) == tokens(&texts[j]) || matrix[i][j] > threshold);
        if dup {
            removed.push(i);
        } else {
            retained.push(i);
        }
    }
    (retained, removed)
}

/// Oracle view of an argument list split against `k` arguments.
pub fn split(raw: &str, k: usize) -> Option<Vec<String>> {
    let mut s = raw.trim();
    if s.len() >= 2 && s.starts_with('"') && s.ends_with('"') {
        s = s[1..s.len() - 1].trim();
    }
    let mut out = Vec::new();
    let mut rest = s;
    for _ in 0..k.saturating_sub(1) {
        let i = rest.find(',')?;
        out.push(rest[..i].trim().to_string());
        rest = &rest[i + 1..];
    }
    out.push(rest.trim().to_string());
    Some(out)
}

pub fn last_segment(p: &str) -> &str {
    p.rsplit('/').next().unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Image,
    Text,
}

/// Ground truth as the oracle sees it.
#[derive(Debug, Clone)]
pub struct GtCase {
    pub uses_tool: bool,
    /// (tool, args, kinds)
    pub chain: Vec<(String, Vec<String>, Vec<Kind>)>,
}

/// A prediction as the oracle sees it.
#[derive(Debug, Clone)]
pub enum PredCase {
    Malformed,
    NoTool,
    /// (tool, raw input) for each action, closing with a reply.
    Actions(Vec<(String, String)>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleScore {
    pub tau: f64,
    pub alpha: f64,
    pub eta: f64,
    pub sr: f64,
}

pub fn eta_action(raw: &str, args: &[String], kinds: &[Kind]) -> f64 {
    let Some(pred) = split(raw, args.len()) else {
        return 0.0;
    };
    let mut sum = 0.0;
    for j in 0..args.len() {
        sum += match kinds[j] {
            Kind::Image => {
                if !last_segment(pred[j].trim()).is_empty()
                    && last_segment(pred[j].trim()) == last_segment(args[j].trim())
                {
                    1.0
                } else {
                    0.0
                }
            }
            Kind::Text => bleu(&pred[j], &args[j]),
        };
    }
    sum / args.len() as f64
}

/// Per-sample indicators with no-tool records scored vacuously.
pub fn score(gt: &GtCase, pred: &PredCase) -> OracleScore {
    let zero = OracleScore {
        tau: 0.0,
        alpha: 0.0,
        eta: 0.0,
        sr: 0.0,
    };
    if let PredCase::Malformed = pred {
        return zero;
    }
    if !gt.uses_tool {
        return match pred {
            PredCase::NoTool => OracleScore {
                tau: 1.0,
                alpha: 1.0,
                eta: 1.0,
                sr: 1.0,
            },
            _ => zero,
        };
    }
    let actions: &[(String, String)] = match pred {
        PredCase::Actions(a) => a,
        _ => &[],
    };
    let tau = if actions.is_empty() { 0.0 } else { 1.0 };
    let mut all_alpha = true;
    let mut eta_sum = 0.0;
    let mut ok = tau == 1.0 && actions.len() <= gt.chain.len();
    for (j, (tool, args, kinds)) in gt.chain.iter().enumerate() {
        let (a, e) = match actions.get(j) {
            Some((pt, raw)) => (pt.trim() == tool.trim(), eta_action(raw, args, kinds)),
            None => (false, 0.0),
        };
        all_alpha &= a;
        eta_sum += e;
        ok &= a && e > 0.5;
    }
    OracleScore {
        tau,
        alpha: if all_alpha { 1.0 } else { 0.0 },
        eta: eta_sum / gt.chain.len() as f64,
        sr: if ok { 1.0 } else { 0.0 },
    }
}

/// `100 * sum / n` of each indicator, sums in input order.
pub fn aggregate(scores: &[OracleScore]) -> [f64; 4] {
    let n = scores.len() as f64;
    let mut s = [0.0f64; 4];
    for x in scores {
        s[0] += x.tau;
        s[1] += x.alpha;
        s[2] += x.eta;
        s[3] += x.sr;
    }
    s.map(|v| 100.0 * v / n)
}
