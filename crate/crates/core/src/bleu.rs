//! Sentence-level BLEU for short argument strings.

use std::collections::HashMap;

const MAX_ORDER: usize = 4;
const TERMINAL_PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':'];

/// Lowercases, strips punctuation at the end of the string and splits on
/// whitespace.
pub fn bleu_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .trim()
        .trim_end_matches(TERMINAL_PUNCTUATION)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// BLEU of `candidate` against a single `reference`.
///
/// Orders 1..=min(4, candidate length) with clipped precision and uniform
/// weights; brevity penalty `exp(1 - r/c)` when the candidate is shorter.
/// No smoothing: any order with zero matches gives 0. An empty candidate
/// scores 0.
pub fn bleu(candidate: &str, reference: &str) -> f64 {
    let cand = bleu_tokens(candidate);
    let refr = bleu_tokens(reference);
    let c = cand.len();
    if c == 0 || refr.is_empty() {
        return 0.0;
    }
    let orders = c.min(MAX_ORDER);
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let ref_counts = ngram_counts(&refr, n);
        let clipped: usize = ngram_counts(&cand, n)
            .iter()
            .map(|(gram, &k)| k.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / (c - n + 1) as f64).ln();
    }
    let r = refr.len();
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    bp * (log_sum / orders as f64).exp()
}
