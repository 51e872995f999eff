//! Library results checked against the brute-force oracles in `common`.

mod common;

use common::{gen, oracle};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tooluse::curation::{dedup_texts, lcs_similarity, LcsSimilarity};
use tooluse::metrics::{aggregate, bleu, score_prediction_text, ScoreOptions};
use tooluse::registry::Registry;

const BLEU_TOL: f64 = 1e-9;

/// Candidate, reference, value computed offline by exhaustive n-gram counting.
const BLEU_CASES: &[(&str, &str, f64)] = &[
    (
        "a red apple",
        "a red apple on the table",
        0.36787944117144233,
    ),
    ("the cat sat on the mat", "the cat sat on the mat", 1.0),
    ("the cat sat on the mat.", "The cat sat on the mat", 1.0),
    ("blue car", "red car", 0.0),
    (
        "a dog runs in the green park",
        "a dog is running in the green park",
        0.42383656282787796,
    ),
    (
        "a small boat on the river near the old house",
        "a boat on the river near the old house",
        0.7825422900366437,
    ),
    (
        "replace the cat with a dog please",
        "replace the cat with a small dog",
        0.6434588841607617,
    ),
    ("red car", "a red car", 0.6065306597126334),
    (
        "an old man with a green lamp",
        "an old woman with a green lamp at night",
        0.36741454942156665,
    ),
    ("", "a cat", 0.0),
];

#[test]
fn bleu_matches_pinned_values_and_oracle() {
    for &(c, r, expected) in BLEU_CASES {
        let got = bleu(c, r);
        assert!(
            (got - expected).abs() < BLEU_TOL,
            "{c:?} vs {r:?}: {got} != {expected}"
        );
        assert!(
            (oracle::bleu(c, r) - expected).abs() < BLEU_TOL,
            "oracle disagrees on {c:?}"
        );
    }
}

#[test]
fn bleu_matches_oracle_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..2000 {
        let c = gen::words(&mut rng, 0, 9);
        let r = gen::words(&mut rng, 0, 9);
        assert!(
            (bleu(&c, &r) - oracle::bleu(&c, &r)).abs() < BLEU_TOL,
            "{c:?} vs {r:?}"
        );
    }
}

#[test]
fn lcs_similarity_of_near_identical_instructions() {
    let a = "detect the cat in the image";
    let b = "detect the dog in the image";
    assert_eq!(lcs_similarity(a, b), 10.0 / 12.0);
    assert_eq!(oracle::lcs_similarity(a, b), 10.0 / 12.0);
}

#[test]
fn lcs_similarity_matches_oracle_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let a = gen::words(&mut rng, 0, 8);
        let b = gen::words(&mut rng, 0, 8);
        assert_eq!(
            lcs_similarity(&a, &b),
            oracle::lcs_similarity(&a, &b),
            "{a:?} vs {b:?}"
        );
    }
}

#[test]
fn crafted_set_keeps_three_of_five() {
    let texts = [
        "detect the cat in the image",
        "detect the cat in this image",
        "generate a picture of a sunny beach",
        "generate a picture of a sunny beach today",
        "what color is the car",
    ];
    let owned: Vec<String> = texts.iter().map(|s| s.to_string()).collect();
    let (retained, removed) = oracle::dedup(&owned, 0.8);
    assert_eq!(retained, vec![0, 2, 4]);
    assert_eq!(removed, vec![1, 3]);

    let got = dedup_texts(&texts, 0.8, &LcsSimilarity).unwrap();
    assert_eq!(got.retained, retained);
    let pairs: Vec<(usize, usize)> = got.removed.iter().map(|&(i, j, _)| (i, j)).collect();
    assert_eq!(pairs, vec![(1, 0), (3, 2)]);
}

#[test]
fn dedup_matches_pairwise_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for round in 0..60 {
        let n = 5 + round % 20;
        let mut texts: Vec<String> = (0..n).map(|_| gen::words(&mut rng, 2, 7)).collect();
        // Seed in some exact and near duplicates.
        for i in 1..n {
            if i % 4 == 0 {
                texts[i] = texts[i - 1].clone();
            }
        }
        for &th in &[0.5, 0.8, 1.0] {
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let got = dedup_texts(&refs, th, &LcsSimilarity).unwrap();
            let (retained, removed) = oracle::dedup(&texts, th);
            assert_eq!(got.retained, retained, "round {round} threshold {th}");
            let got_removed: Vec<usize> = got.removed.iter().map(|r| r.0).collect();
            assert_eq!(got_removed, removed);
        }
    }
}

#[test]
fn aggregates_match_brute_force_recomputation() {
    let r = Registry::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cases = gen::eval_set(&mut rng, &r, 300);
    let opts = ScoreOptions::default();
    let mut scores = Vec::new();
    let mut expected = Vec::new();
    for c in &cases {
        let pred = gen::perturb(&mut rng, &r, &c.gt);
        scores.push(score_prediction_text(
            &gen::render(&pred),
            &c.record,
            &r,
            &opts,
        ));
        expected.push(oracle::score(&c.gt, &pred));
    }
    for (s, e) in scores.iter().zip(&expected) {
        assert_eq!(f64::from(s.tau), e.tau, "{}", s.id);
        assert_eq!(s.alpha.map(f64::from), Some(e.alpha), "{}", s.id);
        assert_eq!(s.eta, Some(e.eta), "{}", s.id);
        assert_eq!(f64::from(s.sr), e.sr, "{}", s.id);
    }
    let report = aggregate(&scores, &r, &opts).unwrap();
    let [t, a, e, sr] = oracle::aggregate(&expected);
    assert_eq!(report.overall.sr_t, t);
    assert_eq!(report.overall.sr_act, a);
    assert_eq!(report.overall.sr_args, e);
    assert_eq!(report.overall.sr, sr);
}
