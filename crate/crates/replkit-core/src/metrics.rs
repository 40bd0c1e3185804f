//! Repetition and translation-quality metrics.
//!
//! Tokenization for every metric is whitespace splitting after trimming, no
//! lowercasing. rep-n distinctness is computed per sentence and averaged over
//! the corpus; rep-w counts tokens recurring within their preceding `w`-token
//! window; rep-r counts positions participating in any repeated bigram. BLEU
//! is corpus-level with add-1 smoothing on the n >= 2 precisions (reported as
//! "BLEU (add-1)" since exact SacreBLEU signature parity is a non-goal), and
//! ROUGE-L is LCS F1.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0}")]
    Invalid(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("screen selected an empty subset")]
    EmptySubset,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub fn tokenize(text: &str) -> Vec<String> {
    text.trim().split_whitespace().map(String::from).collect()
}

// ── Per-sentence repetition metrics ──────────────────────────────────

/// Duplicated n-gram fraction of one sequence: `1 - distinct/total` n-grams.
/// Zero when the sequence has fewer than `n` tokens.
pub fn rep_n<T: Eq + std::hash::Hash>(tokens: &[T], n: usize) -> f64 {
    assert!(n >= 1, "rep_n: n must be >= 1");
    if tokens.len() < n {
        return 0.0;
    }
    let total = tokens.len() - n + 1;
    let distinct: HashSet<&[T]> = tokens.windows(n).collect();
    1.0 - distinct.len() as f64 / total as f64
}

/// Fraction of positions whose token also occurs within the preceding
/// `w`-token window (clipped at the sequence start).
pub fn rep_w_sentence<T: Eq>(tokens: &[T], w: usize) -> f64 {
    assert!(w >= 1, "rep_w: window must be >= 1");
    if tokens.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for t in 0..tokens.len() {
        let lo = t.saturating_sub(w);
        if tokens[lo..t].iter().any(|prev| *prev == tokens[t]) {
            hits += 1;
        }
    }
    hits as f64 / tokens.len() as f64
}

/// Corpus rep-w: mean over sentences of [`rep_w_sentence`].
pub fn rep_w<T: Eq>(corpus: &[Vec<T>], w: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let sum: f64 = corpus.iter().map(|s| rep_w_sentence(s, w)).sum();
    Ok(sum / corpus.len() as f64)
}

/// Fraction of positions participating in any repeated bigram, either as the
/// start of a bigram that occurs elsewhere or the end of one.
pub fn rep_r<T: Eq>(tokens: &[T]) -> f64 {
    let len = tokens.len();
    if len == 0 {
        return 0.0;
    }
    let mut qualifying = 0usize;
    for i in 0..len {
        let forward = i + 1 < len
            && (0..len - 1).any(|j| j != i && tokens[i] == tokens[j] && tokens[i + 1] == tokens[j + 1]);
        let backward = i >= 1
            && (1..len).any(|k| k != i && tokens[i] == tokens[k] && tokens[i - 1] == tokens[k - 1]);
        if forward || backward {
            qualifying += 1;
        }
    }
    qualifying as f64 / len as f64
}

/// Product over n-gram orders of `1 - rep_n` (inputs are fractions in [0,1]).
pub fn diversity(reps: &[f64]) -> f64 {
    reps.iter().map(|r| 1.0 - r).product()
}

/// Count of distinct unigram types across all sentences.
pub fn uniq_unigrams<T: Eq + Ord>(corpus: &[Vec<T>]) -> usize {
    let mut types = BTreeSet::new();
    for sentence in corpus {
        for tok in sentence {
            types.insert(tok);
        }
    }
    types.len()
}

// ── BLEU / ROUGE-L ───────────────────────────────────────────────────

const BLEU_MAX_N: usize = 4;

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU in [0, 100]: geometric mean of clipped n-gram precisions for
/// n = 1..4 (add-1 smoothed for n >= 2) times the brevity penalty
/// `min(1, exp(1 - ref_len/cand_len))`.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(MetricsError::Invalid(format!(
            "bleu: {} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() || candidates.iter().all(|c| c.is_empty()) {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut matched = [0usize; BLEU_MAX_N];
    let mut total = [0usize; BLEU_MAX_N];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=BLEU_MAX_N {
            let ref_counts = ngram_counts(reference, n);
            let cand_counts = ngram_counts(cand, n);
            for (gram, count) in &cand_counts {
                total[n - 1] += count;
                if let Some(rc) = ref_counts.get(gram) {
                    matched[n - 1] += count.min(rc);
                }
            }
        }
    }
    let mut log_sum = 0.0f64;
    for n in 1..=BLEU_MAX_N {
        let (m, t) = (matched[n - 1] as f64, total[n - 1] as f64);
        let p = if n == 1 {
            if t == 0.0 {
                return Err(MetricsError::EmptyCorpus);
            }
            m / t
        } else {
            (m + 1.0) / (t + 1.0)
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let precision = (log_sum / BLEU_MAX_N as f64).exp();
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * precision * bp)
}

/// ROUGE-L F1 for one candidate/reference pair.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(MetricsError::Invalid("rouge_l: empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * p * r / (p + r))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Corpus mean of per-pair ROUGE-L F1.
pub fn rouge_l_corpus(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(MetricsError::Invalid(format!(
            "rouge_l: {} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += rouge_l(c, r)?;
    }
    Ok(sum / candidates.len() as f64)
}

// ── Report ───────────────────────────────────────────────────────────

/// Per-corpus metric bundle. `rep2`/`rep3`/`rep4` are percentages; the
/// fraction-valued fields live in [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub rep2: f64,
    pub rep3: f64,
    pub rep4: f64,
    pub rep_w: f64,
    pub rep_r: f64,
    pub div: f64,
    pub uniq1: usize,
    pub bleu: f64,
    pub rouge_l: f64,
    pub n_sentences: usize,
}

/// Compute the full report over hypothesis/reference sentence pairs.
pub fn evaluate_corpus(hyps: &[String], refs: &[String], rep_w_window: usize) -> Result<MetricsReport> {
    if hyps.len() != refs.len() {
        return Err(MetricsError::Invalid(format!(
            "evaluate: {} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let hyp_tokens: Vec<Vec<String>> = hyps.iter().map(|s| tokenize(s)).collect();
    let ref_tokens: Vec<Vec<String>> = refs.iter().map(|s| tokenize(s)).collect();

    let mean_rep = |n: usize| -> f64 {
        hyp_tokens.iter().map(|s| rep_n(s, n)).sum::<f64>() / hyp_tokens.len() as f64
    };
    let rep2 = mean_rep(2);
    let rep3 = mean_rep(3);
    let rep4 = mean_rep(4);
    let rep_w_val = rep_w(&hyp_tokens, rep_w_window)?;
    let rep_r_val = hyp_tokens.iter().map(|s| rep_r(s)).sum::<f64>() / hyp_tokens.len() as f64;
    Ok(MetricsReport {
        rep2: rep2 * 100.0,
        rep3: rep3 * 100.0,
        rep4: rep4 * 100.0,
        rep_w: rep_w_val,
        rep_r: rep_r_val,
        div: diversity(&[rep2, rep3, rep4]),
        uniq1: uniq_unigrams(&hyp_tokens),
        bleu: bleu(&hyp_tokens, &ref_tokens)?,
        rouge_l: rouge_l_corpus(&hyp_tokens, &ref_tokens)?,
        n_sentences: hyps.len(),
    })
}

/// Rank sentences by per-sentence rep-w (descending, original order breaking
/// ties), keep the top `percentile` percent (ceiling count), and evaluate the
/// full report on that subset.
pub fn top_percentile_screen(
    hyps: &[String],
    refs: &[String],
    rep_w_window: usize,
    percentile: f64,
) -> Result<MetricsReport> {
    if !(0.0..100.0).contains(&percentile) || percentile <= 0.0 {
        return Err(MetricsError::Invalid(format!(
            "percentile must be in (0, 100), got {percentile}"
        )));
    }
    if hyps.len() != refs.len() {
        return Err(MetricsError::Invalid(format!(
            "screen: {} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let scores: Vec<f64> = hyps
        .iter()
        .map(|h| rep_w_sentence(&tokenize(h), rep_w_window))
        .collect();
    let mut order: Vec<usize> = (0..hyps.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let keep = ((percentile / 100.0) * hyps.len() as f64).ceil() as usize;
    let keep = keep.max(1).min(hyps.len());
    let subset: Vec<usize> = order[..keep].to_vec();
    if subset.is_empty() {
        return Err(MetricsError::EmptySubset);
    }
    let sub_hyps: Vec<String> = subset.iter().map(|&i| hyps[i].clone()).collect();
    let sub_refs: Vec<String> = subset.iter().map(|&i| refs[i].clone()).collect();
    evaluate_corpus(&sub_hyps, &sub_refs, rep_w_window)
}

// The shorthand `screen(percentile=100)` is not representable (percentile is
// exclusive of 100); callers wanting the whole corpus use `evaluate_corpus`.

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    // Brute-force oracles: direct realization of the definitions with nested
    // loops, kept independent of the implementations above.

    fn rep_n_oracle(tokens: &[String], n: usize) -> f64 {
        if tokens.len() < n {
            return 0.0;
        }
        let grams: Vec<&[String]> = tokens.windows(n).collect();
        let mut distinct: Vec<&[String]> = Vec::new();
        for g in &grams {
            if !distinct.iter().any(|d| d == g) {
                distinct.push(g);
            }
        }
        1.0 - distinct.len() as f64 / grams.len() as f64
    }

    fn rep_w_oracle(tokens: &[String], w: usize) -> f64 {
        if tokens.is_empty() {
            return 0.0;
        }
        let mut hits = 0;
        for t in 0..tokens.len() {
            let mut found = false;
            for back in 1..=w {
                if back > t {
                    break;
                }
                if tokens[t - back] == tokens[t] {
                    found = true;
                }
            }
            if found {
                hits += 1;
            }
        }
        hits as f64 / tokens.len() as f64
    }

    fn rep_r_oracle(tokens: &[String]) -> f64 {
        let len = tokens.len();
        if len == 0 {
            return 0.0;
        }
        let mut count = 0;
        for i in 0..len {
            let mut hit = false;
            for j in 0..len {
                if j != i
                    && i + 1 < len
                    && j + 1 < len
                    && tokens[i] == tokens[j]
                    && tokens[i + 1] == tokens[j + 1]
                {
                    hit = true;
                }
            }
            for k in 0..len {
                if k != i && i >= 1 && k >= 1 && tokens[i] == tokens[k] && tokens[i - 1] == tokens[k - 1]
                {
                    hit = true;
                }
            }
            if hit {
                count += 1;
            }
        }
        count as f64 / len as f64
    }

    #[test]
    fn rep_n_worked_examples() {
        assert_eq!(rep_n(&toks("a b c d"), 2), 0.0);
        let v = rep_n(&toks("a b a b a b"), 2);
        assert!((v - 0.6).abs() < 1e-15, "expected 0.6, got {v}");
        assert_eq!(rep_n(&toks("a a a"), 3), 0.0);
    }

    #[test]
    fn rep_w_worked_examples() {
        assert!((rep_w_sentence(&toks("a b c a"), 4) - 0.25).abs() < 1e-15);
        assert_eq!(rep_w_sentence(&toks("q w e r t y"), 4), 0.0);
        assert!((rep_w_sentence(&toks("a a"), 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rep_r_worked_examples() {
        assert_eq!(rep_r(&toks("a b a b")), 1.0);
        assert_eq!(rep_r(&toks("a b c d")), 0.0);
        assert!((rep_r(&toks("a b c a b")) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn repetition_metrics_match_oracles_on_random_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let len = 1 + (rng.next_u64() % 30) as usize;
            let tokens: Vec<String> = (0..len)
                .map(|_| format!("t{}", rng.next_u64() % 5))
                .collect();
            for n in 2..=4 {
                assert_eq!(rep_n(&tokens, n), rep_n_oracle(&tokens, n), "rep_{n} on {tokens:?}");
            }
            for w in [2usize, 4, 16] {
                assert_eq!(
                    rep_w_sentence(&tokens, w),
                    rep_w_oracle(&tokens, w),
                    "rep_w(w={w}) on {tokens:?}"
                );
            }
            assert_eq!(rep_r(&tokens), rep_r_oracle(&tokens), "rep_r on {tokens:?}");
        }
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(diversity(&[0.0, 0.0, 0.0]), 1.0);
        assert_eq!(diversity(&[0.5, 0.0, 0.0]), 0.5);
        // Near-zero repetition rounds to 1.00 at report precision.
        let d = diversity(&[0.0043, 0.001, 0.0]);
        assert!((d - 1.0).abs() < 0.01);
    }

    #[test]
    fn uniq_unigrams_examples() {
        let corpus = vec![toks("a b"), toks("b c")];
        assert_eq!(uniq_unigrams(&corpus), 3);
        assert_eq!(uniq_unigrams::<String>(&[]), 0);
        let vocab_listing = vec![toks("x y z")];
        assert_eq!(uniq_unigrams(&vocab_listing), 3);
    }

    #[test]
    fn bleu_identity_is_100() {
        let c = vec![toks("the cat sat on the mat"), toks("hello world")];
        assert!((bleu(&c, &c).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_no_unigram_overlap_is_zero() {
        let c = vec![toks("x y z")];
        let r = vec![toks("a b c")];
        assert_eq!(bleu(&c, &r).unwrap(), 0.0);
    }

    /// Hand-computed clipped-precision oracle for the frozen regression case.
    ///
    /// cand "the the the cat", ref "the cat sat":
    ///   p1 = 2/4 (clipped: the->1, cat->1)
    ///   p2 = (1+1)/(3+1)  ("the cat" matches; add-1)
    ///   p3 = (0+1)/(2+1)
    ///   p4 = (0+1)/(1+1)
    ///   BP = 1 (candidate longer than reference)
    #[test]
    fn bleu_frozen_hand_computed_case() {
        let expected = 100.0
            * ((0.5f64.ln() + 0.5f64.ln() + (1.0f64 / 3.0).ln() + 0.5f64.ln()) / 4.0).exp();
        let got = bleu(&[toks("the the the cat")], &[toks("the cat sat")]).unwrap();
        assert!(
            (got - expected).abs() < 1e-9,
            "expected {expected}, got {got}"
        );
    }

    #[test]
    fn bleu_brevity_penalty_applies() {
        let c = vec![toks("the cat")];
        let r = vec![toks("the cat sat on the mat")];
        let b = bleu(&c, &r).unwrap();
        assert!(b < 100.0 * (1.0f64 - 3.0).exp() * 1.05, "bp not applied: {b}");
    }

    #[test]
    fn rouge_examples() {
        let same = toks("a b c");
        assert!((rouge_l(&same, &same).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l(&toks("x y"), &toks("a b")).unwrap(), 0.0);
        // LCS("a b c d", "a c d") = 3 -> P=0.75, R=1.0, F1 = 6/7
        let f1 = rouge_l(&toks("a b c d"), &toks("a c d")).unwrap();
        assert!((f1 - 6.0 / 7.0).abs() < 1e-12, "got {f1}");
    }

    #[test]
    fn screen_selects_most_repetitive_sentence() {
        let mut hyps = vec!["clean one two three".to_string(); 99];
        hyps.push("loop loop loop loop".to_string());
        let refs = hyps.clone();
        let report = top_percentile_screen(&hyps, &refs, 16, 1.0).unwrap();
        assert_eq!(report.n_sentences, 1);
        assert!(report.rep_w > 0.5, "screen picked the wrong sentence");
    }

    #[test]
    fn screen_rejects_bad_percentile() {
        let hyps = vec!["a b".to_string()];
        assert!(top_percentile_screen(&hyps, &hyps, 16, 0.0).is_err());
        assert!(top_percentile_screen(&hyps, &hyps, 16, 100.0).is_err());
    }

    #[test]
    fn evaluate_report_div_consistency() {
        let hyps = vec![
            "kappe basisball kappe basisball hut".to_string(),
            "tisch becken billard".to_string(),
        ];
        let refs = vec![
            "kappe basisball hut bestickt".to_string(),
            "tisch becken billard".to_string(),
        ];
        let report = evaluate_corpus(&hyps, &refs, 16).unwrap();
        let recomputed = (1.0 - report.rep2 / 100.0)
            * (1.0 - report.rep3 / 100.0)
            * (1.0 - report.rep4 / 100.0);
        assert!((report.div - recomputed).abs() < 1e-9);
        assert!(report.bleu > 0.0 && report.bleu < 100.0);
    }

    proptest! {
        #[test]
        fn metrics_stay_in_bounds(raw in proptest::collection::vec(0u8..5, 0..40)) {
            let tokens: Vec<String> = raw.iter().map(|t| format!("t{t}")).collect();
            for n in 1..=4 {
                let v = rep_n(&tokens, n);
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let w = rep_w_sentence(&tokens, 16);
            prop_assert!((0.0..=1.0).contains(&w));
            let r = rep_r(&tokens);
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn self_concatenation_increases_repetition(raw in proptest::collection::vec(0u8..5, 2..15)) {
            let tokens: Vec<String> = raw.iter().map(|t| format!("t{t}")).collect();
            let doubled: Vec<String> = tokens.iter().chain(tokens.iter()).cloned().collect();
            prop_assert!(rep_n(&doubled, 2) > rep_n(&tokens, 2) - 1e-15);
            // Doubling always introduces at least the seam/recurring bigrams.
            prop_assert!(rep_n(&doubled, 2) > 0.0);
            prop_assert!(rep_w_sentence(&doubled, 2 * tokens.len()) > rep_w_sentence(&tokens, 2 * tokens.len()));
        }

        #[test]
        fn uniq_is_order_invariant_and_rep_w_is_not_trivially(raw in proptest::collection::vec(0u8..4, 4..20)) {
            let tokens: Vec<String> = raw.iter().map(|t| format!("t{t}")).collect();
            let mut reversed = tokens.clone();
            reversed.reverse();
            prop_assert_eq!(
                uniq_unigrams(&[tokens.clone()]),
                uniq_unigrams(&[reversed])
            );
        }
    }

    #[test]
    fn rep_w_is_order_sensitive() {
        // Same multiset, different order, different rep_w under a small window.
        let a = toks("x x y y z z");
        let b = toks("x y z x y z");
        assert_ne!(rep_w_sentence(&a, 1), rep_w_sentence(&b, 1));
    }
}
