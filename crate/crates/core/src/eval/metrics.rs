use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::text::split_words;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    /// Any zero k-gram precision makes the score zero.
    None,
    /// Zero match counts are replaced by `1e-9`.
    AddEpsilon,
}

const EPSILON: f64 = 1e-9;

fn ngrams(tokens: &[String], k: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= k {
        for w in tokens.windows(k) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped k-gram matches and the number of hypothesis k-grams.
fn clipped(hyp: &[String], refs: &[Vec<String>], k: usize) -> (usize, usize) {
    let h = ngrams(hyp, k);
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngrams(r, k) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(k - 1))
}

/// Reference length closest to `c`, shorter on ties.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Geometric mean of the k-gram precisions. Orders longer than the
/// hypothesis have no k-grams and are left out of the mean.
fn combine(matches: &[(usize, usize)], smoothing: Smoothing) -> f64 {
    let mut log_sum = 0.0;
    let mut orders = 0;
    for &(m, total) in matches.iter().filter(|(_, t)| *t > 0) {
        orders += 1;
        let p = if m == 0 {
            match smoothing {
                Smoothing::None => return 0.0,
                Smoothing::AddEpsilon => EPSILON / total as f64,
            }
        } else {
            m as f64 / total as f64
        };
        log_sum += p.ln();
    }
    if orders == 0 {
        return 0.0;
    }
    (log_sum / orders as f64).exp()
}

/// Sentence BLEU up to `n`-grams against one or more references.
pub fn bleu_n(hyp: &str, refs: &[&str], n: usize, smoothing: Smoothing) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be in 1..=4");
    assert!(!refs.is_empty(), "BLEU needs at least one reference");
    let h = split_words(hyp);
    if h.is_empty() {
        return 0.0;
    }
    let rs: Vec<Vec<String>> = refs.iter().map(|r| split_words(r)).collect();
    let counts: Vec<_> = (1..=n).map(|k| clipped(&h, &rs, k)).collect();
    brevity_penalty(h.len(), closest_ref_len(h.len(), &rs)) * combine(&counts, smoothing)
}

/// Corpus BLEU: match counts and lengths are summed over all pairs before
/// combining.
pub fn corpus_bleu(pairs: &[(&str, &str)], n: usize, smoothing: Smoothing) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be in 1..=4");
    let mut counts = vec![(0usize, 0usize); n];
    let (mut c, mut r) = (0, 0);
    for (hyp, reference) in pairs {
        let h = split_words(hyp);
        let refs = vec![split_words(reference)];
        c += h.len();
        r += closest_ref_len(h.len(), &refs);
        for (k, acc) in counts.iter_mut().enumerate() {
            let (m, t) = clipped(&h, &refs, k + 1);
            acc.0 += m;
            acc.1 += t;
        }
    }
    if c == 0 {
        return 0.0;
    }
    brevity_penalty(c, r) * combine(&counts, smoothing)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure with recall weighted by `beta`.
pub fn rouge_l(hyp: &str, reference: &str, beta: f64) -> f64 {
    let h = split_words(hyp);
    let r = split_words(reference);
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs(&h, &r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / h.len() as f64;
    let rec = l as f64 / r.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

type Vector = HashMap<Vec<String>, f64>;

fn tfidf(tokens: &[String], k: usize, df: &HashMap<Vec<String>, usize>, log_n: f64) -> Vector {
    ngrams(tokens, k)
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g.to_vec(), c as f64 * (log_n - d.ln()))
        })
        .collect()
}

fn cosine(a: &Vector, b: &Vector) -> f64 {
    let dot: f64 = a.iter().map(|(g, v)| v * b.get(g).copied().unwrap_or(0.0)).sum();
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Corpus CIDEr over `(hypothesis, reference)` pairs. Document frequencies
/// come from the references; each n-gram order contributes ten times the
/// tf-idf cosine, averaged over orders and then over pairs. With `sigma` the
/// cosine is damped by a Gaussian of the length difference.
pub fn cider(pairs: &[(&str, &str)], n_max: usize, sigma: Option<f64>) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hyps: Vec<Vec<String>> = pairs.iter().map(|(h, _)| split_words(h)).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|(_, r)| split_words(r)).collect();
    let log_n = (pairs.len() as f64).ln();
    let mut total = 0.0;
    let mut per_pair = vec![0.0; pairs.len()];
    for k in 1..=n_max {
        let mut df: HashMap<Vec<String>, usize> = HashMap::new();
        for r in &refs {
            for g in ngrams(r, k).into_keys() {
                *df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        for (i, (h, r)) in hyps.iter().zip(&refs).enumerate() {
            let mut s = cosine(&tfidf(h, k, &df, log_n), &tfidf(r, k, &df, log_n));
            if let Some(sigma) = sigma {
                let d = h.len() as f64 - r.len() as f64;
                s *= (-(d * d) / (2.0 * sigma * sigma)).exp();
            }
            per_pair[i] += 10.0 * s / n_max as f64;
        }
    }
    for s in per_pair {
        total += s;
    }
    total / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn bleu_examples() {
        let s = "the cat sat on the mat";
        assert!((bleu_n(s, &[s], 4, Smoothing::None) - 1.0).abs() < 1e-12);
        let short = bleu_n("the cat sat", &["the cat sat on the mat"], 2, Smoothing::None);
        assert!((short - (-1f64).exp()).abs() < 1e-6);
        assert_eq!(bleu_n("red green", &["blue cyan"], 2, Smoothing::None), 0.0);
        assert_eq!(bleu_n("", &["blue cyan"], 2, Smoothing::None), 0.0);
        assert!(bleu_n("red green", &["blue cyan"], 2, Smoothing::AddEpsilon) > 0.0);
    }

    #[test]
    fn bleu_clips_repeated_words() {
        // Unigram precision 2/7 for the classic "the the the ..." case.
        let b = bleu_n(
            "the the the the the the the",
            &["the cat is on the mat"],
            1,
            Smoothing::None,
        );
        assert!((b - 2.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        assert!((rouge_l("a b c d", "a b c d", ROUGE_BETA) - 1.0).abs() < 1e-12);
        assert!((rouge_l("a b c d", "a c b d", ROUGE_BETA) - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l("x y", "a b", ROUGE_BETA), 0.0);
        assert_eq!(rouge_l("", "a b", ROUGE_BETA), 0.0);
    }

    #[test]
    fn cider_examples() {
        assert_eq!(cider(&[("the image looks real", "the image looks real")], 4, None), 0.0);
        assert_eq!(cider(&[("a b", "c d"), ("e f", "g h")], 4, None), 0.0);
        // Frozen from an independent brute-force tf-idf computation.
        let two = cider(&[("the cat sat", "the cat ran"), ("a dog ran", "a bird flew")], 4, None);
        assert!((two - CIDER_TWO_PAIR).abs() < 1e-6, "{two}");
    }

    const CIDER_TWO_PAIR: f64 = 1.875;

    #[test]
    fn metric_bounds_on_random_text() {
        let words = ["a", "b", "c", "d", "real", "fake", ".", "the"];
        let mut rng = Rng::new(12);
        let sentence = |rng: &mut Rng| {
            let n = 1 + rng.below(9);
            (0..n).map(|_| words[rng.below(words.len())]).collect::<Vec<_>>().join(" ")
        };
        for _ in 0..2000 {
            let h = sentence(&mut rng);
            let r = sentence(&mut rng);
            for n in 1..=4 {
                let b = bleu_n(&h, &[&r], n, Smoothing::AddEpsilon);
                assert!((0.0..=1.0 + 1e-12).contains(&b));
            }
            let rl = rouge_l(&h, &r, ROUGE_BETA);
            assert!((0.0..=1.0 + 1e-12).contains(&rl));
            assert!((bleu_n(&h, &[&h], 4, Smoothing::None) - 1.0).abs() < 1e-12);
            assert!((rouge_l(&h, &h, ROUGE_BETA) - 1.0).abs() < 1e-12);
        }
    }
}
