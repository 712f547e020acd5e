use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLEU_EPSILON: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Smoothing {
    /// Zero higher-order precisions are replaced by [`BLEU_EPSILON`].
    #[default]
    Epsilon,
    Raw,
}

fn check_pairs(op: &'static str, candidates: usize, references: usize) -> Result<()> {
    if candidates != references {
        return Err(Error::shape(op, &[candidates], &[references]));
    }
    if candidates == 0 {
        return Err(Error::EmptyAxis { op });
    }
    Ok(())
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Per-order clipped matches and candidate n-gram totals, plus the
/// candidate and reference lengths.
struct Stats {
    matches: [usize; 4],
    totals: [usize; 4],
    cand_len: usize,
    ref_len: usize,
}

fn stats<T: Hash + Eq, C: AsRef<[T]>>(candidates: &[C], references: &[C]) -> Stats {
    let mut s = Stats {
        matches: [0; 4],
        totals: [0; 4],
        cand_len: 0,
        ref_len: 0,
    };
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (c.as_ref(), r.as_ref());
        s.cand_len += c.len();
        s.ref_len += r.len();
        for n in 1..=4 {
            let refs = ngram_counts(r, n);
            for (gram, count) in ngram_counts(c, n) {
                s.matches[n - 1] += count.min(refs.get(gram).copied().unwrap_or(0));
            }
            s.totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    s
}

fn score(s: &Stats, n: usize, smoothing: Smoothing) -> f64 {
    if s.cand_len == 0 || s.matches[0] == 0 {
        return 0.0;
    }
    let bp = if s.cand_len > s.ref_len {
        1.0
    } else {
        (1.0 - s.ref_len as f64 / s.cand_len as f64).exp()
    };
    let mut log_sum = 0.0;
    for k in 0..n {
        let p = if s.totals[k] == 0 {
            0.0
        } else {
            s.matches[k] as f64 / s.totals[k] as f64
        };
        let p = match smoothing {
            Smoothing::Epsilon if p == 0.0 => BLEU_EPSILON,
            Smoothing::Raw if p == 0.0 => return 0.0,
            _ => p,
        };
        log_sum += p.ln();
    }
    bp * (log_sum / n as f64).exp()
}

/// Corpus-level BLEU-n with uniform weights over orders `1..=n`.
pub fn bleu<T: Hash + Eq, C: AsRef<[T]>>(
    candidates: &[C],
    references: &[C],
    n: usize,
    smoothing: Smoothing,
) -> Result<f64> {
    check_pairs("bleu", candidates.len(), references.len())?;
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order {n} outside 1..=4")));
    }
    Ok(score(&stats(candidates, references), n, smoothing))
}

/// BLEU-1 through BLEU-4 from a single counting pass.
pub fn bleu_all<T: Hash + Eq, C: AsRef<[T]>>(
    candidates: &[C],
    references: &[C],
    smoothing: Smoothing,
) -> Result<[f64; 4]> {
    check_pairs("bleu", candidates.len(), references.len())?;
    let s = stats(candidates, references);
    Ok([1, 2, 3, 4].map(|n| score(&s, n, smoothing)))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_pair<T: Eq>(c: &[T], r: &[T]) -> f64 {
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    let lcs = lcs_len(c, r);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / c.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Mean sentence-level ROUGE-L F-measure.
pub fn rouge_l<T: Eq, C: AsRef<[T]>>(candidates: &[C], references: &[C]) -> Result<f64> {
    check_pairs("rouge_l", candidates.len(), references.len())?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_pair(c.as_ref(), r.as_ref()))
        .sum();
    Ok(total / candidates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn hand_counted_unigram_precision() {
        let b = bleu(&[toks("a b c d")], &[toks("a b c e")], 1, Smoothing::Epsilon).unwrap();
        assert!((b - 0.75).abs() < 1e-12);
        let b2 = bleu(&[toks("a b c d")], &[toks("a b c e")], 2, Smoothing::Raw).unwrap();
        assert!((b2 - (0.75f64 * 2.0 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_and_degenerate_cases() {
        let b = bleu(&[toks("a b")], &[toks("a b c d")], 1, Smoothing::Raw).unwrap();
        assert!((b - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(bleu(&[toks("x y")], &[toks("a b")], 1, Smoothing::Epsilon).unwrap(), 0.0);
        assert_eq!(bleu(&[toks("a x")], &[toks("a b")], 2, Smoothing::Raw).unwrap(), 0.0);
        let eps = bleu(&[toks("a x")], &[toks("a b")], 2, Smoothing::Epsilon).unwrap();
        assert!((eps - (0.5 * BLEU_EPSILON).sqrt()).abs() < 1e-15);
        let empty: [Vec<&str>; 0] = [];
        assert!(bleu(&empty, &empty, 1, Smoothing::Raw).is_err());
        assert!(bleu(&[toks("a")], &[toks("a")], 5, Smoothing::Raw).is_err());
        assert!(rouge_l(&empty, &empty).is_err());
    }

    #[test]
    fn clipping_limits_repeated_words() {
        let b = bleu(&[toks("the the the the")], &[toks("the cat the mat")], 1, Smoothing::Raw).unwrap();
        assert!((b - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lcs_fixture() {
        assert_eq!(lcs_len(&toks("a b c"), &toks("a c")), 2);
        let (p, r) = (2.0 / 3.0, 1.0);
        let b2 = ROUGE_BETA * ROUGE_BETA;
        let expected = (1.0 + b2) * p * r / (r + b2 * p);
        assert!((rouge_l(&[toks("a b c")], &[toks("a c")]).unwrap() - expected).abs() < 1e-12);
        assert_eq!(rouge_l(&[toks("a b")], &[toks("c d")]).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn identical_corpora_score_one(corpus in prop::collection::vec(prop::collection::vec(0u8..6, 4..12), 1..6)) {
            for s in bleu_all(&corpus, &corpus, Smoothing::Raw).unwrap() {
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            prop_assert!((rouge_l(&corpus, &corpus).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn scores_are_bounded(
            c in prop::collection::vec(prop::collection::vec(0u8..5, 0..10), 1..5),
            r in prop::collection::vec(prop::collection::vec(0u8..5, 1..10), 5),
        ) {
            let r = &r[..c.len()];
            for s in bleu_all(&c, r, Smoothing::Epsilon).unwrap() {
                prop_assert!((0.0..=1.0).contains(&s));
            }
            let rl = rouge_l(&c, r).unwrap();
            prop_assert!((0.0..=1.0).contains(&rl));
        }
    }
}
