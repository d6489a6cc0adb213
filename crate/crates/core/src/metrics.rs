//! Text similarity (ROUGE, METEOR-lite) and classification metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

fn f_measure(overlap: f64, n_cand: usize, n_ref: usize) -> f64 {
    if overlap == 0.0 || n_cand == 0 || n_ref == 0 {
        return 0.0;
    }
    let p = overlap / n_cand as f64;
    let r = overlap / n_ref as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts<T: Eq + std::hash::Hash + Clone>(xs: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut m = HashMap::new();
    if xs.len() >= n {
        for w in xs.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram F-measure for `n` in {1, 2}.
pub fn rouge_n<T: Eq + std::hash::Hash + Clone>(candidate: &[T], reference: &[T], n: usize) -> Result<f64> {
    if n != 1 && n != 2 {
        return Err(Error::Config(format!("rouge n must be 1 or 2, got {n}")));
    }
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = c.iter().map(|(g, &k)| k.min(*r.get(g).unwrap_or(&0))).sum();
    let nc = candidate.len().saturating_sub(n - 1);
    let nr = reference.len().saturating_sub(n - 1);
    Ok(f_measure(overlap as f64, nc, nr))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    f_measure(lcs_len(candidate, reference) as f64, candidate.len(), reference.len())
}

/// ROUGE-1 over token sets rather than sequences.
pub fn bag_rouge_1<T: Ord + Clone + std::hash::Hash>(candidate: &[T], reference: &[T]) -> f64 {
    let mut c = candidate.to_vec();
    c.sort();
    c.dedup();
    let mut r = reference.to_vec();
    r.sort();
    r.dedup();
    rouge_n(&c, &r, 1).expect("n = 1")
}

/// METEOR with exact and lemma stages only. `lemma` maps a token to its
/// lemma key.
pub fn meteor_lite<T, L, F>(candidate: &[T], reference: &[T], lemma: F) -> f64
where
    T: Eq,
    L: Eq,
    F: Fn(&T) -> L,
{
    let mut cand_to_ref: Vec<Option<usize>> = vec![None; candidate.len()];
    let mut ref_used = vec![false; reference.len()];
    // Each stage aligns greedily left to right onto the earliest free match.
    for stage in 0..2 {
        for (i, c) in candidate.iter().enumerate() {
            if cand_to_ref[i].is_some() {
                continue;
            }
            let hit = reference.iter().enumerate().position(|(j, r)| {
                !ref_used[j] && if stage == 0 { c == r } else { lemma(c) == lemma(r) }
            });
            if let Some(j) = hit {
                cand_to_ref[i] = Some(j);
                ref_used[j] = true;
            }
        }
    }
    let matches = cand_to_ref.iter().filter(|m| m.is_some()).count();
    if matches == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for m in &cand_to_ref {
        match (prev, m) {
            (Some(p), Some(j)) if *j == p + 1 => {}
            (_, Some(_)) => chunks += 1,
            _ => {}
        }
        prev = *m;
    }
    let p = matches as f64 / candidate.len() as f64;
    let r = matches as f64 / reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / matches as f64).powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub accuracy: f64,
    pub f1: f64,
}

/// Accuracy and F1: binary F1 on class 1 when at most two classes appear,
/// macro F1 otherwise.
pub fn classification_metrics(predictions: &[usize], labels: &[usize]) -> Result<Classification> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let n_classes = predictions.iter().chain(labels).max().unwrap() + 1;
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let f1_of = |c: usize| {
        let tp = predictions.iter().zip(labels).filter(|(p, l)| **p == c && **l == c).count() as f64;
        let fp = predictions.iter().zip(labels).filter(|(p, l)| **p == c && **l != c).count() as f64;
        let fn_ = predictions.iter().zip(labels).filter(|(p, l)| **p != c && **l == c).count() as f64;
        if tp == 0.0 {
            // Perfect agreement on a class that never occurs counts as 1.
            return if fp == 0.0 && fn_ == 0.0 { 1.0 } else { 0.0 };
        }
        2.0 * tp / (2.0 * tp + fp + fn_)
    };
    let f1 = if n_classes <= 2 {
        f1_of(1)
    } else {
        (0..n_classes).map(f1_of).sum::<f64>() / n_classes as f64
    };
    Ok(Classification {
        accuracy: correct as f64 / labels.len() as f64,
        f1,
    })
}

pub fn perplexity(mean_loss: f64) -> Result<f64> {
    if !mean_loss.is_finite() {
        return Err(Error::NonFiniteValue(format!("loss {mean_loss}")));
    }
    Ok(mean_loss.exp())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub meteor: f64,
    pub n_pairs: usize,
}

/// Per-pair scores averaged over `(candidate, reference)` pairs.
pub fn similarity_report<T, L, F>(pairs: &[(Vec<T>, Vec<T>)], lemma: F) -> SimilarityReport
where
    T: Eq + std::hash::Hash + Clone,
    L: Eq,
    F: Fn(&T) -> L + Copy,
{
    if pairs.is_empty() {
        return SimilarityReport::default();
    }
    let mut r = SimilarityReport {
        n_pairs: pairs.len(),
        ..Default::default()
    };
    for (c, x) in pairs {
        r.r1 += rouge_n(c, x, 1).expect("n = 1");
        r.r2 += rouge_n(c, x, 2).expect("n = 2");
        r.rl += rouge_l(c, x);
        r.meteor += meteor_lite(c, x, lemma);
    }
    let n = pairs.len() as f64;
    r.r1 /= n;
    r.r2 /= n;
    r.rl /= n;
    r.meteor /= n;
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::normalize;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        normalize(s)
    }

    fn ident(s: &String) -> String {
        s.clone()
    }

    #[test]
    fn rouge_examples() {
        let a = w("a b c");
        assert_eq!(rouge_n(&a, &a, 1).unwrap(), 1.0);
        assert!((rouge_n(&w("a b c"), &w("a x c"), 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let orig = w("The compromise apparently ends six months of stalled negotiations.");
        let obf = w("Becauseromising bizarre concluded THREE kilometers had discouraged tensions.");
        assert_eq!(rouge_n(&obf, &orig, 1).unwrap(), 0.0);
        assert!(rouge_n(&a, &a, 3).is_err());
        assert_eq!(rouge_n(&w("a"), &w("a"), 2).unwrap(), 0.0);
    }

    #[test]
    fn rouge_l_examples() {
        let a = w("a b c d");
        assert_eq!(rouge_l(&a, &a), 1.0);
        assert!((rouge_l(&w("a b c d"), &w("a c b d")) - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l(&w("a b"), &w("c d")), 0.0);
    }

    #[test]
    fn meteor_examples() {
        let lem = |s: &String| if s == "went" { "go".to_string() } else { s.clone() };
        assert_eq!(meteor_lite(&w("a b"), &w("c d"), ident), 0.0);
        assert!((meteor_lite(&w("a"), &w("a"), ident) - 0.5).abs() < 1e-12);
        assert!((meteor_lite(&w("went home"), &w("go home"), lem) - 0.9375).abs() < 1e-12);
    }

    #[test]
    fn classification_examples() {
        let c = classification_metrics(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap();
        assert_eq!((c.accuracy, c.f1), (1.0, 1.0));
        // TP, FP, FN, TN
        let c = classification_metrics(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!((c.accuracy, c.f1), (0.5, 0.5));
        let c = classification_metrics(&[1, 1, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert_eq!(c.accuracy, 0.5);
        assert!(classification_metrics(&[1], &[1, 0]).is_err());
        assert!(classification_metrics(&[], &[]).is_err());
        let m = classification_metrics(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(0.0).unwrap(), 1.0);
        assert!((perplexity(2f64.ln()).unwrap() - 2.0).abs() < 1e-12);
        assert!((perplexity(2.95).unwrap() - 19.1).abs() < 0.1);
        assert!(perplexity(f64::NAN).is_err());
    }

    fn brute_overlap(c: &[u8], r: &[u8], n: usize) -> usize {
        let grams = |x: &[u8]| -> Vec<Vec<u8>> {
            if x.len() < n {
                vec![]
            } else {
                x.windows(n).map(|g| g.to_vec()).collect()
            }
        };
        let mut rg = grams(r);
        let mut hit = 0;
        for g in grams(c) {
            if let Some(i) = rg.iter().position(|x| *x == g) {
                rg.remove(i);
                hit += 1;
            }
        }
        hit
    }

    proptest! {
        #[test]
        fn rouge_matches_brute_force(
            c in prop::collection::vec(0u8..6, 0..10),
            r in prop::collection::vec(0u8..6, 0..10),
            n in 1usize..3,
        ) {
            let o = brute_overlap(&c, &r, n) as f64;
            let nc = c.len().saturating_sub(n - 1) as f64;
            let nr = r.len().saturating_sub(n - 1) as f64;
            let expect = if o == 0.0 { 0.0 } else { 2.0 * o / (nc + nr) };
            let got = rouge_n(&c, &r, n).unwrap();
            prop_assert!((got - expect).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&got));
        }

        #[test]
        fn scores_bounded(
            c in prop::collection::vec(0u8..5, 1..8),
            r in prop::collection::vec(0u8..5, 1..8),
        ) {
            let m = meteor_lite(&c, &r, |x| *x / 2);
            prop_assert!((0.0..=1.0).contains(&m));
            let l = rouge_l(&c, &r);
            prop_assert!((0.0..=1.0).contains(&l));
            prop_assert!(rouge_n(&c, &r, 2).unwrap() <= 1.0);
        }

        #[test]
        fn self_meteor_lower_bound(c in prop::collection::vec(0u8..50, 2..8)) {
            prop_assert!(meteor_lite(&c, &c, |x| *x) >= 1.0 - METEOR_GAMMA - 1e-12);
        }
    }
}
