//! Seeded desk-scale corpora with controllable embedding geometry.
//!
//! Tokens are grouped into lemma clusters (one base word plus inflections).
//! Each cluster belongs to a topic, whose center is orthogonal to the class
//! axes, and sits at some position along a class axis. Clusters far out on
//! a class axis carry that class's signal; the rest are neutral filler.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, EmbeddingTable, LabeledSentence, LemmaTable, Vocabulary, UNK_SURFACE};
use crate::error::{Error, Result};
use crate::rng;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const SUFFIXES: &[&str] = &["", "s", "ed", "ing", "er", "ly", "ness", "ish"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Includes the UNK token.
    pub vocab_size: usize,
    pub dim: usize,
    pub n_lemma_clusters: usize,
    pub n_topics: usize,
    /// Spread of lemma-mates around their cluster center.
    pub cluster_radius: f64,
    /// Norm of each topic center.
    pub topic_separation: f64,
    /// Spread of cluster centers around their topic center.
    pub center_noise: f64,
    pub n_classes: usize,
    /// Fraction of clusters that carry a class signal.
    pub signal_fraction: f64,
    /// Class-axis offset range of signal clusters, `[signal_min, 1] * axis_scale`.
    pub signal_min: f64,
    /// Class-axis offset range of neutral clusters, `[-neutral_max, neutral_max] * axis_scale`.
    pub neutral_max: f64,
    pub axis_scale: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub max_signal_tokens: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab_size: 300,
            dim: 16,
            n_lemma_clusters: 60,
            n_topics: 4,
            cluster_radius: 0.1,
            topic_separation: 3.0,
            center_noise: 0.3,
            n_classes: 2,
            signal_fraction: 0.5,
            signal_min: 0.5,
            neutral_max: 0.15,
            axis_scale: 3.0,
            min_len: 4,
            max_len: 8,
            max_signal_tokens: 2,
            n_train: 400,
            n_test: 100,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Number of embedding dimensions reserved for class axes.
    pub fn class_axes(&self) -> usize {
        if self.n_classes == 2 {
            1
        } else {
            self.n_classes
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.class_axes() >= self.dim {
            return bad(format!("dim {} leaves no room beyond {} class axes", self.dim, self.class_axes()));
        }
        if self.n_lemma_clusters == 0 || self.n_topics == 0 {
            return bad("need at least one lemma cluster and one topic".into());
        }
        if self.vocab_size < self.n_lemma_clusters + 1 {
            return bad(format!(
                "vocab_size {} cannot hold UNK plus {} clusters",
                self.vocab_size, self.n_lemma_clusters
            ));
        }
        if !(self.cluster_radius > 0.0) {
            return bad("cluster_radius must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.signal_fraction) || !(0.0..1.0).contains(&self.signal_min) {
            return bad("signal_fraction and signal_min must lie in [0, 1]".into());
        }
        if self.neutral_max < 0.0 || self.neutral_max >= self.signal_min {
            return bad("neutral_max must lie in [0, signal_min)".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if self.max_signal_tokens == 0 || self.max_signal_tokens > self.min_len {
            return bad("max_signal_tokens must lie in 1..=min_len".into());
        }
        if self.n_train + self.n_test == 0 {
            return bad("no sentences requested".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
    pub lemmas: LemmaTable,
    pub train: Vec<LabeledSentence>,
    pub test: Vec<LabeledSentence>,
    /// Lemma cluster of each token; `None` for UNK.
    pub cluster_of: Vec<Option<usize>>,
    /// Class signalled by each token, if any.
    pub signal_class: Vec<Option<usize>>,
    /// Tokens that appear in no sentence.
    pub distractors: Vec<usize>,
}

fn base_words(n: usize, r: &mut rng::Rng) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = r.random_range(2..4);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[r.random_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[r.random_range(0..VOWELS.len())] as char);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn gaussian(r: &mut rng::Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            z * scale
        })
        .collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut r = rng::seeded(spec.seed);
    let (d, c, t) = (spec.dim, spec.n_lemma_clusters, spec.n_topics);
    let axes = spec.class_axes();

    // Topic centers live off the class axes.
    let topics: Vec<Vec<f64>> = (0..t)
        .map(|_| {
            let mut v = gaussian(&mut r, d, 1.0);
            v[..axes].fill(0.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n * spec.topic_separation).collect()
        })
        .collect();

    let n_signal = (spec.signal_fraction * c as f64).round() as usize;
    let mut is_signal: Vec<bool> = (0..c).map(|i| i < n_signal).collect();
    is_signal.shuffle(&mut r);
    let mut cluster_class = vec![None; c];
    let mut signal_seen = vec![0; spec.n_classes];
    let centers: Vec<Vec<f64>> = (0..c)
        .map(|i| {
            let mut v: Vec<f64> = topics[i % t]
                .iter()
                .zip(gaussian(&mut r, d, spec.center_noise / (d as f64).sqrt()))
                .map(|(a, b)| a + b)
                .collect();
            v[..axes].fill(0.0);
            if is_signal[i] {
                let class = signal_seen.iter().enumerate().min_by_key(|x| (*x.1, x.0)).unwrap().0;
                signal_seen[class] += 1;
                cluster_class[i] = Some(class);
                let s = r.random_range(spec.signal_min..=1.0) * spec.axis_scale;
                if spec.n_classes == 2 {
                    v[0] = if class == 1 { s } else { -s };
                } else {
                    v[class] = s;
                }
            } else {
                let s = r.random_range(-spec.neutral_max..=spec.neutral_max) * spec.axis_scale;
                if spec.n_classes == 2 {
                    v[0] = s;
                } else {
                    v[r.random_range(0..axes)] = s;
                }
            }
            v
        })
        .collect();
    if signal_seen.contains(&0) {
        return Err(Error::Config(format!(
            "{n_signal} signal clusters cannot cover {} classes",
            spec.n_classes
        )));
    }
    if n_signal == c {
        return Err(Error::Config("every cluster carries a signal; no filler tokens left".into()));
    }

    let bases = base_words(c, &mut r);
    let mut surfaces = vec![UNK_SURFACE.to_string()];
    let mut data: Vec<f32> = gaussian(&mut r, d, 1.0).into_iter().map(|x| x as f32).collect();
    let mut cluster_of = vec![None];
    let mut lemma_pairs = Vec::new();
    for i in 1..spec.vocab_size {
        let cl = (i - 1) % c;
        let member = (i - 1) / c;
        let surface = match SUFFIXES.get(member) {
            Some(s) => format!("{}{s}", bases[cl]),
            None => format!("{}{member}", bases[cl]),
        };
        if member > 0 {
            lemma_pairs.push((surface.clone(), bases[cl].clone()));
        }
        surfaces.push(surface);
        cluster_of.push(Some(cl));
        let noise = gaussian(&mut r, d, spec.cluster_radius / (d as f64).sqrt());
        data.extend(centers[cl].iter().zip(noise).map(|(a, b)| (a + b) as f32));
    }
    let vocab = Vocabulary::new(surfaces)?;
    let table = EmbeddingTable::new(data, spec.vocab_size, d)?;
    let lemmas = LemmaTable::from_pairs(lemma_pairs);
    let signal_class: Vec<Option<usize>> = cluster_of.iter().map(|cl| cl.and_then(|x| cluster_class[x])).collect();

    let mut signal_tokens = vec![Vec::new(); spec.n_classes];
    let mut filler = Vec::new();
    for tok in 1..spec.vocab_size {
        match signal_class[tok] {
            Some(k) => signal_tokens[k].push(tok),
            None => filler.push(tok),
        }
    }

    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut sentence = |label: usize, r: &mut rng::Rng| -> Result<LabeledSentence> {
        for _ in 0..1000 {
            let len = r.random_range(spec.min_len..=spec.max_len);
            let n_sig = r.random_range(1..=spec.max_signal_tokens.min(len));
            let mut toks = Vec::with_capacity(len);
            for i in 0..len {
                let pool = if i < n_sig { &signal_tokens[label] } else { &filler };
                toks.push(*pool.choose(r).unwrap());
            }
            toks.shuffle(r);
            if seen.insert(toks.clone()) {
                let raw = detokenize(&toks, &vocab)?;
                return Ok(LabeledSentence { tokens: toks, label, raw });
            }
        }
        Err(Error::Config("could not draw enough distinct sentences".into()))
    };
    let mut split = |n: usize, r: &mut rng::Rng| -> Result<Vec<LabeledSentence>> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
        labels.shuffle(r);
        labels.into_iter().map(|l| sentence(l, r)).collect()
    };
    let train = split(spec.n_train, &mut r)?;
    let test = split(spec.n_test, &mut r)?;

    let mut used = vec![false; spec.vocab_size];
    for s in train.iter().chain(&test) {
        for &tk in &s.tokens {
            used[tk] = true;
        }
    }
    let distractors = (0..spec.vocab_size).filter(|&i| !used[i]).collect();
    Ok(SynthCorpus {
        vocab,
        table,
        lemmas,
        train,
        test,
        cluster_of,
        signal_class,
        distractors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::lemma_of;
    use crate::geometry::common_lemma_similar;

    fn small() -> SynthSpec {
        SynthSpec {
            vocab_size: 81,
            n_lemma_clusters: 16,
            n_train: 60,
            n_test: 20,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SynthSpec { seed: 4, ..small() };
        assert_ne!(generate(&small()).unwrap().train, generate(&other).unwrap().train);
    }

    #[test]
    fn lemma_mates_share_a_lemma() {
        let c = generate(&small()).unwrap();
        for a in 1..c.vocab.len() {
            for b in 1..c.vocab.len() {
                let same = c.cluster_of[a] == c.cluster_of[b];
                assert_eq!(common_lemma_similar(a, b, &c.vocab, &c.lemmas).unwrap(), same);
            }
        }
        assert_eq!(lemma_of(1, &c.vocab, &c.lemmas).unwrap(), c.vocab.surface(1).unwrap());
    }

    #[test]
    fn balanced_and_disjoint() {
        let c = generate(&small()).unwrap();
        for set in [&c.train, &c.test] {
            let ones = set.iter().filter(|s| s.label == 1).count();
            assert!((2 * ones as i64 - set.len() as i64).abs() <= 1);
        }
        let train: HashSet<_> = c.train.iter().map(|s| s.tokens.clone()).collect();
        assert!(c.test.iter().all(|s| !train.contains(&s.tokens)));
        for s in c.train.iter().chain(&c.test) {
            assert!(s.tokens.iter().any(|&t| c.signal_class[t] == Some(s.label)));
            assert!(s.tokens.iter().all(|&t| c.signal_class[t].is_none_or(|k| k == s.label)));
            assert!(!s.tokens.contains(&c.vocab.unk_id()));
        }
        assert!(c.distractors.contains(&c.vocab.unk_id()));
    }

    #[test]
    fn multiclass_and_infeasible_specs() {
        let c = generate(&SynthSpec { n_classes: 4, ..small() }).unwrap();
        assert!(c.train.iter().all(|s| s.label < 4));
        assert!(generate(&SynthSpec { signal_fraction: 0.0, ..small() }).is_err());
        assert!(generate(&SynthSpec { signal_fraction: 1.0, ..small() }).is_err());
        assert!(generate(&SynthSpec { cluster_radius: 0.0, ..small() }).is_err());
        assert!(generate(&SynthSpec { vocab_size: 10, ..small() }).is_err());
    }

    /// Logistic regression on mean token embeddings as a separability oracle.
    #[test]
    fn mean_embedding_probe_separates_classes() {
        let c = generate(&SynthSpec::default()).unwrap();
        let d = c.table.dim();
        let feats: Vec<Vec<f64>> = c
            .train
            .iter()
            .map(|s| {
                let mut m = vec![0.0; d];
                for &t in &s.tokens {
                    for (a, b) in m.iter_mut().zip(c.table.row(t)) {
                        *a += *b as f64 / s.len() as f64;
                    }
                }
                m
            })
            .collect();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..3000 {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (x, s) in feats.iter().zip(&c.train) {
                let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
                let p = 1.0 / (1.0 + (-z).exp());
                let e = p - s.label as f64;
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += e * xi;
                }
                gb += e;
            }
            let n = feats.len() as f64;
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= 5.0 * g / n;
            }
            b -= 5.0 * gb / n;
        }
        let correct = feats
            .iter()
            .zip(&c.train)
            .filter(|(x, s)| {
                let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
                (z > 0.0) == (s.label == 1)
            })
            .count();
        let acc = correct as f64 / feats.len() as f64;
        assert!(acc >= 0.95, "probe accuracy {acc}");
    }
}
