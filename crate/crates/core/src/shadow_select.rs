//! Beam-search selection of shadow tokens that keep hidden states close.

use std::cmp::Ordering;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, LabeledSentence, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{hidden_state_mse, HiddenStates, Model};
use crate::par;
use crate::rng;
use crate::shadow_search::ShadowMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    #[default]
    Optimized,
    Random,
    Nearest,
}

impl SelectMode {
    pub const ALL: [SelectMode; 3] = [SelectMode::Optimized, SelectMode::Random, SelectMode::Nearest];

    pub fn name(self) -> &'static str {
        match self {
            SelectMode::Optimized => "optimized",
            SelectMode::Random => "random",
            SelectMode::Nearest => "nearest",
        }
    }
}

impl std::str::FromStr for SelectMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimized" => Ok(SelectMode::Optimized),
            "random" => Ok(SelectMode::Random),
            "nearest" => Ok(SelectMode::Nearest),
            _ => Err(Error::Unknown {
                kind: "selection mode",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectConfig {
    pub beam_width: usize,
    pub tau_d: f64,
    pub max_sweeps: usize,
    pub mode: SelectMode,
    pub seed: u64,
    pub include_embedding_layer: bool,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            beam_width: 1,
            tau_d: 1e-6,
            max_sweeps: 20,
            mode: SelectMode::Optimized,
            seed: 0,
            include_embedding_layer: false,
        }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if !(self.tau_d > 0.0) || !self.tau_d.is_finite() {
            return Err(Error::Config(format!("tau_d must be positive, got {}", self.tau_d)));
        }
        if self.max_sweeps == 0 {
            return Err(Error::Config("max_sweeps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObfuscatedPair {
    pub original: LabeledSentence,
    pub obfuscated: LabeledSentence,
    pub final_mse: f64,
    pub sweeps: usize,
    /// Best MSE before the first sweep and after each sweep.
    pub sweep_mse: Vec<f64>,
    /// Positions copied through unchanged (UNK).
    pub passthrough: usize,
}

impl ObfuscatedPair {
    pub fn changed(&self) -> usize {
        self.original
            .tokens
            .iter()
            .zip(&self.obfuscated.tokens)
            .filter(|(a, b)| a != b)
            .count()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObfuscationSummary {
    pub n_sentences: usize,
    pub n_tokens: usize,
    pub mean_mse: f64,
    pub change_rate: f64,
    pub mean_sweeps: f64,
    pub passthrough: usize,
}

pub fn summarize(pairs: &[ObfuscatedPair]) -> ObfuscationSummary {
    if pairs.is_empty() {
        return ObfuscationSummary::default();
    }
    let n = pairs.len() as f64;
    let n_tokens: usize = pairs.iter().map(|p| p.original.len()).sum();
    let changed: usize = pairs.iter().map(|p| p.changed()).sum();
    ObfuscationSummary {
        n_sentences: pairs.len(),
        n_tokens,
        mean_mse: pairs.iter().map(|p| p.final_mse).sum::<f64>() / n,
        change_rate: if n_tokens == 0 { 0.0 } else { changed as f64 / n_tokens as f64 },
        mean_sweeps: pairs.iter().map(|p| p.sweeps as f64).sum::<f64>() / n,
        passthrough: pairs.iter().map(|p| p.passthrough).sum(),
    }
}

/// One line of the obfuscated dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObfuscatedRecord {
    pub text: String,
    pub obf_text: String,
    pub label: usize,
    pub mse: f64,
    pub sweeps: usize,
}

impl ObfuscatedRecord {
    pub fn from_pair(p: &ObfuscatedPair, vocab: &Vocabulary) -> Result<Self> {
        let text = if p.original.raw.is_empty() {
            detokenize(&p.original.tokens, vocab)?
        } else {
            p.original.raw.clone()
        };
        Ok(Self {
            text,
            obf_text: detokenize(&p.obfuscated.tokens, vocab)?,
            label: p.original.label,
            mse: p.final_mse,
            sweeps: p.sweeps,
        })
    }
}

/// FNV-1a over the token ids, so a sentence's random stream does not depend
/// on its position in a dataset.
fn sentence_tag(tokens: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &t in tokens {
        for b in (t as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    mse: f64,
}

fn by_score(a: &Hyp, b: &Hyp) -> Ordering {
    a.mse.total_cmp(&b.mse).then_with(|| a.tokens.cmp(&b.tokens))
}

struct Scorer<'a> {
    model: &'a Model,
    target: HiddenStates,
    include_embedding: bool,
}

impl Scorer<'_> {
    fn score(&self, tokens: &[usize]) -> Result<f64> {
        let h = self.model.hidden_states(tokens, self.include_embedding)?;
        hidden_state_mse(&h, &self.target)
    }

    fn hyp(&self, tokens: Vec<usize>) -> Result<Hyp> {
        let mse = self.score(&tokens)?;
        Ok(Hyp { tokens, mse })
    }

    /// All single-position substitutions of `hyps` at `pos`, deduplicated
    /// and sorted best first.
    fn expand(&self, hyps: &[Hyp], pos: usize, options: &[usize]) -> Result<Vec<Hyp>> {
        let mut seqs: Vec<Vec<usize>> = Vec::with_capacity(hyps.len() * options.len());
        for h in hyps {
            for &c in options {
                let mut t = h.tokens.clone();
                t[pos] = c;
                seqs.push(t);
            }
        }
        seqs.sort();
        seqs.dedup();
        let mut out = par::try_map(&seqs, |t| self.score(t).map(|mse| Hyp { tokens: t.clone(), mse }))?;
        out.sort_by(by_score);
        Ok(out)
    }
}

/// Per-position substitution options. UNK passes through.
fn position_options(sentence: &LabeledSentence, map: &ShadowMap, unk: Option<usize>) -> Result<(Vec<Vec<usize>>, usize)> {
    let mut passthrough = 0;
    let opts = sentence
        .tokens
        .iter()
        .map(|&t| {
            if Some(t) == unk {
                passthrough += 1;
                return Ok(vec![t]);
            }
            match map.candidates(t) {
                Some(c) if !c.is_empty() => Ok(c.to_vec()),
                _ => Err(Error::MissingEntry(t)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((opts, passthrough))
}

/// Obfuscates one sentence. `unk` is the vocabulary's UNK id, if any.
pub fn select(
    sentence: &LabeledSentence,
    model: &Model,
    map: &ShadowMap,
    cfg: &SelectConfig,
    unk: Option<usize>,
) -> Result<ObfuscatedPair> {
    cfg.validate()?;
    if sentence.tokens.is_empty() {
        return Err(Error::Empty("sentence"));
    }
    let (options, passthrough) = position_options(sentence, map, unk)?;
    let scorer = Scorer {
        model,
        target: model.hidden_states(&sentence.tokens, cfg.include_embedding_layer)?,
        include_embedding: cfg.include_embedding_layer,
    };
    let mut rng = rng::substream(cfg.seed, sentence_tag(&sentence.tokens));
    let nearest: Vec<usize> = options.iter().map(|o| o[0]).collect();
    let mut draw = || -> Vec<usize> { options.iter().map(|o| o[rng.random_range(0..o.len())]).collect() };

    let (best, sweeps, history) = match cfg.mode {
        SelectMode::Nearest => {
            let h = scorer.hyp(nearest)?;
            (h.clone(), 0, vec![h.mse])
        }
        SelectMode::Random => {
            let h = scorer.hyp(draw())?;
            (h.clone(), 0, vec![h.mse])
        }
        SelectMode::Optimized => {
            let mut init = vec![nearest];
            for _ in 1..cfg.beam_width {
                init.push(draw());
            }
            init.sort();
            init.dedup();
            let mut beam = par::try_map(&init, |t| scorer.hyp(t.clone()))?;
            beam.sort_by(by_score);
            beam_search(&scorer, &options, beam, cfg)?
        }
    };
    let obfuscated = LabeledSentence {
        tokens: best.tokens,
        label: sentence.label,
        raw: String::new(),
    };
    Ok(ObfuscatedPair {
        original: sentence.clone(),
        obfuscated,
        final_mse: best.mse,
        sweeps,
        sweep_mse: history,
        passthrough,
    })
}

fn beam_search(
    scorer: &Scorer,
    options: &[Vec<usize>],
    mut beam: Vec<Hyp>,
    cfg: &SelectConfig,
) -> Result<(Hyp, usize, Vec<f64>)> {
    // With a wider beam, the greedy path a width-1 search would follow is
    // carried alongside so widening the beam can never make the result worse.
    let mut anchor = if cfg.beam_width > 1 {
        let nearest: Vec<usize> = options.iter().map(|o| o[0]).collect();
        Some(scorer.hyp(nearest)?)
    } else {
        None
    };
    let overall = |beam: &[Hyp], anchor: &Option<Hyp>| -> Hyp {
        match anchor {
            Some(a) if by_score(a, &beam[0]) == Ordering::Less => a.clone(),
            _ => beam[0].clone(),
        }
    };
    let mut history = vec![overall(&beam, &anchor).mse];
    let mut prev_beam = beam[0].mse;
    let mut prev_anchor = anchor.as_ref().map(|a| a.mse);
    let mut sweeps = 0;
    while sweeps < cfg.max_sweeps {
        sweeps += 1;
        for (pos, opts) in options.iter().enumerate() {
            if opts.len() == 1 {
                continue;
            }
            let mut pool = scorer.expand(&beam, pos, opts)?;
            if let Some(a) = anchor.as_mut() {
                *a = scorer.expand(std::slice::from_ref(a), pos, opts)?.swap_remove(0);
            }
            pool.truncate(cfg.beam_width);
            beam = pool;
        }
        history.push(overall(&beam, &anchor).mse);
        let beam_gain = prev_beam - beam[0].mse;
        let anchor_gain = match (prev_anchor, &anchor) {
            (Some(p), Some(a)) => p - a.mse,
            _ => 0.0,
        };
        prev_beam = beam[0].mse;
        prev_anchor = anchor.as_ref().map(|a| a.mse);
        if beam_gain < cfg.tau_d && anchor_gain < cfg.tau_d {
            break;
        }
    }
    Ok((overall(&beam, &anchor), sweeps, history))
}

/// Obfuscates every sentence independently.
pub fn obfuscate_dataset(
    dataset: &[LabeledSentence],
    model: &Model,
    map: &ShadowMap,
    cfg: &SelectConfig,
    unk: Option<usize>,
) -> Result<(Vec<ObfuscatedPair>, ObfuscationSummary)> {
    cfg.validate()?;
    let pairs = par::try_map(dataset, |s| select(s, model, map, cfg, unk))?;
    let passthrough: usize = pairs.iter().map(|p| p.passthrough).sum();
    if passthrough > 0 {
        log::warn!("{passthrough} unknown-token positions left unchanged");
    }
    let summary = summarize(&pairs);
    Ok((pairs, summary))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::model::ModelConfig;
    use crate::shadow_search::{SearchParams, ShadowEntry};

    fn model(vocab: usize, seed: u64) -> Model {
        Model::new(
            ModelConfig {
                vocab_size: vocab,
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                d_ff: 12,
                max_len: 8,
                n_classes: 2,
                seed,
            },
            None,
        )
        .unwrap()
    }

    fn map_of(entries: &[(usize, Vec<usize>)]) -> ShadowMap {
        ShadowMap {
            params: SearchParams::default(),
            entries: entries
                .iter()
                .map(|(k, c)| {
                    (
                        *k,
                        ShadowEntry {
                            k_used: 1,
                            candidates: c.clone(),
                            fallback: false,
                        },
                    )
                })
                .collect::<BTreeMap<_, _>>(),
        }
    }

    fn sent(tokens: &[usize]) -> LabeledSentence {
        LabeledSentence {
            tokens: tokens.to_vec(),
            label: 1,
            raw: String::new(),
        }
    }

    fn exhaustive(m: &Model, s: &LabeledSentence, opts: &[Vec<usize>]) -> f64 {
        let target = m.hidden_states(&s.tokens, false).unwrap();
        let mut best = f64::INFINITY;
        let mut idx = vec![0usize; opts.len()];
        loop {
            let seq: Vec<usize> = idx.iter().zip(opts).map(|(&i, o)| o[i]).collect();
            let h = m.hidden_states(&seq, false).unwrap();
            best = best.min(hidden_state_mse(&h, &target).unwrap());
            let mut p = 0;
            loop {
                if p == idx.len() {
                    return best;
                }
                idx[p] += 1;
                if idx[p] < opts[p].len() {
                    break;
                }
                idx[p] = 0;
                p += 1;
            }
        }
    }

    #[test]
    fn singleton_candidates_fix_the_output() {
        let m = model(10, 1);
        let map = map_of(&[(1, vec![4]), (2, vec![5]), (3, vec![6])]);
        for (b, seed) in [(1, 0), (3, 9), (5, 42)] {
            let cfg = SelectConfig {
                beam_width: b,
                seed,
                ..Default::default()
            };
            let p = select(&sent(&[1, 2, 3]), &m, &map, &cfg, None).unwrap();
            assert_eq!(p.obfuscated.tokens, vec![4, 5, 6]);
            assert_eq!(p.sweeps, 1);
        }
    }

    #[test]
    fn wide_beam_finds_exhaustive_optimum() {
        let m = model(10, 3);
        let map = map_of(&[(1, vec![3, 4, 5]), (2, vec![6, 7, 8])]);
        let cfg = SelectConfig {
            beam_width: 9,
            ..Default::default()
        };
        let s = sent(&[1, 2]);
        let p = select(&s, &m, &map, &cfg, None).unwrap();
        let opt = exhaustive(&m, &s, &[vec![3, 4, 5], vec![6, 7, 8]]);
        assert_eq!(p.final_mse, opt);
    }

    #[test]
    fn huge_tau_stops_after_one_sweep() {
        let m = model(10, 1);
        let map = map_of(&[(1, vec![3, 4, 5]), (2, vec![6, 7, 8])]);
        let cfg = SelectConfig {
            tau_d: 1e9,
            beam_width: 2,
            ..Default::default()
        };
        let p = select(&sent(&[1, 2, 1]), &m, &map, &cfg, None).unwrap();
        assert_eq!(p.sweeps, 1);
    }

    #[test]
    fn modes_and_errors() {
        let m = model(10, 1);
        let map = map_of(&[(1, vec![3, 4, 5]), (2, vec![6, 7, 8])]);
        let near = SelectConfig {
            mode: SelectMode::Nearest,
            ..Default::default()
        };
        let p = select(&sent(&[1, 2]), &m, &map, &near, None).unwrap();
        assert_eq!(p.obfuscated.tokens, vec![3, 6]);
        assert_eq!(p.sweeps, 0);

        // UNK passes through; a missing non-UNK entry is an error.
        let p = select(&sent(&[1, 0, 2]), &m, &map, &near, Some(0)).unwrap();
        assert_eq!(p.obfuscated.tokens, vec![3, 0, 6]);
        assert_eq!(p.passthrough, 1);
        assert!(matches!(
            select(&sent(&[1, 9]), &m, &map, &near, Some(0)),
            Err(Error::MissingEntry(9))
        ));
        assert!(matches!(
            select(&sent(&[]), &m, &map, &near, None),
            Err(Error::Empty(_))
        ));
        let bad = SelectConfig {
            beam_width: 0,
            ..Default::default()
        };
        assert!(select(&sent(&[1]), &m, &map, &bad, None).is_err());
    }

    #[test]
    fn dataset_driver_is_order_independent() {
        let m = model(10, 2);
        let map = map_of(&[(1, vec![3, 4, 5]), (2, vec![6, 7, 8]), (3, vec![1, 2])]);
        let data = vec![sent(&[1, 2, 3]), sent(&[2, 2]), sent(&[3, 1])];
        let cfg = SelectConfig {
            beam_width: 2,
            seed: 5,
            ..Default::default()
        };
        let (a, sa) = obfuscate_dataset(&data, &m, &map, &cfg, None).unwrap();
        let rev: Vec<_> = data.iter().rev().cloned().collect();
        let (b, _) = obfuscate_dataset(&rev, &m, &map, &cfg, None).unwrap();
        let b: Vec<_> = b.into_iter().rev().collect();
        assert_eq!(a, b);
        assert_eq!(sa.n_sentences, 3);
        assert!(a.iter().all(|p| p.obfuscated.label == p.original.label));

        let (empty, stats) = obfuscate_dataset(&[], &m, &map, &cfg, None).unwrap();
        assert!(empty.is_empty());
        assert_eq!(stats, ObfuscationSummary::default());
    }

    #[test]
    fn sweep_history_never_increases() {
        let m = model(12, 4);
        let c: Vec<usize> = (4..12).collect();
        let map = map_of(&[(1, c.clone()), (2, c.clone()), (3, c)]);
        for b in [1, 3] {
            let cfg = SelectConfig {
                beam_width: b,
                tau_d: 1e-12,
                ..Default::default()
            };
            let p = select(&sent(&[1, 2, 3, 1, 2]), &m, &map, &cfg, None).unwrap();
            for w in p.sweep_mse.windows(2) {
                assert!(w[1] <= w[0]);
            }
            assert_eq!(*p.sweep_mse.last().unwrap(), p.final_mse);
        }
    }
}
