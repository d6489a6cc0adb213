//! Single-client FedSGD simulation with gradient-level baseline defenses.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledSentence;
use crate::error::{Error, Result};
use crate::metrics::{classification_metrics, perplexity};
use crate::model::{GradientSnapshot, Model, Segment};
use crate::par;
use crate::rng;
use crate::shadow_search::SearchParams;
use crate::shadow_select::SelectConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Defense {
    #[default]
    None,
    Noise { sigma: f64, clip: f64 },
    Prune { ratio: f64 },
    /// Data is obfuscated before training; gradients are shared unmodified.
    Ghost { select: SelectConfig, search: SearchParams },
}

impl Defense {
    pub fn default_noise() -> Self {
        Defense::Noise { sigma: 0.05, clip: 1.0 }
    }

    pub fn default_prune() -> Self {
        Defense::Prune { ratio: 0.99 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Noise { .. } => "noise",
            Defense::Prune { .. } => "prune",
            Defense::Ghost { .. } => "ghost",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Defense::Noise { sigma, clip } => {
                if !(sigma >= 0.0) || !sigma.is_finite() {
                    return Err(Error::Config(format!("noise sigma must be non-negative, got {sigma}")));
                }
                if !(clip > 0.0) || !clip.is_finite() {
                    return Err(Error::Config(format!("clip norm must be positive, got {clip}")));
                }
            }
            Defense::Prune { ratio } => {
                if !(0.0..=1.0).contains(&ratio) {
                    return Err(Error::Config(format!("prune ratio must lie in [0, 1], got {ratio}")));
                }
            }
            Defense::Ghost { select, .. } => select.validate()?,
            Defense::None => {}
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_split: f64,
    pub defense: Defense,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 0.005,
            max_epochs: 30,
            patience: 5,
            eval_split: 0.1,
            defense: Defense::None,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.eval_split > 0.0 && self.eval_split < 1.0) {
            return Err(Error::Config(format!("eval_split must lie in (0, 1), got {}", self.eval_split)));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        self.defense.validate()
    }
}

fn check_finite(g: &GradientSnapshot) -> Result<()> {
    match g.values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFiniteValue(format!("gradient coordinate {i}"))),
        None => Ok(()),
    }
}

/// Clips to norm `clip`, then adds `N(0, (sigma * clip)^2)` per coordinate.
pub fn apply_noise_defense(g: &GradientSnapshot, sigma: f64, clip: f64, seed: u64) -> Result<GradientSnapshot> {
    Defense::Noise { sigma, clip }.validate()?;
    check_finite(g)?;
    let norm = g.norm();
    let scale = if norm > clip { clip / norm } else { 1.0 };
    let mut out = g.clone();
    for v in &mut out.values {
        *v *= scale;
    }
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma * clip).expect("positive std");
        let mut r = rng::seeded(seed);
        for v in &mut out.values {
            *v += noise.sample(&mut r);
        }
    }
    Ok(out)
}

/// Zeroes exactly `floor(ratio * len)` uniformly chosen coordinates.
pub fn apply_prune_defense(g: &GradientSnapshot, ratio: f64, seed: u64) -> Result<GradientSnapshot> {
    Defense::Prune { ratio }.validate()?;
    let n = g.len();
    let k = ((ratio * n as f64).floor() as usize).min(n);
    let mut out = g.clone();
    let mut r = rng::seeded(seed);
    for i in index::sample(&mut r, n, k) {
        out.values[i] = 0.0;
    }
    Ok(out)
}

/// Applies the gradient-level part of a defense. GHOST acts on data, so its
/// gradients pass through untouched.
pub fn apply_defense(g: GradientSnapshot, defense: &Defense, seed: u64) -> Result<GradientSnapshot> {
    match *defense {
        Defense::None | Defense::Ghost { .. } => Ok(g),
        Defense::Noise { sigma, clip } => apply_noise_defense(&g, sigma, clip, seed),
        Defense::Prune { ratio } => apply_prune_defense(&g, ratio, seed),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub epoch: usize,
    pub batch_ids: Vec<usize>,
    pub loss: f64,
    /// The shared (post-defense) gradient; omitted when snapshots are not kept.
    pub snapshot: Option<GradientSnapshot>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub perplexity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FedRun {
    pub rounds: Vec<RoundLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

pub fn evaluate(model: &Model, dataset: &[LabeledSentence]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let outs = par::try_map(dataset, |s| -> Result<(f64, usize)> {
        let z = model.logits(&s.tokens)?;
        let loss = model.sentence_loss(&s.tokens, s.label)?;
        Ok((loss, crate::model::argmax(&z)))
    })?;
    let loss = outs.iter().map(|o| o.0).sum::<f64>() / dataset.len() as f64;
    let preds: Vec<usize> = outs.iter().map(|o| o.1).collect();
    let labels: Vec<usize> = dataset.iter().map(|s| s.label).collect();
    let c = classification_metrics(&preds, &labels)?;
    Ok(EvalReport {
        loss,
        accuracy: c.accuracy,
        f1: c.f1,
        perplexity: perplexity(loss)?,
    })
}

/// Seeded train/eval split of `n` indices; the eval part holds at least one
/// and at most `n - 1` items.
pub fn split_indices(n: usize, eval_split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::substream(seed, 0x5917));
    let n_eval = ((n as f64 * eval_split).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let eval = idx[..n_eval].to_vec();
    let train = idx[n_eval..].to_vec();
    (train, eval)
}

/// Runs FedSGD with early stopping on a held-out part of `train`. Returns the
/// model from the epoch with the best held-out loss.
pub fn fedsgd_run(
    model: &Model,
    train: &[LabeledSentence],
    cfg: &FedConfig,
    keep_snapshots: bool,
) -> Result<(Model, FedRun)> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Empty("training set (need at least 2 sentences)"));
    }
    let (train_idx, eval_idx) = split_indices(train.len(), cfg.eval_split, cfg.seed);
    let eval_set: Vec<LabeledSentence> = eval_idx.iter().map(|&i| train[i].clone()).collect();
    let mut current = model.clone();
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since = 0;
    let mut rounds = Vec::new();
    let mut epochs = Vec::new();
    let mut order_rng = rng::substream(cfg.seed, 0x07d3);
    let mut round = 0;
    for epoch in 0..cfg.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for ids in order.chunks(cfg.batch_size) {
            let batch: Vec<LabeledSentence> = ids.iter().map(|&i| train[i].clone()).collect();
            let (loss, g) = current.loss_and_gradients(&batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteValue(format!("loss at round {round}")));
            }
            let shared = apply_defense(g, &cfg.defense, rng::derive(cfg.seed, round as u64))?;
            current.sgd_step(&shared, cfg.lr)?;
            rounds.push(RoundLog {
                round,
                epoch,
                batch_ids: ids.to_vec(),
                loss,
                snapshot: keep_snapshots.then_some(shared),
            });
            loss_sum += loss;
            n_batches += 1;
            round += 1;
        }
        let eval_loss = evaluate(&current, &eval_set)?.loss;
        log::debug!("epoch {epoch}: eval loss {eval_loss:.4}");
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            eval_loss,
        });
        if eval_loss < best_loss {
            best_loss = eval_loss;
            best = current.clone();
            best_epoch = epoch;
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    Ok((
        best,
        FedRun {
            rounds,
            epochs,
            best_epoch,
        },
    ))
}

/// One undefended or defended batch-1 round on a single sentence, as an
/// attacker would observe it.
pub fn observe_round(model: &Model, sentence: &LabeledSentence, defense: &Defense, seed: u64) -> Result<RoundLog> {
    defense.validate()?;
    let (loss, g) = model.loss_and_gradients(std::slice::from_ref(sentence))?;
    let shared = apply_defense(g, defense, seed)?;
    Ok(RoundLog {
        round: 0,
        epoch: 0,
        batch_ids: vec![],
        loss,
        snapshot: Some(shared),
    })
}

#[derive(Serialize, Deserialize)]
struct ArchiveHeader<C> {
    config: C,
    n_params: usize,
    segments: Vec<Segment>,
}

#[derive(Serialize, Deserialize)]
struct ArchiveLine {
    round: usize,
    epoch: usize,
    batch_ids: Vec<usize>,
    loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gradient: Option<String>,
}

fn encode_f32(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

/// Writes rounds as JSONL behind a header line echoing `config`.
pub fn write_round_archive<C: Serialize>(path: &Path, config: &C, segments: &[Segment], rounds: &[RoundLog]) -> Result<()> {
    let n_params = segments.iter().map(|s| s.len).sum();
    let mut out = serde_json::to_string(&ArchiveHeader {
        config,
        n_params,
        segments: segments.to_vec(),
    })?;
    out.push('\n');
    for r in rounds {
        let line = ArchiveLine {
            round: r.round,
            epoch: r.epoch,
            batch_ids: r.batch_ids.clone(),
            loss: r.loss,
            gradient: r.snapshot.as_ref().map(|s| encode_f32(&s.values)),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_round_archive(path: &Path) -> Result<(serde_json::Value, Vec<RoundLog>)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or(Error::Empty("round archive"))?
        .map_err(|e| Error::io(path, e))?;
    let header: ArchiveHeader<serde_json::Value> = serde_json::from_str(&first)?;
    let segments = header.segments;
    let mut rounds = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: ArchiveLine = serde_json::from_str(&line)?;
        let snapshot = match l.gradient {
            None => None,
            Some(b) => {
                let bytes = B64.decode(b).map_err(|e| Error::Parse {
                    what: "round archive",
                    line: i + 2,
                    detail: e.to_string(),
                })?;
                if bytes.len() != header.n_params * 4 {
                    return Err(Error::Parse {
                        what: "round archive",
                        line: i + 2,
                        detail: format!("{} payload bytes for {} parameters", bytes.len(), header.n_params),
                    });
                }
                let values = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                Some(GradientSnapshot {
                    values,
                    segments: segments.clone(),
                })
            }
        };
        rounds.push(RoundLog {
            round: l.round,
            epoch: l.epoch,
            batch_ids: l.batch_ids,
            loss: l.loss,
            snapshot,
        });
    }
    Ok((header.config, rounds))
}
