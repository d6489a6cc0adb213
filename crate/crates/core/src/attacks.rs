//! Token-recovery attacks against shared gradients and against the shadow map.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingTable;
use crate::error::{Error, Result};
use crate::fedsim::RoundLog;
use crate::geometry::{cosine_distance, cosine_similarity};
use crate::model::{argmax, GradientSnapshot, Model, ModelConfig};
use crate::rng;
use crate::shadow_search::{reverse_map, ReverseMap, ShadowMap};

pub const LEAK_THRESHOLD: f64 = 1e-12;
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attacker: String,
    pub target: usize,
    pub recovered: Vec<usize>,
    pub iterations: usize,
    pub residual: f64,
    pub diverged: bool,
}

fn snapshot(log: &RoundLog) -> Result<&GradientSnapshot> {
    log.snapshot
        .as_ref()
        .ok_or_else(|| Error::MissingSegment("round carries no gradient".into()))
}

/// Token ids whose embedding-gradient rows are nonzero, ascending.
pub fn embedding_leakage_attack(log: &RoundLog, cfg: &ModelConfig) -> Result<AttackResult> {
    let g = snapshot(log)?;
    let emb = g
        .segment("embedding")
        .ok_or_else(|| Error::MissingSegment("embedding".into()))?;
    let d = cfg.d_model;
    if emb.len() != cfg.vocab_size * d {
        return Err(Error::Shape(format!(
            "embedding gradient of {} values for a {}x{d} table",
            emb.len(),
            cfg.vocab_size
        )));
    }
    let recovered = (0..cfg.vocab_size)
        .filter(|&t| {
            let row = &emb[t * d..(t + 1) * d];
            row.iter().map(|v| v * v).sum::<f64>().sqrt() > LEAK_THRESHOLD
        })
        .collect();
    Ok(AttackResult {
        attacker: "leakage".into(),
        target: log.round,
        recovered,
        iterations: 0,
        residual: 0.0,
        diverged: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum DummyInit {
    /// Gaussian rows scaled like the model's embedding table.
    Random(u64),
    Rows(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    pub seq_len: usize,
    pub iters: usize,
    pub lr: f64,
    pub init: DummyInit,
    /// Random restarts; the lowest-residual run wins. Ignored for fixed rows.
    pub restarts: usize,
}

impl MatchConfig {
    pub fn new(seq_len: usize, seed: u64) -> Self {
        Self {
            seq_len,
            iters: 300,
            lr: 0.05,
            init: DummyInit::Random(seed),
            restarts: 4,
        }
    }
}

/// Squared distance between two gradients, skipping the embedding segment
/// (a dummy input made of rows touches no embedding entry). Each segment is
/// scaled by its observed squared norm so small lower-layer gradients weigh
/// as much as the head.
fn match_objective(dummy: &GradientSnapshot, observed: &GradientSnapshot) -> f64 {
    let mut total = 0.0;
    for seg in dummy.segments.iter().filter(|s| s.name != "embedding") {
        let r = seg.range();
        let obs = &observed.values[r.clone()];
        let scale = obs.iter().map(|v| v * v).sum::<f64>();
        if scale <= 0.0 {
            continue;
        }
        let diff = dummy.values[r].iter().zip(obs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        total += diff / scale;
    }
    total
}

/// The label a batch-1 gradient implies: the only class whose head-bias
/// gradient is negative under cross-entropy.
pub fn infer_label(g: &GradientSnapshot, n_classes: usize) -> Result<usize> {
    let head = g.segment("head").ok_or_else(|| Error::MissingSegment("head".into()))?;
    if head.len() < n_classes {
        return Err(Error::Shape("head segment shorter than the class count".into()));
    }
    let bias = &head[head.len() - n_classes..];
    let neg: Vec<f64> = bias.iter().map(|v| -v).collect();
    Ok(argmax(&neg))
}

/// Nearest vocabulary row by cosine distance for each `d`-sized chunk.
pub fn project_rows(model: &Model, rows: &[f64]) -> Result<Vec<usize>> {
    let cfg = model.config();
    let d = cfg.d_model;
    rows.chunks(d)
        .map(|r| {
            let mut best = (f64::INFINITY, 0);
            for t in 0..cfg.vocab_size {
                let dist = cosine_distance(r, model.embedding_row(t)).unwrap_or(f64::INFINITY);
                if dist < best.0 {
                    best = (dist, t);
                }
            }
            Ok(best.1)
        })
        .collect()
}

/// Optimizes dummy input rows so their gradient matches the observed one,
/// using central finite differences for the descent direction and Adam
/// updates, then projects each row to its nearest vocabulary token.
pub fn gradient_matching_attack(log: &RoundLog, model: &Model, mc: &MatchConfig) -> Result<AttackResult> {
    let runs = match mc.init {
        DummyInit::Random(seed) => (0..mc.restarts.max(1) as u64)
            .map(|k| DummyInit::Random(rng::derive(seed, k)))
            .collect(),
        DummyInit::Rows(_) => vec![mc.init.clone()],
    };
    let mut best: Option<AttackResult> = None;
    for init in runs {
        let r = match_once(log, model, mc, &init)?;
        if best.as_ref().is_none_or(|b| r.residual < b.residual) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one run"))
}

fn match_once(log: &RoundLog, model: &Model, mc: &MatchConfig, init: &DummyInit) -> Result<AttackResult> {
    let observed = snapshot(log)?;
    if observed.len() != model.n_params() {
        return Err(Error::Shape(format!(
            "gradient of {} for a model of {}",
            observed.len(),
            model.n_params()
        )));
    }
    let d = model.config().d_model;
    let label = infer_label(observed, model.config().n_classes)?;
    let mut x = match init {
        DummyInit::Rows(r) => {
            if r.len() != mc.seq_len * d {
                return Err(Error::Shape(format!("{} initial values for {}x{d}", r.len(), mc.seq_len)));
            }
            r.clone()
        }
        DummyInit::Random(seed) => {
            let p = &model.params()[..model.config().vocab_size * d];
            let std = (p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64).sqrt().max(1e-3);
            let n = Normal::new(0.0, std).expect("positive std");
            let mut r = rng::seeded(*seed);
            (0..mc.seq_len * d).map(|_| n.sample(&mut r)).collect()
        }
    };
    let objective = |x: &[f64]| -> Result<f64> {
        let (_, g, _) = model.loss_and_gradients_from_rows(x, label)?;
        Ok(match_objective(&g, observed))
    };

    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let mut best = (objective(&x)?, x.clone());
    let mut diverged = false;
    let mut it = 0;
    while it < mc.iters && best.0 > 0.0 {
        it += 1;
        let mut grad = vec![0.0; x.len()];
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = objective(&x)?;
            x[i] = orig - FD_STEP;
            let down = objective(&x)?;
            x[i] = orig;
            grad[i] = (up - down) / (2.0 * FD_STEP);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            diverged = true;
            break;
        }
        let t = it as i32;
        for i in 0..x.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            x[i] -= mc.lr * mh / (vh.sqrt() + eps);
        }
        let f = objective(&x)?;
        if !f.is_finite() {
            diverged = true;
            break;
        }
        if f < best.0 {
            best = (f, x.clone());
        }
    }
    if diverged {
        log::warn!("gradient matching diverged after {it} iterations");
    }
    Ok(AttackResult {
        attacker: "gradient_matching".into(),
        target: log.round,
        recovered: project_rows(model, &best.1)?,
        iterations: it,
        residual: best.0,
        diverged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sampling,
    Max,
    Median,
    Mean,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Sampling, Strategy::Max, Strategy::Median, Strategy::Mean];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sampling => "sampling",
            Strategy::Max => "max",
            Strategy::Median => "median",
            Strategy::Mean => "mean",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "adaptive strategy",
                name: s.to_string(),
            })
    }
}

/// Candidates sorted by descending similarity, ties by ascending id.
fn ranked(t: usize, origins: &[usize], table: &EmbeddingTable) -> Result<Vec<(f64, usize)>> {
    let e = table.row_f64(t);
    let mut v = origins
        .iter()
        .map(|&a| Ok((cosine_similarity(&e, &table.row_f64(a))?, a)))
        .collect::<Result<Vec<_>>>()?;
    v.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    Ok(v)
}

/// Inverts the shadow map token by token with full knowledge of it.
pub fn adaptive_recover_with(
    obfuscated: &[usize],
    reverse: &ReverseMap,
    table: &EmbeddingTable,
    strategy: Strategy,
    seed: u64,
) -> Result<AttackResult> {
    let mut r = rng::seeded(seed);
    let mut recovered = Vec::with_capacity(obfuscated.len());
    for &t in obfuscated {
        let origins: Vec<usize> = match reverse.get(&t) {
            Some(s) if !s.is_empty() => s.iter().copied().collect(),
            _ => {
                recovered.push(t);
                continue;
            }
        };
        let ranked = ranked(t, &origins, table)?;
        let pick = match strategy {
            Strategy::Max => ranked[0].1,
            Strategy::Median => ranked[ranked.len().div_ceil(2) - 1].1,
            Strategy::Sampling => {
                let total: f64 = ranked.iter().map(|x| x.0 + 1.0).sum();
                let pick_id = |u: f64| {
                    let mut acc = 0.0;
                    for &(s, a) in &ranked {
                        acc += s + 1.0;
                        if u < acc {
                            return a;
                        }
                    }
                    ranked[ranked.len() - 1].1
                };
                if total > 0.0 {
                    pick_id(r.random::<f64>() * total)
                } else {
                    ranked[r.random_range(0..ranked.len())].1
                }
            }
            Strategy::Mean => {
                let d = table.dim();
                let mut mean = vec![0.0; d];
                for &a in &origins {
                    for (m, x) in mean.iter_mut().zip(table.row(a)) {
                        *m += *x as f64 / origins.len() as f64;
                    }
                }
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for &a in &origins {
                    // A zero mean has no direction; every origin then ties.
                    let s = cosine_similarity(&mean, &table.row_f64(a)).unwrap_or(0.0);
                    if s > best.0 || (s == best.0 && a < best.1) {
                        best = (s, a);
                    }
                }
                best.1
            }
        };
        recovered.push(pick);
    }
    Ok(AttackResult {
        attacker: format!("adaptive_{}", strategy.name()),
        target: 0,
        recovered,
        iterations: 0,
        residual: 0.0,
        diverged: false,
    })
}

pub fn adaptive_recover(
    obfuscated: &[usize],
    map: &ShadowMap,
    table: &EmbeddingTable,
    strategy: Strategy,
    seed: u64,
) -> Result<AttackResult> {
    adaptive_recover_with(obfuscated, &reverse_map(map), table, strategy, seed)
}

/// One line of an attack report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub id: usize,
    pub attacker: String,
    pub recovered_text: String,
    pub r1: f64,
    pub meteor: f64,
}
