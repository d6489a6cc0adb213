//! A small pre-norm transformer classifier with hand-written reverse mode.
//!
//! Architecture: token embedding (untied from the head) plus learned
//! positions, `n_layers` blocks of `x + Attn(LN(x))` then `x + FFN(LN(x))`
//! with a tanh-approximated GELU, a final layer norm on the first position,
//! and a linear head. Attention is bidirectional. All parameters live in one
//! flat `f64` vector; named segments describe its layout.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingTable, LabeledSentence};
use crate::error::{Error, Result};
use crate::par;
use crate::rng;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
/// Small head init keeps untrained logits close to uniform.
pub const HEAD_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// A named contiguous slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Clone, Copy, Debug)]
struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    embedding: usize,
    position: usize,
    blocks: Vec<BlockLayout>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
    total: usize,
    segments: Vec<Segment>,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let (v, d, f, l, c) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_len, cfg.n_classes);
        let mut off = 0;
        let mut segments = Vec::new();
        let mut take = |n: usize| {
            let s = off;
            off += n;
            s
        };
        let embedding = take(v * d);
        let position = take(l * d);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        let mut seg_marks = Vec::new();
        for _ in 0..cfg.n_layers {
            let b = BlockLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * f),
                b1: take(f),
                w2: take(f * d),
                b2: take(d),
            };
            seg_marks.push((b.ln1_g, b.ln2_g, b.b2 + d));
            blocks.push(b);
        }
        let lnf_g = take(d);
        let lnf_b = take(d);
        let head_w = take(d * c);
        let head_b = take(c);
        let total = off;

        segments.push(Segment {
            name: "embedding".into(),
            start: embedding,
            len: v * d,
        });
        segments.push(Segment {
            name: "position".into(),
            start: position,
            len: l * d,
        });
        for (i, (a, f_start, end)) in seg_marks.into_iter().enumerate() {
            segments.push(Segment {
                name: format!("block{i}.attn"),
                start: a,
                len: f_start - a,
            });
            segments.push(Segment {
                name: format!("block{i}.ffn"),
                start: f_start,
                len: end - f_start,
            });
        }
        segments.push(Segment {
            name: "final_norm".into(),
            start: lnf_g,
            len: 2 * d,
        });
        segments.push(Segment {
            name: "head".into(),
            start: head_w,
            len: d * c + c,
        });
        Self {
            embedding,
            position,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            total,
            segments,
        }
    }
}

/// Post-block activations, one `seq_len x d_model` tensor per entry.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub layers: Vec<Vec<f64>>,
    pub seq_len: usize,
    pub dim: usize,
}

/// Mean over layers of the per-layer elementwise mean squared difference.
pub fn hidden_state_mse(a: &HiddenStates, b: &HiddenStates) -> Result<f64> {
    if a.layers.len() != b.layers.len() || a.seq_len != b.seq_len || a.dim != b.dim {
        return Err(Error::Shape(format!(
            "hidden states {}x{}x{} vs {}x{}x{}",
            a.layers.len(),
            a.seq_len,
            a.dim,
            b.layers.len(),
            b.seq_len,
            b.dim
        )));
    }
    if a.layers.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (x, y) in a.layers.iter().zip(&b.layers) {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::Shape("layer size mismatch".into()));
        }
        let s: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        total += s / x.len() as f64;
    }
    Ok(total / a.layers.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientSnapshot {
    pub values: Vec<f64>,
    pub segments: Vec<Segment>,
}

impl GradientSnapshot {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range()])
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// dense helpers (row-major)

/// `x[s x i] @ w[i x o] + b[o]`
fn linear(x: &[f64], s: usize, i: usize, w: &[f64], b: &[f64], o: usize) -> Vec<f64> {
    let mut y = vec![0.0; s * o];
    for r in 0..s {
        let yr = &mut y[r * o..(r + 1) * o];
        yr.copy_from_slice(b);
        for (a, &xa) in x[r * i..(r + 1) * i].iter().enumerate() {
            if xa == 0.0 {
                continue;
            }
            let wr = &w[a * o..(a + 1) * o];
            for (yv, wv) in yr.iter_mut().zip(wr) {
                *yv += xa * wv;
            }
        }
    }
    y
}

/// Accumulates `dw += x^T dy`, `db += sum(dy)` and returns `dx = dy w^T`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    dy: &[f64],
    s: usize,
    i: usize,
    o: usize,
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; s * i];
    for r in 0..s {
        let dyr = &dy[r * o..(r + 1) * o];
        for (dbv, &g) in db.iter_mut().zip(dyr) {
            *dbv += g;
        }
        let xr = &x[r * i..(r + 1) * i];
        for a in 0..i {
            let wr = &w[a * o..(a + 1) * o];
            let dwr = &mut dw[a * o..(a + 1) * o];
            let xa = xr[a];
            let mut acc = 0.0;
            for c in 0..o {
                dwr[c] += xa * dyr[c];
                acc += dyr[c] * wr[c];
            }
            dx[r * i + a] = acc;
        }
    }
    dx
}

struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], s: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, NormCache) {
    let mut y = vec![0.0; s * d];
    let mut xhat = vec![0.0; s * d];
    let mut rstd = vec![0.0; s];
    for r in 0..s {
        let xr = &x[r * d..(r + 1) * d];
        let mu = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (xr[c] - mu) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = g[c] * h + b[c];
        }
    }
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    s: usize,
    d: usize,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; s * d];
    for r in 0..s {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            let dxh = dyr[c] * g[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        for c in 0..d {
            let dxh = dyr[c] * g[c];
            dx[r * d + c] = cache.rstd[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

// ---------------------------------------------------------------------------

struct BlockTrace {
    ln1: NormCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>, // heads x s x s
    o: Vec<f64>,
    ln2: NormCache,
    c: Vec<f64>,
    u: Vec<f64>,
    act: Vec<f64>,
}

struct Trace {
    s: usize,
    blocks: Vec<BlockTrace>,
    outputs: Vec<Vec<f64>>,
    lnf: NormCache,
    z: Vec<f64>,
    logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<f64>,
    layout_total: usize,
}

impl Model {
    /// Seeded initialization. When `embeddings` is given its rows become the
    /// token embedding matrix; otherwise it is drawn from `N(0, 1)`.
    pub fn new(config: ModelConfig, embeddings: Option<&EmbeddingTable>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let (d, f, c) = (config.d_model, config.d_ff, config.n_classes);
        let mut p = vec![0.0; layout.total];
        let mut rng = rng::seeded(config.seed);
        let mut fill = |p: &mut [f64], std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            for v in p.iter_mut() {
                *v = n.sample(&mut rng);
            }
        };
        let emb = layout.embedding..layout.embedding + config.vocab_size * d;
        match embeddings {
            Some(t) => {
                if t.rows() != config.vocab_size || t.dim() != d {
                    return Err(Error::Shape(format!(
                        "embedding table {}x{} for model {}x{}",
                        t.rows(),
                        t.dim(),
                        config.vocab_size,
                        d
                    )));
                }
                for (dst, &src) in p[emb].iter_mut().zip(t.as_slice()) {
                    *dst = src as f64;
                }
            }
            None => fill(&mut p[emb], 1.0),
        }
        let pos = layout.position..layout.position + config.max_len * d;
        fill(&mut p[pos], 0.02);
        let proj_std = 1.0 / (d as f64).sqrt();
        let out_std = proj_std / (2.0 * config.n_layers as f64).sqrt();
        for b in &layout.blocks {
            p[b.ln1_g..b.ln1_g + d].fill(1.0);
            p[b.ln2_g..b.ln2_g + d].fill(1.0);
            fill(&mut p[b.wq..b.wq + d * d], proj_std);
            fill(&mut p[b.wk..b.wk + d * d], proj_std);
            fill(&mut p[b.wv..b.wv + d * d], proj_std);
            fill(&mut p[b.wo..b.wo + d * d], out_std);
            fill(&mut p[b.w1..b.w1 + d * f], proj_std);
            fill(&mut p[b.w2..b.w2 + f * d], 1.0 / (f as f64).sqrt() / (2.0 * config.n_layers as f64).sqrt());
        }
        p[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        fill(&mut p[layout.head_w..layout.head_w + d * c], HEAD_STD);
        Ok(Self {
            layout_total: layout.total,
            config,
            params: p,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let total = Layout::new(&config).total;
        if params.len() != total {
            return Err(Error::Shape(format!(
                "{} parameters for a model of {total}",
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("parameter {i}")));
        }
        Ok(Self {
            config,
            params,
            layout_total: total,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.layout_total
    }

    pub fn segments(&self) -> Vec<Segment> {
        Layout::new(&self.config).segments
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    /// Zeroes the classification head so every input yields uniform logits.
    pub fn zero_head(&mut self) {
        let l = self.layout();
        let c = self.config.n_classes;
        self.params[l.head_w..l.head_b + c].fill(0.0);
    }

    pub fn embedding_row(&self, t: usize) -> &[f64] {
        let d = self.config.d_model;
        let s = self.layout().embedding + t * d;
        &self.params[s..s + d]
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: t,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Token embedding rows (without positions) for a sequence.
    pub fn token_rows(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        Ok(tokens
            .iter()
            .flat_map(|&t| self.embedding_row(t).iter().copied())
            .collect())
    }

    fn with_positions(&self, rows: &[f64], l: &Layout) -> Vec<f64> {
        let d = self.config.d_model;
        rows.iter()
            .enumerate()
            .map(|(i, v)| v + self.params[l.position + i])
            .take(rows.len().min(self.config.max_len * d))
            .collect()
    }

    fn run(&self, x0: Vec<f64>, l: &Layout) -> Trace {
        let cfg = &self.config;
        let (d, f, h) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        let dh = cfg.head_dim();
        let s = x0.len() / d;
        let p = &self.params;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = x0;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        let mut outputs = Vec::with_capacity(cfg.n_layers + 1);
        outputs.push(x.clone());
        for b in &l.blocks {
            let (a, ln1) = layer_norm(&x, s, d, &p[b.ln1_g..b.ln1_g + d], &p[b.ln1_b..b.ln1_b + d]);
            let q = linear(&a, s, d, &p[b.wq..b.wq + d * d], &p[b.bq..b.bq + d], d);
            let k = linear(&a, s, d, &p[b.wk..b.wk + d * d], &p[b.bk..b.bk + d], d);
            let v = linear(&a, s, d, &p[b.wv..b.wv + d * d], &p[b.bv..b.bv + d], d);
            let mut probs = vec![0.0; h * s * s];
            let mut o = vec![0.0; s * d];
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..s {
                    let row = &mut probs[(hd * s + i) * s..(hd * s + i + 1) * s];
                    for j in 0..s {
                        let mut acc = 0.0;
                        for c in 0..dh {
                            acc += q[i * d + off + c] * k[j * d + off + c];
                        }
                        row[j] = acc * scale;
                    }
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - m).exp();
                        z += *r;
                    }
                    for r in row.iter_mut() {
                        *r /= z;
                    }
                    for j in 0..s {
                        let pij = row[j];
                        for c in 0..dh {
                            o[i * d + off + c] += pij * v[j * d + off + c];
                        }
                    }
                }
            }
            let attn = linear(&o, s, d, &p[b.wo..b.wo + d * d], &p[b.bo..b.bo + d], d);
            let x1: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
            let (c, ln2) = layer_norm(&x1, s, d, &p[b.ln2_g..b.ln2_g + d], &p[b.ln2_b..b.ln2_b + d]);
            let u = linear(&c, s, d, &p[b.w1..b.w1 + d * f], &p[b.b1..b.b1 + f], f);
            let act: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
            let y = linear(&act, s, f, &p[b.w2..b.w2 + f * d], &p[b.b2..b.b2 + d], d);
            let x2: Vec<f64> = x1.iter().zip(&y).map(|(a, b)| a + b).collect();
            blocks.push(BlockTrace {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                o,
                ln2,
                c,
                u,
                act,
            });
            outputs.push(x2.clone());
            x = x2;
        }
        let (z, lnf) = layer_norm(&x[..d], 1, d, &p[l.lnf_g..l.lnf_g + d], &p[l.lnf_b..l.lnf_b + d]);
        let c = cfg.n_classes;
        let logits = linear(&z, 1, d, &p[l.head_w..l.head_w + d * c], &p[l.head_b..l.head_b + c], c);
        Trace {
            s,
            blocks,
            outputs,
            lnf,
            z,
            logits,
        }
    }

    /// Accumulates `scale * dLoss/dparams` into `grad` and returns the
    /// gradient with respect to the block-0 input (`seq x d`).
    fn backprop(&self, tr: &Trace, l: &Layout, label: usize, scale: f64, grad: &mut [f64]) -> Vec<f64> {
        let cfg = &self.config;
        let (d, f, h, c) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.n_classes);
        let dh = cfg.head_dim();
        let s = tr.s;
        let p = &self.params;
        let att_scale = 1.0 / (dh as f64).sqrt();

        let lsm = log_softmax(&tr.logits);
        let dlogits: Vec<f64> = lsm
            .iter()
            .enumerate()
            .map(|(i, v)| scale * (v.exp() - if i == label { 1.0 } else { 0.0 }))
            .collect();
        let (gw, gb) = grad[l.head_w..l.head_b + c].split_at_mut(d * c);
        let dz = linear_backward(&tr.z, &dlogits, 1, d, c, &p[l.head_w..l.head_w + d * c], gw, gb);
        let (gg, gbn) = grad[l.lnf_g..l.lnf_b + d].split_at_mut(d);
        let dfirst = layer_norm_backward(&dz, &tr.lnf, 1, d, &p[l.lnf_g..l.lnf_g + d], gg, gbn);
        let mut dx = vec![0.0; s * d];
        dx[..d].copy_from_slice(&dfirst);

        for (b, bt) in l.blocks.iter().zip(&tr.blocks).rev() {
            // FFN
            let (gw2, gb2) = grad[b.w2..b.b2 + d].split_at_mut(f * d);
            let dact = linear_backward(&bt.act, &dx, s, f, d, &p[b.w2..b.w2 + f * d], gw2, gb2);
            let du: Vec<f64> = dact.iter().zip(&bt.u).map(|(g, &u)| g * gelu_grad(u)).collect();
            let (gw1, gb1) = grad[b.w1..b.b1 + f].split_at_mut(d * f);
            let dc = linear_backward(&bt.c, &du, s, d, f, &p[b.w1..b.w1 + d * f], gw1, gb1);
            let (gg2, gbb2) = grad[b.ln2_g..b.ln2_b + d].split_at_mut(d);
            let dln2 = layer_norm_backward(&dc, &bt.ln2, s, d, &p[b.ln2_g..b.ln2_g + d], gg2, gbb2);
            let dx1: Vec<f64> = dx.iter().zip(&dln2).map(|(a, b)| a + b).collect();

            // attention
            let (gwo, gbo) = grad[b.wo..b.bo + d].split_at_mut(d * d);
            let d_o = linear_backward(&bt.o, &dx1, s, d, d, &p[b.wo..b.wo + d * d], gwo, gbo);
            let mut dq = vec![0.0; s * d];
            let mut dk = vec![0.0; s * d];
            let mut dv = vec![0.0; s * d];
            let mut dp = vec![0.0; s];
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..s {
                    let pr = &bt.probs[(hd * s + i) * s..(hd * s + i + 1) * s];
                    let mut dot_pd = 0.0;
                    for j in 0..s {
                        let mut acc = 0.0;
                        for cc in 0..dh {
                            acc += d_o[i * d + off + cc] * bt.v[j * d + off + cc];
                            dv[j * d + off + cc] += pr[j] * d_o[i * d + off + cc];
                        }
                        dp[j] = acc;
                        dot_pd += pr[j] * acc;
                    }
                    for j in 0..s {
                        let ds = pr[j] * (dp[j] - dot_pd) * att_scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for cc in 0..dh {
                            dq[i * d + off + cc] += ds * bt.k[j * d + off + cc];
                            dk[j * d + off + cc] += ds * bt.q[i * d + off + cc];
                        }
                    }
                }
            }
            let (gwq, gbq) = grad[b.wq..b.bq + d].split_at_mut(d * d);
            let da_q = linear_backward(&bt.a, &dq, s, d, d, &p[b.wq..b.wq + d * d], gwq, gbq);
            let (gwk, gbk) = grad[b.wk..b.bk + d].split_at_mut(d * d);
            let da_k = linear_backward(&bt.a, &dk, s, d, d, &p[b.wk..b.wk + d * d], gwk, gbk);
            let (gwv, gbv) = grad[b.wv..b.bv + d].split_at_mut(d * d);
            let da_v = linear_backward(&bt.a, &dv, s, d, d, &p[b.wv..b.wv + d * d], gwv, gbv);
            let da: Vec<f64> = (0..s * d).map(|i| da_q[i] + da_k[i] + da_v[i]).collect();
            let (gg1, gbb1) = grad[b.ln1_g..b.ln1_b + d].split_at_mut(d);
            let dln1 = layer_norm_backward(&da, &bt.ln1, s, d, &p[b.ln1_g..b.ln1_g + d], gg1, gbb1);
            dx = dx1.iter().zip(&dln1).map(|(a, b)| a + b).collect();
        }

        // positions receive the input gradient directly
        for (i, g) in dx.iter().enumerate() {
            grad[l.position + i] += g;
        }
        dx
    }

    /// Post-block hidden states and logits.
    pub fn forward_hidden_states(&self, tokens: &[usize]) -> Result<(HiddenStates, Vec<f64>)> {
        let l = self.layout();
        let x0 = self.with_positions(&self.token_rows(tokens)?, &l);
        let tr = self.run(x0, &l);
        let hs = HiddenStates {
            layers: tr.outputs[1..].to_vec(),
            seq_len: tr.s,
            dim: self.config.d_model,
        };
        Ok((hs, tr.logits))
    }

    /// Hidden states used for selection; optionally prefixed by the
    /// embedding-layer output.
    pub fn hidden_states(&self, tokens: &[usize], include_embedding: bool) -> Result<HiddenStates> {
        let l = self.layout();
        let x0 = self.with_positions(&self.token_rows(tokens)?, &l);
        let tr = self.run(x0, &l);
        let skip = if include_embedding { 0 } else { 1 };
        Ok(HiddenStates {
            layers: tr.outputs[skip..].to_vec(),
            seq_len: tr.s,
            dim: self.config.d_model,
        })
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(self.forward_hidden_states(tokens)?.1)
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<usize> {
        let z = self.logits(tokens)?;
        Ok(argmax(&z))
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.config.n_classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.config.n_classes,
            });
        }
        Ok(())
    }

    /// Cross-entropy of one sentence.
    pub fn sentence_loss(&self, tokens: &[usize], label: usize) -> Result<f64> {
        self.check_label(label)?;
        let z = self.logits(tokens)?;
        Ok(-log_softmax(&z)[label])
    }

    /// Mean cross-entropy over a batch.
    pub fn loss(&self, batch: &[LabeledSentence]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let losses = par::try_map(batch, |s| self.sentence_loss(&s.tokens, s.label))?;
        Ok(losses.iter().sum::<f64>() / batch.len() as f64)
    }

    fn sentence_grad(&self, s: &LabeledSentence, scale: f64) -> Result<(f64, Vec<f64>)> {
        self.check_label(s.label)?;
        let l = self.layout();
        let x0 = self.with_positions(&self.token_rows(&s.tokens)?, &l);
        let tr = self.run(x0, &l);
        let loss = -log_softmax(&tr.logits)[s.label];
        let mut g = vec![0.0; self.layout_total];
        let dx = self.backprop(&tr, &l, s.label, scale, &mut g);
        let d = self.config.d_model;
        for (i, &t) in s.tokens.iter().enumerate() {
            let row = l.embedding + t * d;
            for c in 0..d {
                g[row + c] += dx[i * d + c];
            }
        }
        Ok((loss, g))
    }

    /// Mean cross-entropy and its exact gradient.
    pub fn loss_and_gradients(&self, batch: &[LabeledSentence]) -> Result<(f64, GradientSnapshot)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let parts = par::try_map(batch, |s| self.sentence_grad(s, scale))?;
        let mut values = vec![0.0; self.layout_total];
        let mut loss = 0.0;
        for (li, g) in parts {
            loss += li;
            for (a, b) in values.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok((
            loss * scale,
            GradientSnapshot {
                values,
                segments: self.segments(),
            },
        ))
    }

    /// Loss and parameter gradient for a sequence given directly as token
    /// embedding rows (`seq x d`, positions added internally). The
    /// `embedding` segment of the result is all zeros since no token ids are
    /// involved. Also returns the gradient with respect to the rows.
    pub fn loss_and_gradients_from_rows(
        &self,
        rows: &[f64],
        label: usize,
    ) -> Result<(f64, GradientSnapshot, Vec<f64>)> {
        self.check_label(label)?;
        let d = self.config.d_model;
        if rows.is_empty() || rows.len() % d != 0 {
            return Err(Error::Shape(format!("{} values is not a multiple of {d}", rows.len())));
        }
        let s = rows.len() / d;
        if s > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: s,
                max: self.config.max_len,
            });
        }
        let l = self.layout();
        let tr = self.run(self.with_positions(rows, &l), &l);
        let loss = -log_softmax(&tr.logits)[label];
        let mut g = vec![0.0; self.layout_total];
        let dx = self.backprop(&tr, &l, label, 1.0, &mut g);
        Ok((
            loss,
            GradientSnapshot {
                values: g,
                segments: self.segments(),
            },
            dx,
        ))
    }

    /// `θ ← θ − lr·g`.
    pub fn sgd_step(&mut self, snapshot: &GradientSnapshot, lr: f64) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "gradient of {} for {} parameters",
                snapshot.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(&snapshot.values) {
            *p -= lr * g;
        }
        Ok(())
    }

    /// Writes a checkpoint: one JSON header line, then the parameters as
    /// little-endian `f32`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format: "ghost-checkpoint".into(),
            config: self.config.clone(),
            seed: self.config.seed,
            n_params: self.params.len(),
        };
        let mut bytes = serde_json::to_vec(&header)?;
        bytes.push(b'\n');
        for v in &self.params {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Parse {
            what: "checkpoint",
            line: 1,
            detail: "missing header line".into(),
        })?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        let payload = &bytes[nl + 1..];
        if payload.len() != header.n_params * 4 {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: nl + 1 + header.n_params * 4,
                found: bytes.len(),
            });
        }
        let params = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_params(header.config, params)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config: ModelConfig,
    seed: u64,
    n_params: usize,
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// `‖a − b‖₂` over two parameter vectors.
pub fn param_distance(a: &Model, b: &Model) -> Result<f64> {
    if a.config != b.config {
        return Err(Error::Config("models have different configurations".into()));
    }
    Ok(a.params
        .iter()
        .zip(&b.params)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Random small config for tests and benches.
pub fn random_config(rng: &mut rng::Rng, vocab_size: usize) -> ModelConfig {
    let n_heads = [1usize, 2][rng.random_range(0..2)];
    ModelConfig {
        vocab_size,
        d_model: 4 * n_heads,
        n_layers: rng.random_range(1..3),
        n_heads,
        d_ff: rng.random_range(3..9),
        max_len: 6,
        n_classes: rng.random_range(2..4),
        seed: rng.random(),
    }
}
