//! Shadow-token search: for every token, the embedding neighbors that pass
//! none of the enabled similarity tests.
//!
//! A token starts at `k0` neighbors. If every neighbor is filtered out, `k`
//! grows by 10 (capped at `n_V - 1`) and all predicates are re-evaluated at
//! the new `k`. If nothing survives even at `n_V - 1`, the entry falls back
//! to the single most distant token that does not share the lemma and is
//! flagged as such.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingTable, LemmaTable, Vocabulary};
use crate::error::{Error, Result};
use crate::geometry::{check_tau, NeighborIndex, OverlapRule};
use crate::par;

pub const K_STEP: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeuristicFlags {
    pub use_indirect: bool,
    pub use_direct: bool,
    pub use_lemma: bool,
}

impl Default for HeuristicFlags {
    fn default() -> Self {
        Self::all_on()
    }
}

impl HeuristicFlags {
    pub fn all_on() -> Self {
        Self {
            use_indirect: true,
            use_direct: true,
            use_lemma: true,
        }
    }

    pub fn all_off() -> Self {
        Self {
            use_indirect: false,
            use_direct: false,
            use_lemma: false,
        }
    }

    /// All eight combinations, all-on first and all-off last.
    pub fn grid() -> Vec<Self> {
        (0..8u8)
            .map(|bits| Self {
                use_indirect: bits & 4 == 0,
                use_direct: bits & 2 == 0,
                use_lemma: bits & 1 == 0,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.use_indirect {
            parts.push("IS");
        }
        if self.use_direct {
            parts.push("DS");
        }
        if self.use_lemma {
            parts.push("CS");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchParams {
    pub k0: usize,
    pub tau_o: f64,
    pub flags: HeuristicFlags,
    pub overlap: OverlapRule,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            k0: 70,
            tau_o: 0.1,
            flags: HeuristicFlags::all_on(),
            overlap: OverlapRule::ChanceCorrected,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowEntry {
    pub k_used: usize,
    pub candidates: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowMap {
    pub params: SearchParams,
    pub entries: BTreeMap<usize, ShadowEntry>,
}

impl ShadowMap {
    pub fn get(&self, t: usize) -> Option<&ShadowEntry> {
        self.entries.get(&t)
    }

    pub fn candidates(&self, t: usize) -> Option<&[usize]> {
        self.entries.get(&t).map(|e| e.candidates.as_slice())
    }

    pub fn fallback_count(&self) -> usize {
        self.entries.values().filter(|e| e.fallback).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Lemma of every token as a dense class id.
pub fn lemma_ids(vocab: &Vocabulary, lemmas: &LemmaTable) -> Vec<usize> {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    vocab
        .surfaces()
        .iter()
        .map(|s| {
            let l = lemmas.lookup(s);
            let next = ids.len();
            *ids.entry(l).or_insert(next)
        })
        .collect()
}

struct Searcher<'a> {
    index: &'a NeighborIndex,
    lemma: Vec<usize>,
    unk: usize,
    params: SearchParams,
}

impl Searcher<'_> {
    fn rejects(&self, t: usize, c: usize, k: usize) -> bool {
        let f = self.params.flags;
        (f.use_lemma && self.lemma[t] == self.lemma[c])
            || (f.use_direct && self.index.contains(t, c, k) && self.index.contains(c, t, k))
            || (f.use_indirect
                && self
                    .index
                    .indirect_similar(t, c, k, self.params.tau_o, self.params.overlap)
                    .expect("validated inputs"))
    }

    fn search_token(&self, t: usize) -> ShadowEntry {
        let max_k = self.index.max_k();
        let mut k = self.params.k0;
        loop {
            let candidates: Vec<usize> = self
                .index
                .neighbors(t, k)
                .expect("validated k")
                .iter()
                .map(|&c| c as usize)
                .filter(|&c| c != self.unk && !self.rejects(t, c, k))
                .collect();
            if !candidates.is_empty() {
                return ShadowEntry {
                    k_used: k,
                    candidates,
                    fallback: false,
                };
            }
            if k >= max_k {
                return self.fallback(t);
            }
            k = (k + K_STEP).min(max_k);
        }
    }

    fn fallback(&self, t: usize) -> ShadowEntry {
        let max_k = self.index.max_k();
        let ranked = self.index.neighbors(t, max_k).expect("n_V >= 3");
        let farthest = |keep: &dyn Fn(usize) -> bool| {
            ranked
                .iter()
                .map(|&c| c as usize)
                .filter(|&c| c != self.unk && keep(c))
                .max_by(|&a, &b| {
                    self.index
                        .distance(t, a)
                        .total_cmp(&self.index.distance(t, b))
                        .then(b.cmp(&a))
                })
        };
        let pick = farthest(&|c| self.lemma[c] != self.lemma[t])
            .or_else(|| farthest(&|_| true))
            .expect("vocabulary has at least two non-unk tokens");
        log::warn!("token {t}: no shadow candidate up to k = {max_k}; falling back to {pick}");
        ShadowEntry {
            k_used: max_k,
            candidates: vec![pick],
            fallback: true,
        }
    }
}

/// Builds the shadow map from a precomputed neighbor index.
pub fn search_with_index(
    vocab: &Vocabulary,
    index: &NeighborIndex,
    lemmas: &LemmaTable,
    params: SearchParams,
) -> Result<ShadowMap> {
    let n = vocab.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "vocabulary of {n} tokens is too small for a shadow search"
        )));
    }
    if index.len() != n {
        return Err(Error::LengthMismatch {
            vocab: n,
            rows: index.len(),
        });
    }
    if params.k0 == 0 || params.k0 > n - 1 {
        return Err(Error::KOutOfRange {
            k: params.k0,
            max: n - 1,
        });
    }
    check_tau(params.tau_o)?;
    let searcher = Searcher {
        index,
        lemma: lemma_ids(vocab, lemmas),
        unk: vocab.unk_id(),
        params,
    };
    let keys: Vec<usize> = (0..n).filter(|&t| t != vocab.unk_id()).collect();
    let entries = par::map(&keys, |&t| searcher.search_token(t));
    Ok(ShadowMap {
        params,
        entries: keys.into_iter().zip(entries).collect(),
    })
}

pub fn search(
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    lemmas: &LemmaTable,
    params: SearchParams,
) -> Result<ShadowMap> {
    if vocab.len() != table.rows() {
        return Err(Error::LengthMismatch {
            vocab: vocab.len(),
            rows: table.rows(),
        });
    }
    search_with_index(vocab, &NeighborIndex::build(table), lemmas, params)
}

pub type ReverseMap = BTreeMap<usize, BTreeSet<usize>>;

/// For each token, the keys whose candidate lists contain it.
pub fn reverse_map(map: &ShadowMap) -> ReverseMap {
    let mut rev = ReverseMap::new();
    for (&key, entry) in &map.entries {
        for &c in &entry.candidates {
            rev.entry(c).or_default().insert(key);
        }
    }
    rev
}

/// A `(key, candidate)` pair that satisfies an enabled predicate at the
/// entry's `k_used`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub key: usize,
    pub candidate: usize,
    pub predicate: &'static str,
}

/// Re-evaluates every enabled predicate for the listed keys. Fallback entries
/// are only checked for self-reference: they exist because no token passes
/// the predicates.
pub fn violations(
    map: &ShadowMap,
    index: &NeighborIndex,
    vocab: &Vocabulary,
    lemmas: &LemmaTable,
    keys: &[usize],
) -> Result<Vec<Violation>> {
    let p = map.params;
    let mut out = Vec::new();
    for &key in keys {
        let entry = map.get(key).ok_or(Error::MissingEntry(key))?;
        for &c in &entry.candidates {
            let k = entry.k_used;
            let mut hit = |predicate| {
                out.push(Violation {
                    key,
                    candidate: c,
                    predicate,
                })
            };
            if c == key {
                hit("self");
            }
            if entry.fallback {
                continue;
            }
            if !index.contains(key, c, k) {
                hit("outside-top-k");
            }
            if p.flags.use_indirect && index.indirect_similar(key, c, k, p.tau_o, p.overlap)? {
                hit("indirect");
            }
            if p.flags.use_direct && index.direct_similar(key, c, k)? {
                hit("direct");
            }
            if p.flags.use_lemma && crate::geometry::common_lemma_similar(key, c, vocab, lemmas)? {
                hit("lemma");
            }
        }
    }
    Ok(out)
}
