//! Cosine geometry over an embedding table: distances, top-k neighbor
//! retrieval and the three similarity predicates used to filter shadow
//! candidates.
//!
//! Neighbor lists are ordered by ascending cosine distance with ties broken
//! by ascending token id, and never contain the query token. `N(t, k)` always
//! has exactly `k` entries.

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingTable, LemmaTable, Vocabulary};
use crate::error::{Error, Result};
use crate::par;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn distance_from_parts(dot_ab: f64, na: f64, nb: f64) -> f64 {
    (1.0 - dot_ab / (na * nb)).clamp(0.0, 2.0)
}

/// `1 - cos(a, b)`, clamped into `[0, 2]`. Exactly symmetric.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(distance_from_parts(dot(a, b), na, nb))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_distance(a, b)?)
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k + 1 > n {
        return Err(Error::KOutOfRange {
            k,
            max: n.saturating_sub(1),
        });
    }
    Ok(())
}

fn sort_by_distance(ids: &mut [usize], dist: impl Fn(usize) -> f64) {
    ids.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
}

/// Brute-force `N(t, k)` by a full scan of the table.
pub fn top_k_neighbors(t: usize, k: usize, table: &EmbeddingTable) -> Result<Vec<usize>> {
    let n = table.rows();
    if t >= n {
        return Err(Error::TokenOutOfRange { id: t, size: n });
    }
    check_k(k, n)?;
    let q = table.row_f64(t);
    let qn = norm(&q);
    let dists: Vec<f64> = (0..n)
        .map(|j| {
            let r = table.row_f64(j);
            distance_from_parts(dot(&q, &r), qn, norm(&r))
        })
        .collect();
    let mut ids: Vec<usize> = (0..n).filter(|&j| j != t).collect();
    sort_by_distance(&mut ids, |j| dists[j]);
    ids.truncate(k);
    Ok(ids)
}

/// How the neighbor-overlap count is compared against `tau_o`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OverlapRule {
    /// `|N(a,k) ∩ N(b,k)| > tau_o * k`.
    Absolute,
    /// `|N(a,k) ∩ N(b,k)| - k^2 / (n_V - 1) > tau_o * k`: the overlap in
    /// excess of two unrelated k-subsets. Coincides with `Absolute` when
    /// `k^2 ≪ n_V` and stays meaningful when `k` is a sizable fraction of
    /// the vocabulary.
    #[default]
    ChanceCorrected,
}

impl OverlapRule {
    pub fn threshold(self, k: usize, tau_o: f64, n_vocab: usize) -> f64 {
        let base = tau_o * k as f64;
        match self {
            OverlapRule::Absolute => base,
            OverlapRule::ChanceCorrected => {
                base + (k * k) as f64 / (n_vocab.saturating_sub(1).max(1)) as f64
            }
        }
    }
}

pub fn check_tau(tau_o: f64) -> Result<()> {
    if tau_o > 0.0 && tau_o <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidTau(tau_o))
    }
}

/// Full neighbor ranking of every token, from which `N(t, k)` for any `k`
/// is a prefix. Holds the distance matrix and inverse ranks so membership
/// tests are O(1). Quadratic in the vocabulary size.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    n: usize,
    order: Vec<u32>,
    rank: Vec<u32>,
    dist: Vec<f64>,
}

impl NeighborIndex {
    pub fn build(table: &EmbeddingTable) -> Self {
        let n = table.rows();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| table.row_f64(i)).collect();
        let norms: Vec<f64> = rows.iter().map(|r| norm(r)).collect();
        let per_row: Vec<(Vec<f64>, Vec<u32>)> = par::map_range(n, |i| {
            let d: Vec<f64> = (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        distance_from_parts(dot(&rows[i], &rows[j]), norms[i], norms[j])
                    }
                })
                .collect();
            let mut ids: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            sort_by_distance(&mut ids, |j| d[j]);
            (d, ids.into_iter().map(|j| j as u32).collect())
        });
        let mut order = Vec::with_capacity(n * n.saturating_sub(1));
        let mut dist = Vec::with_capacity(n * n);
        let mut rank = vec![u32::MAX; n * n];
        for (i, (d, o)) in per_row.into_iter().enumerate() {
            for (r, &j) in o.iter().enumerate() {
                rank[i * n + j as usize] = r as u32;
            }
            order.extend(o);
            dist.extend(d);
        }
        Self {
            n,
            order,
            rank,
            dist,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn max_k(&self) -> usize {
        self.n.saturating_sub(1)
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.dist[a * self.n + b]
    }

    /// `N(t, k)` as a slice of the full ranking.
    pub fn neighbors(&self, t: usize, k: usize) -> Result<&[u32]> {
        self.check_id(t)?;
        check_k(k, self.n)?;
        let w = self.n - 1;
        Ok(&self.order[t * w..t * w + k])
    }

    /// Owned, `usize` copy of `N(t, k)`.
    pub fn top_k(&self, t: usize, k: usize) -> Result<Vec<usize>> {
        Ok(self.neighbors(t, k)?.iter().map(|&j| j as usize).collect())
    }

    /// Whether `b ∈ N(a, k)`.
    pub fn contains(&self, a: usize, b: usize, k: usize) -> bool {
        (self.rank[a * self.n + b] as usize) < k
    }

    pub fn overlap(&self, a: usize, b: usize, k: usize) -> Result<usize> {
        let na = self.neighbors(a, k)?;
        self.check_id(b)?;
        Ok(na.iter().filter(|&&x| self.contains(b, x as usize, k)).count())
    }

    fn check_id(&self, t: usize) -> Result<()> {
        if t < self.n {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                id: t,
                size: self.n,
            })
        }
    }

    pub fn indirect_similar(
        &self,
        a: usize,
        b: usize,
        k: usize,
        tau_o: f64,
        rule: OverlapRule,
    ) -> Result<bool> {
        check_tau(tau_o)?;
        let ov = self.overlap(a, b, k)?;
        Ok(ov as f64 > rule.threshold(k, tau_o, self.n))
    }

    pub fn direct_similar(&self, a: usize, b: usize, k: usize) -> Result<bool> {
        self.check_id(a)?;
        self.check_id(b)?;
        check_k(k, self.n)?;
        Ok(self.contains(a, b, k) && self.contains(b, a, k))
    }
}

pub fn common_lemma_similar(
    a: usize,
    b: usize,
    vocab: &Vocabulary,
    lemmas: &LemmaTable,
) -> Result<bool> {
    Ok(lemmas.lookup(vocab.surface(a)?) == lemmas.lookup(vocab.surface(b)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::UNK_SURFACE;
    use rand::Rng;

    fn table(rows: &[[f32; 2]]) -> EmbeddingTable {
        EmbeddingTable::new(rows.iter().flatten().copied().collect(), rows.len(), 2).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_distance(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert!(matches!(
            cosine_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm)
        ));
        assert!(matches!(
            cosine_distance(&[1.0], &[1.0, 0.0]),
            Err(Error::DimMismatch(1, 2))
        ));
    }

    #[test]
    fn top_k_example() {
        let t = table(&[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [-1.0, 0.0]]);
        // d(t0,t1) ≈ 0.0061, d(t0,t2) = 1, d(t0,t3) = 2.
        assert_eq!(top_k_neighbors(0, 2, &t).unwrap(), vec![1, 2]);
        let idx = NeighborIndex::build(&t);
        assert_eq!(idx.top_k(0, 2).unwrap(), vec![1, 2]);
        let mut all = top_k_neighbors(0, 3, &t).unwrap();
        all.sort();
        assert_eq!(all, vec![1, 2, 3]);
        assert!(matches!(
            top_k_neighbors(0, 4, &t),
            Err(Error::KOutOfRange { .. })
        ));
        assert!(matches!(
            top_k_neighbors(0, 0, &t),
            Err(Error::KOutOfRange { .. })
        ));
    }

    #[test]
    fn ties_prefer_lower_id() {
        let t = table(&[[1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [0.0, 2.0]]);
        // ids 1, 2 and 3 are all orthogonal to id 0.
        assert_eq!(top_k_neighbors(0, 3, &t).unwrap(), vec![1, 2, 3]);
        assert_eq!(NeighborIndex::build(&t).top_k(0, 2).unwrap(), vec![1, 2]);
    }

    /// Builds a 31-token table where `0` and `1` share exactly `shared` of
    /// their 10 nearest neighbors.
    fn overlap_fixture(shared: usize) -> NeighborIndex {
        let mut rows: Vec<[f32; 3]> = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        // Shared neighbors: on the bisector of 0 and 1, very close to both.
        for i in 0..shared {
            rows.push([1.0, 1.0, 0.01 * (i as f32 + 1.0)]);
        }
        // Private neighbors of 0.
        for i in 0..(10 - shared) {
            rows.push([1.0, -0.3, 0.02 * (i as f32 + 1.0)]);
        }
        // Private neighbors of 1.
        for i in 0..(10 - shared) {
            rows.push([-0.3, 1.0, 0.02 * (i as f32 + 1.0)]);
        }
        // Far filler.
        while rows.len() < 31 {
            let z = rows.len() as f32;
            rows.push([-1.0, -1.0, 0.01 * z]);
        }
        let data = rows.iter().flatten().copied().collect();
        NeighborIndex::build(&EmbeddingTable::new(data, rows.len(), 3).unwrap())
    }

    #[test]
    fn indirect_similarity_examples() {
        let idx = overlap_fixture(2);
        assert_eq!(idx.overlap(0, 1, 10).unwrap(), 2);
        assert!(idx
            .indirect_similar(0, 1, 10, 0.1, OverlapRule::Absolute)
            .unwrap());
        let idx = overlap_fixture(1);
        assert_eq!(idx.overlap(0, 1, 10).unwrap(), 1);
        assert!(!idx
            .indirect_similar(0, 1, 10, 0.1, OverlapRule::Absolute)
            .unwrap());
        assert!(idx
            .indirect_similar(5, 5, 10, 0.1, OverlapRule::Absolute)
            .unwrap());
        assert!(matches!(
            idx.indirect_similar(0, 1, 10, 0.0, OverlapRule::Absolute),
            Err(Error::InvalidTau(_))
        ));
        assert!(matches!(
            idx.indirect_similar(0, 1, 10, 1.5, OverlapRule::Absolute),
            Err(Error::InvalidTau(_))
        ));
    }

    #[test]
    fn chance_corrected_threshold() {
        assert_eq!(OverlapRule::Absolute.threshold(10, 0.1, 31), 1.0);
        assert!((OverlapRule::ChanceCorrected.threshold(10, 0.1, 31) - (1.0 + 100.0 / 30.0)).abs() < 1e-12);
        // Large vocabularies: correction below a single count.
        assert!(OverlapRule::ChanceCorrected.threshold(70, 0.1, 30_000) - 7.0 < 0.2);
    }

    #[test]
    fn direct_similarity_examples() {
        // 0 and 1 are mutual nearest neighbors.
        let t = table(&[[1.0, 0.0], [0.95, 0.05], [0.0, 1.0], [-0.7, -0.7]]);
        let idx = NeighborIndex::build(&t);
        assert!(idx.direct_similar(0, 1, 1).unwrap());
        // Hub: a dense pair (2, 3) next to an isolated point 4. 4's nearest is
        // 2, but 2's nearest is 3.
        let t = table(&[
            [-1.0, 0.0],
            [-0.9, -0.4],
            [1.0, 0.0],
            [1.0, 0.02],
            [0.8, 0.6],
        ]);
        let idx = NeighborIndex::build(&t);
        assert_eq!(idx.top_k(4, 1).unwrap(), vec![3]);
        assert_eq!(idx.top_k(3, 1).unwrap(), vec![2]);
        assert!(!idx.direct_similar(4, 3, 1).unwrap());
        assert!(!idx.direct_similar(3, 4, 1).unwrap());
        for a in 0..5 {
            for b in 0..5 {
                if a != b {
                    assert!(idx.direct_similar(a, b, 4).unwrap());
                }
            }
        }
    }

    #[test]
    fn common_lemma_examples() {
        let v = Vocabulary::new(vec!["went".into(), "go".into(), "stop".into(), UNK_SURFACE.into()]).unwrap();
        let l = LemmaTable::from_pairs([("went", "go")]);
        assert!(common_lemma_similar(0, 1, &v, &l).unwrap());
        assert!(!common_lemma_similar(1, 2, &v, &l).unwrap());
        assert!(common_lemma_similar(2, 2, &v, &l).unwrap());
        assert!(common_lemma_similar(0, 9, &v, &l).is_err());
    }

    fn random_table(seed: u64, n: usize, dim: usize) -> EmbeddingTable {
        let mut rng = crate::rng::seeded(seed);
        let data = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        EmbeddingTable::new(data, n, dim).unwrap()
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn symmetry_and_monotonicity(seed in 0u64..10_000, n in 4usize..40, dim in 1usize..6) {
            let t = random_table(seed, n, dim);
            let idx = NeighborIndex::build(&t);
            for a in 0..n {
                for b in 0..n {
                    let dab = cosine_distance(&t.row_f64(a), &t.row_f64(b)).unwrap();
                    let dba = cosine_distance(&t.row_f64(b), &t.row_f64(a)).unwrap();
                    proptest::prop_assert_eq!(dab.to_bits(), dba.to_bits());
                }
            }
            let k = 1 + (seed as usize % (n - 1));
            for a in 0..n.min(6) {
                let small = idx.top_k(a, k).unwrap();
                let large = idx.top_k(a, n - 1).unwrap();
                for x in &small {
                    proptest::prop_assert!(large.contains(x));
                }
                for b in 0..n.min(6) {
                    proptest::prop_assert_eq!(
                        idx.indirect_similar(a, b, k, 0.3, OverlapRule::Absolute).unwrap(),
                        idx.indirect_similar(b, a, k, 0.3, OverlapRule::Absolute).unwrap()
                    );
                    proptest::prop_assert_eq!(
                        idx.direct_similar(a, b, k).unwrap(),
                        idx.direct_similar(b, a, k).unwrap()
                    );
                }
            }
        }
    }
}
