//! Directed top-k similarity graphs over attributes, entities and time series.

use std::sync::Arc;

use crate::data::{EntityStaticProfile, WindowSample};
use crate::error::{Error, Result};

/// Directed k-NN adjacency: every node has exactly `k` out-neighbours and no
/// self-loop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphTopology {
    n_nodes: usize,
    k: usize,
    neighbors: Vec<usize>,
}

/// The static entity graph and the per-batch temporal graph over the same
/// entities.
#[derive(Clone, Debug)]
pub struct BlockAdjacency {
    pub entity_graph: Arc<GraphTopology>,
    pub temporal_graph: Arc<GraphTopology>,
}

impl BlockAdjacency {
    pub fn new(entity_graph: Arc<GraphTopology>, temporal_graph: Arc<GraphTopology>) -> Result<Self> {
        if entity_graph.n_nodes() != temporal_graph.n_nodes() {
            return Err(Error::LengthMismatch {
                left: entity_graph.n_nodes(),
                right: temporal_graph.n_nodes(),
            });
        }
        Ok(Self {
            entity_graph,
            temporal_graph,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.entity_graph.n_nodes()
    }
}

/// `max(1, ceil(0.05 * n))`.
pub fn default_k(n_nodes: usize) -> usize {
    (n_nodes * 5).div_ceil(100).max(1)
}

impl GraphTopology {
    /// Builds a graph from explicit neighbour lists. Every list must have the
    /// same length, contain no self-loop and reference valid nodes.
    pub fn from_neighbors(lists: Vec<Vec<usize>>) -> Result<Self> {
        let n_nodes = lists.len();
        let k = lists.first().map_or(0, Vec::len);
        let mut neighbors = Vec::with_capacity(n_nodes * k);
        for (i, l) in lists.into_iter().enumerate() {
            if l.len() != k {
                return Err(Error::LengthMismatch { left: k, right: l.len() });
            }
            if l.iter().any(|&j| j == i || j >= n_nodes) {
                return Err(Error::InvalidRange(format!("bad neighbour list for node {i}: {l:?}")));
            }
            neighbors.extend(l);
        }
        Ok(Self { n_nodes, k, neighbors })
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_nodes).flat_map(move |i| self.neighbors(i).iter().map(move |&j| (i, j)))
    }

    /// Disjoint union of graphs sharing the same `k`; node ids of the `g`-th
    /// part are offset by the sizes of the preceding parts.
    pub fn block_diagonal(parts: &[&GraphTopology]) -> Result<Self> {
        let k = parts.first().map_or(0, |g| g.k);
        let mut neighbors = Vec::new();
        let mut offset = 0;
        for g in parts {
            if g.k != k {
                return Err(Error::LengthMismatch { left: k, right: g.k });
            }
            neighbors.extend(g.neighbors.iter().map(|&j| j + offset));
            offset += g.n_nodes;
        }
        Ok(Self {
            n_nodes: offset,
            k,
            neighbors,
        })
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut lists = vec![Vec::new(); self.n_nodes];
        for i in 0..self.n_nodes {
            lists[perm[i]] = self.neighbors(i).iter().map(|&j| perm[j]).collect();
        }
        Self {
            n_nodes: self.n_nodes,
            k: self.k,
            neighbors: lists.concat(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("source,target\n");
        for (i, j) in self.edges() {
            s.push_str(&format!("{i},{j}\n"));
        }
        s
    }
}

/// Cosine similarity; 0 when either vector is all zeros.
pub fn time_series_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.is_empty() {
        return Err(Error::InvalidRange("similarity of empty vectors".into()));
    }
    Ok(cosine(a, b))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Connects each node to the `k` most similar other nodes (ties to the lower
/// index). `k` defaults to [`default_k`].
pub fn build_topk_graph(node_series: &[Vec<f64>], k: Option<usize>) -> Result<GraphTopology> {
    let n = node_series.len();
    if n < 2 {
        return Err(Error::TooFewNodes { need: 2, got: n });
    }
    let len = node_series[0].len();
    if len == 0 {
        return Err(Error::InvalidRange("empty node series".into()));
    }
    if let Some(bad) = node_series.iter().find(|s| s.len() != len) {
        return Err(Error::LengthMismatch { left: len, right: bad.len() });
    }
    let k = k.unwrap_or_else(|| default_k(n));
    if k == 0 || k >= n {
        return Err(Error::InvalidRange(format!("k = {k} must lie in [1, {n})")));
    }

    let norms: Vec<f64> = node_series
        .iter()
        .map(|s| s.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut sims = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = node_series[i].iter().zip(&node_series[j]).map(|(a, b)| a * b).sum();
                dot / (norms[i] * norms[j])
            };
            sims[i * n + j] = s;
            sims[j * n + i] = s;
        }
    }

    let mut neighbors = Vec::with_capacity(n * k);
    let mut candidates: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        candidates.clear();
        candidates.extend((0..n).filter(|&j| j != i));
        let row = &sims[i * n..(i + 1) * n];
        let by_rank = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        if k < candidates.len() {
            candidates.select_nth_unstable_by(k - 1, by_rank);
        }
        let top = &mut candidates[..k];
        top.sort_unstable_by(by_rank);
        neighbors.extend_from_slice(top);
    }
    Ok(GraphTopology { n_nodes: n, k, neighbors })
}

/// Attribute graph of one window: node `i` is attribute `i`, its series the
/// attribute's values over the window's input days.
pub fn build_attribute_graph(window: &WindowSample) -> Result<GraphTopology> {
    build_topk_graph(&window.attribute_series(), None)
}

/// Encodes a static profile as one-hot categoricals followed by numeric
/// fields min-max scaled over the population.
pub fn encode_profiles(profiles: &[EntityStaticProfile]) -> Vec<Vec<f64>> {
    let n_types = profiles.iter().map(|p| p.product_type + 1).max().unwrap_or(0) as usize;
    let n_locs = profiles.iter().map(|p| p.location + 1).max().unwrap_or(0) as usize;
    let n_extra = profiles.iter().map(|p| p.extra.len()).max().unwrap_or(0);

    let numeric = |p: &EntityStaticProfile| -> Vec<f64> {
        let mut v = vec![p.open_time as f64];
        v.extend((0..n_extra).map(|i| p.extra.get(i).copied().unwrap_or(0.0)));
        v
    };
    let raw: Vec<Vec<f64>> = profiles.iter().map(numeric).collect();
    let width = n_extra + 1;
    let mut lo = vec![f64::INFINITY; width];
    let mut hi = vec![f64::NEG_INFINITY; width];
    for r in &raw {
        for (c, &v) in r.iter().enumerate() {
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }

    profiles
        .iter()
        .zip(&raw)
        .map(|(p, r)| {
            let mut v = vec![0.0; n_types + n_locs];
            v[p.product_type as usize] = 1.0;
            v[n_types + p.location as usize] = 1.0;
            v.extend(r.iter().enumerate().map(|(c, &x)| {
                let span = hi[c] - lo[c];
                if span > 0.0 {
                    (x - lo[c]) / span
                } else {
                    0.0
                }
            }));
            v
        })
        .collect()
}

pub fn build_entity_graph(profiles: &[EntityStaticProfile]) -> Result<GraphTopology> {
    if profiles.len() < 2 {
        return Err(Error::TooFewNodes { need: 2, got: profiles.len() });
    }
    build_topk_graph(&encode_profiles(profiles), None)
}

/// Temporal graph over entities from their current windows, flattened.
/// `windows[n]` must be entity `n`'s window.
pub fn build_temporal_graph(windows: &[&WindowSample]) -> Result<GraphTopology> {
    for (n, w) in windows.iter().enumerate() {
        if w.entity_index != n {
            return Err(Error::InvalidRange(format!(
                "temporal graph expects entity {n} at position {n}, got {}",
                w.entity_index
            )));
        }
    }
    let series: Vec<Vec<f64>> = windows.iter().map(|w| w.input.clone()).collect();
    build_topk_graph(&series, None)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Exhaustive oracle: full sort of all pairwise similarities.
    fn oracle(series: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
        let n = series.len();
        (0..n)
            .map(|i| {
                let mut scored: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let dot: f64 = series[i].iter().zip(&series[j]).map(|(a, b)| a * b).sum();
                        let na: f64 = series[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                        let nb: f64 = series[j].iter().map(|a| a * a).sum::<f64>().sqrt();
                        let s = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
                        (s, j)
                    })
                    .collect();
                scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                scored.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect()
    }

    fn random_series(rng: &mut impl Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(time_series_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((time_series_similarity(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(time_series_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            time_series_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn default_k_values() {
        assert_eq!(default_k(114), 6);
        assert_eq!(default_k(40), 2);
        assert_eq!(default_k(20), 1);
        assert_eq!(default_k(8), 1);
        assert_eq!(default_k(2), 1);
        assert_eq!(default_k(60), 3);
    }

    #[test]
    fn identical_series_break_ties_by_index() {
        let series = vec![vec![1.0, 2.0, 3.0]; 20];
        let g = build_topk_graph(&series, None).unwrap();
        assert_eq!(g.k(), 1);
        assert_eq!(g.neighbors(0), &[1]);
        for i in 1..20 {
            assert_eq!(g.neighbors(i), &[0]);
        }
    }

    #[test]
    fn too_few_nodes() {
        assert!(matches!(
            build_topk_graph(&[vec![1.0]], None),
            Err(Error::TooFewNodes { .. })
        ));
    }

    #[test]
    fn ten_random_series_k2_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_series(&mut rng, 10, 12);
        let g = build_topk_graph(&s, Some(2)).unwrap();
        let want = oracle(&s, 2);
        for i in 0..10 {
            assert_eq!(g.neighbors(i), want[i].as_slice());
        }
    }

    #[test]
    fn topk_matches_oracle_on_100_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let n = rng.gen_range(2..=16);
            let len = rng.gen_range(1..=10);
            let mut s = random_series(&mut rng, n, len);
            // Occasionally plant duplicates and zero vectors to exercise ties.
            if n > 3 && rng.gen_bool(0.3) {
                s[1] = s[0].clone();
                s[2] = vec![0.0; len];
            }
            let k = rng.gen_range(1..n);
            let g = build_topk_graph(&s, Some(k)).unwrap();
            let want = oracle(&s, k);
            for i in 0..n {
                assert_eq!(g.neighbors(i), want[i].as_slice(), "node {i}, n {n}, k {k}");
            }
        }
    }

    #[test]
    fn block_diagonal_offsets() {
        let a = GraphTopology::from_neighbors(vec![vec![1], vec![0]]).unwrap();
        let b = GraphTopology::from_neighbors(vec![vec![2], vec![0], vec![1]]).unwrap();
        let g = GraphTopology::block_diagonal(&[&a, &b]).unwrap();
        assert_eq!(g.n_nodes(), 5);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1), (1, 0), (2, 4), (3, 2), (4, 3)]);
    }

    #[test]
    fn entity_graph_identical_profiles_are_mutual() {
        let mk = |id: &str, t, loc, open| EntityStaticProfile {
            entity_id: id.into(),
            open_time: open,
            product_type: t,
            location: loc,
            extra: vec![1.0],
        };
        let profiles = vec![
            mk("a", 0, 0, 100),
            mk("b", 1, 2, 900),
            mk("c", 0, 0, 100),
            mk("d", 2, 1, 500),
        ];
        let g = build_entity_graph(&profiles).unwrap();
        assert_eq!(g.neighbors(0), &[2]);
        assert_eq!(g.neighbors(2), &[0]);
    }

    #[test]
    fn entity_graph_degree_for_forty() {
        let profiles: Vec<_> = (0..40)
            .map(|i| EntityStaticProfile {
                entity_id: format!("e{i}"),
                open_time: i as i64 * 10,
                product_type: (i % 5) as u32,
                location: (i % 3) as u32,
                extra: vec![],
            })
            .collect();
        let g = build_entity_graph(&profiles).unwrap();
        assert_eq!(g.k(), 2);
        assert!((0..40).all(|i| g.neighbors(i).len() == 2));
    }

    #[test]
    fn entity_graph_matches_oracle_on_ten() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let profiles: Vec<_> = (0..10)
            .map(|i| EntityStaticProfile {
                entity_id: format!("e{i}"),
                open_time: rng.gen_range(0..5000),
                product_type: rng.gen_range(0..3),
                location: rng.gen_range(0..2),
                extra: vec![rng.gen_range(0.0..10.0)],
            })
            .collect();
        let g = build_entity_graph(&profiles).unwrap();
        let want = oracle(&encode_profiles(&profiles), 1);
        for i in 0..10 {
            assert_eq!(g.neighbors(i), want[i].as_slice());
        }
    }

    proptest! {
        #[test]
        fn out_degree_and_no_self_loops(
            n in 2usize..40,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_series(&mut rng, n, 5);
            let g = build_topk_graph(&s, None).unwrap();
            prop_assert_eq!(g.k(), default_k(n));
            for i in 0..n {
                prop_assert_eq!(g.neighbors(i).len(), g.k());
                prop_assert!(g.neighbors(i).iter().all(|&j| j != i && j < n));
            }
        }

        #[test]
        fn relabeling_nodes_relabels_edges(n in 3usize..16, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_series(&mut rng, n, 6);
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let mut permuted = vec![Vec::new(); n];
            for i in 0..n {
                permuted[perm[i]] = s[i].clone();
            }
            let g = build_topk_graph(&s, Some(2)).unwrap();
            let gp = build_topk_graph(&permuted, Some(2)).unwrap();
            // Random continuous data has no ties, so edge sets must map exactly.
            for i in 0..n {
                let mut want: Vec<usize> = g.neighbors(i).iter().map(|&j| perm[j]).collect();
                let mut got = gp.neighbors(perm[i]).to_vec();
                want.sort_unstable();
                got.sort_unstable();
                prop_assert_eq!(got, want);
            }
        }
    }
}
