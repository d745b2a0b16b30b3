//! Multi-relation host graphs.
//!
//! One graph is built per distance metric: pairwise distances are min-max rescaled over the
//! off-diagonal entries and thresholded with a strict `<`. Corruption permutes node feature
//! rows while every adjacency stays fixed.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    BrayCurtis,
    Euclidean,
    Canberra,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 3] = [
        DistanceKind::BrayCurtis,
        DistanceKind::Euclidean,
        DistanceKind::Canberra,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::BrayCurtis => "bray_curtis",
            DistanceKind::Euclidean => "euclidean",
            DistanceKind::Canberra => "canberra",
        }
    }

    pub fn distance(self, m: &[f64], n: &[f64]) -> Result<f64> {
        match self {
            DistanceKind::BrayCurtis => bray_curtis(m, n),
            DistanceKind::Euclidean => euclidean(m, n),
            DistanceKind::Canberra => canberra(m, n),
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistanceKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown distance kind {s:?}")))
    }
}

fn same_len(m: &[f64], n: &[f64]) -> Result<()> {
    if m.len() != n.len() {
        return Err(Error::Shape {
            op: "distance",
            left: (1, m.len()),
            right: (1, n.len()),
        });
    }
    Ok(())
}

/// `Σ|mᵢ − nᵢ| / (Σmᵢ + Σnᵢ)` for non-negative vectors.
pub fn bray_curtis(m: &[f64], n: &[f64]) -> Result<f64> {
    same_len(m, n)?;
    let num: f64 = m.iter().zip(n).map(|(a, b)| (a - b).abs()).sum();
    let den: f64 = m.iter().sum::<f64>() + n.iter().sum::<f64>();
    if den == 0.0 {
        return Err(Error::ZeroDenominator("Bray-Curtis distance of two all-zero vectors"));
    }
    Ok(num / den)
}

pub fn euclidean(m: &[f64], n: &[f64]) -> Result<f64> {
    same_len(m, n)?;
    Ok(m.iter().zip(n).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `Σ |mᵢ − nᵢ| / (|mᵢ| + |nᵢ|)`; terms with a zero denominator contribute 0.
pub fn canberra(m: &[f64], n: &[f64]) -> Result<f64> {
    same_len(m, n)?;
    Ok(m.iter()
        .zip(n)
        .map(|(a, b)| {
            let den = a.abs() + b.abs();
            if den == 0.0 {
                0.0
            } else {
                (a - b).abs() / den
            }
        })
        .sum())
}

/// Symmetric N×N distance matrix over the rows of `x`, zero diagonal.
pub fn pairwise_distances(x: &Tensor, kind: DistanceKind) -> Result<Tensor> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "pairwise distances need at least 2 rows, got {n}"
        )));
    }
    let mut d = Tensor::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = kind.distance(x.row(i), x.row(j))?;
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    Ok(d)
}

/// Binary symmetric adjacency for one relation-type, zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationGraph {
    pub kind: DistanceKind,
    adjacency: Tensor,
    pub threshold: f64,
}

impl RelationGraph {
    /// Validate and wrap a 0/1 adjacency matrix.
    pub fn from_adjacency(kind: DistanceKind, adjacency: Tensor, threshold: f64) -> Result<Self> {
        let n = adjacency.rows();
        if adjacency.cols() != n {
            return Err(Error::Shape {
                op: "RelationGraph",
                left: adjacency.shape(),
                right: (n, n),
            });
        }
        for i in 0..n {
            if adjacency.get(i, i) != 0.0 {
                return Err(Error::InvalidArgument(format!("self-loop at node {i}")));
            }
            for j in 0..n {
                let a = adjacency.get(i, j);
                if (a != 0.0 && a != 1.0) || a != adjacency.get(j, i) {
                    return Err(Error::InvalidArgument(format!(
                        "adjacency must be binary and symmetric (entry {i},{j})"
                    )));
                }
            }
        }
        Ok(RelationGraph {
            kind,
            adjacency,
            threshold,
        })
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency.get(i, j) != 0.0
    }

    /// Undirected edges as `(i, j)` with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n_nodes();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Edge list, one `i<TAB>j` line per undirected edge.
    pub fn to_edge_list(&self) -> String {
        self.edges().iter().map(|(i, j)| format!("{i}\t{j}\n")).collect()
    }

    /// Sidecar describing an edge list file.
    pub fn header(&self) -> EdgeListHeader {
        EdgeListHeader {
            relation: self.kind,
            theta: self.threshold,
            nodes: self.n_nodes(),
            edges: self.edges().len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeListHeader {
    pub relation: DistanceKind,
    pub theta: f64,
    pub nodes: usize,
    pub edges: usize,
}

/// Threshold a distance matrix into a relation graph.
///
/// Off-diagonal distances are min-max rescaled to `[0, 1]`; `(i, j)` is an edge iff the
/// rescaled distance is strictly below `theta`.
pub fn build_relation_graph(dist: &Tensor, kind: DistanceKind, theta: f64) -> Result<RelationGraph> {
    let n = dist.rows();
    if dist.cols() != n || n < 2 {
        return Err(Error::Shape {
            op: "build_relation_graph",
            left: dist.shape(),
            right: (n, n),
        });
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidArgument(format!("theta must lie in (0, 1), got {theta}")));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = dist.get(i, j);
                if !d.is_finite() {
                    return Err(Error::InvalidArgument(format!("non-finite distance at {i},{j}")));
                }
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
    }
    if hi == lo {
        return Err(Error::DegenerateDistances(lo));
    }
    let span = hi - lo;
    let mut adjacency = Tensor::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let scaled = (dist.get(i, j) - lo) / span;
            if scaled < theta {
                adjacency.set(i, j, 1.0);
                adjacency.set(j, i, 1.0);
            }
        }
    }
    Ok(RelationGraph {
        kind,
        adjacency,
        threshold: theta,
    })
}

/// `D̂^(−1/2) (A + I) D̂^(−1/2)` for one relation graph.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub kind: DistanceKind,
    matrix: Tensor,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn n_nodes(&self) -> usize {
        self.matrix.rows()
    }

    /// Wrap an arbitrary propagation matrix (identity, hand-built test graphs).
    pub fn from_matrix(kind: DistanceKind, matrix: Tensor) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::Shape {
                op: "NormalizedAdjacency",
                left: matrix.shape(),
                right: (matrix.rows(), matrix.rows()),
            });
        }
        Ok(NormalizedAdjacency { kind, matrix })
    }
}

pub fn normalize_adjacency(g: &RelationGraph) -> NormalizedAdjacency {
    let n = g.n_nodes();
    let a = g.adjacency();
    // Self-loops make every degree at least 1.
    let degree: Vec<f64> = (0..n).map(|i| 1.0 + a.row(i).iter().sum::<f64>()).collect();
    let matrix = Tensor::from_fn(n, n, |i, j| {
        let hat = if i == j { 1.0 } else { a.get(i, j) };
        if hat == 0.0 {
            0.0
        } else {
            hat / (degree[i] * degree[j]).sqrt()
        }
    });
    NormalizedAdjacency { kind: g.kind, matrix }
}

/// Uniform random non-identity permutation of `0..n` (for `n >= 2`).
pub fn shuffle_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if n < 2 || perm.iter().enumerate().any(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Row `i` of the result is row `perm[i]` of `x`.
pub fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    x.select_rows(perm)
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Seeded row shuffle of a feature matrix. Adjacencies are not involved.
pub fn shuffle_features(x: &Tensor, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    if x.rows() < 2 {
        return Err(Error::InvalidArgument("shuffling needs at least 2 nodes".into()));
    }
    let perm = shuffle_permutation(x.rows(), &mut ChaCha8Rng::seed_from_u64(seed));
    Ok((permute_rows(x, &perm), perm))
}

/// Shared node features plus one original graph per relation-type, and the corruption
/// permutation that produces the shuffled counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiGraph {
    features: Tensor,
    originals: Vec<RelationGraph>,
    shuffle_permutation: Vec<usize>,
}

impl MultiGraph {
    pub fn new(features: Tensor, originals: Vec<RelationGraph>, shuffle_permutation: Vec<usize>) -> Result<Self> {
        let n = features.rows();
        if originals.is_empty() {
            return Err(Error::Empty("a multi-graph needs at least one relation-type".into()));
        }
        for g in &originals {
            if g.n_nodes() != n {
                return Err(Error::Shape {
                    op: "MultiGraph",
                    left: g.adjacency().shape(),
                    right: (n, n),
                });
            }
        }
        let mut seen = vec![false; n];
        if shuffle_permutation.len() != n
            || !shuffle_permutation.iter().all(|&p| p < n && !std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidArgument("shuffle permutation is not a bijection".into()));
        }
        Ok(MultiGraph {
            features,
            originals,
            shuffle_permutation,
        })
    }

    /// Build one graph per `kinds` over the rows of `features`.
    pub fn build(features: &Tensor, kinds: &[DistanceKind], theta: f64, shuffle_seed: u64) -> Result<Self> {
        let originals = kinds
            .iter()
            .map(|&k| build_relation_graph(&pairwise_distances(features, k)?, k, theta))
            .collect::<Result<Vec<_>>>()?;
        let (_, perm) = shuffle_features(features, shuffle_seed)?;
        MultiGraph::new(features.clone(), originals, perm)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn originals(&self) -> &[RelationGraph] {
        &self.originals
    }

    pub fn shuffle_permutation(&self) -> &[usize] {
        &self.shuffle_permutation
    }

    pub fn shuffled_features(&self) -> Tensor {
        permute_rows(&self.features, &self.shuffle_permutation)
    }

    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn kinds(&self) -> Vec<DistanceKind> {
        self.originals.iter().map(|g| g.kind).collect()
    }

    pub fn normalized(&self) -> Vec<NormalizedAdjacency> {
        self.originals.iter().map(normalize_adjacency).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    fn random_matrix(seed: u64, n: usize, f: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(n, f, |_, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn bray_curtis_cases() {
        assert_eq!(bray_curtis(&[0.2, 0.3], &[0.2, 0.3]).unwrap(), 0.0);
        assert!((bray_curtis(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() - 4.0 / 12.0).abs() < 1e-15);
        assert_eq!(bray_curtis(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(bray_curtis(&[0.0, 0.0], &[0.0, 0.0]), Err(Error::ZeroDenominator(_))));
    }

    #[test]
    fn euclidean_cases() {
        assert_eq!(euclidean(&[0.5, 1.0], &[0.5, 1.0]).unwrap(), 0.0);
        assert_eq!(euclidean(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(euclidean(&[1.0], &[-1.0]).unwrap(), 2.0);
        assert!(euclidean(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn canberra_cases() {
        assert_eq!(canberra(&[0.1, 0.4], &[0.1, 0.4]).unwrap(), 0.0);
        assert_eq!(canberra(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(canberra(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn identical_rows_have_zero_distance() {
        let x = Tensor::from_rows(&[[0.2, 0.8], [0.2, 0.8]]);
        for k in DistanceKind::ALL {
            let d = pairwise_distances(&x, k).unwrap();
            assert_eq!(d.get(0, 1), 0.0);
            assert_eq!(d.get(1, 0), 0.0);
        }
    }

    #[test]
    fn all_zero_pair_propagates_bray_curtis_error() {
        let x = Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.0], [0.5, 0.5]]);
        assert!(pairwise_distances(&x, DistanceKind::BrayCurtis).is_err());
        assert!(pairwise_distances(&x, DistanceKind::Canberra).is_ok());
    }

    fn distinct_distances() -> Tensor {
        // Nodes 0..4 with pairwise distances 1..6, maximum at (2, 3), minimum at (0, 1).
        let mut d = Tensor::zeros(4, 4);
        let pairs = [((0, 1), 1.0), ((0, 2), 2.0), ((0, 3), 3.0), ((1, 2), 4.0), ((1, 3), 5.0), ((2, 3), 6.0)];
        for ((i, j), v) in pairs {
            d.set(i, j, v);
            d.set(j, i, v);
        }
        d
    }

    #[test]
    fn theta_near_one_drops_only_max_pair() {
        let g = build_relation_graph(&distinct_distances(), DistanceKind::Euclidean, 1.0 - 1e-9).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3)]);
    }

    #[test]
    fn theta_near_zero_keeps_only_min_pair() {
        let g = build_relation_graph(&distinct_distances(), DistanceKind::Euclidean, 1e-9).unwrap();
        assert_eq!(g.edges(), vec![(0, 1)]);
    }

    #[test]
    fn hand_rescaled_threshold() {
        // Rescaled: (d - 1) / 5 -> 0, 0.2, 0.4, 0.6, 0.8, 1.0; `< 0.6` keeps the first three.
        let g = build_relation_graph(&distinct_distances(), DistanceKind::BrayCurtis, 0.6).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (0, 2), (0, 3)]);
        assert_eq!(g.adjacency().get(3, 0), 1.0);
        assert_eq!(g.adjacency().get(2, 2), 0.0);
    }

    #[test]
    fn equal_distances_are_degenerate() {
        let d = Tensor::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 0.5 });
        assert!(matches!(
            build_relation_graph(&d, DistanceKind::Euclidean, 0.6),
            Err(Error::DegenerateDistances(_))
        ));
        assert!(build_relation_graph(&distinct_distances(), DistanceKind::Euclidean, 1.0).is_err());
    }

    #[test]
    fn two_node_normalization() {
        let g = RelationGraph::from_adjacency(
            DistanceKind::Euclidean,
            Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]),
            0.6,
        )
        .unwrap();
        let a = normalize_adjacency(&g);
        assert_eq!(a.matrix(), &Tensor::from_rows(&[[0.5, 0.5], [0.5, 0.5]]));
    }

    #[test]
    fn edgeless_normalization_is_identity() {
        let g = RelationGraph::from_adjacency(DistanceKind::Canberra, Tensor::zeros(4, 4), 0.6).unwrap();
        assert_eq!(normalize_adjacency(&g).matrix(), &Tensor::identity(4));
    }

    #[test]
    fn shuffle_properties() {
        let x = random_matrix(4, 7, 3);
        let (s, perm) = shuffle_features(&x, 11).unwrap();
        assert_ne!(perm, (0..7).collect::<Vec<_>>());
        assert_eq!(permute_rows(&s, &invert_permutation(&perm)), x);
        assert_eq!(shuffle_features(&x, 11).unwrap(), (s, perm));
        // Two nodes: the only non-identity permutation is the swap.
        let (_, p2) = shuffle_features(&random_matrix(1, 2, 2), 0).unwrap();
        assert_eq!(p2, vec![1, 0]);
    }

    #[test]
    fn edge_list_and_header() {
        let g = build_relation_graph(&distinct_distances(), DistanceKind::Canberra, 0.6).unwrap();
        assert_eq!(g.to_edge_list(), "0\t1\n0\t2\n0\t3\n");
        let h = g.header();
        assert_eq!((h.nodes, h.edges, h.relation), (4, 3, DistanceKind::Canberra));
    }

    fn spectral_radius(m: &Tensor) -> f64 {
        let n = m.rows();
        let mut v = Tensor::from_fn(n, 1, |i, _| 1.0 + i as f64 * 0.1);
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = m.matmul(&v).unwrap();
            lambda = w.sum_of_squares().sqrt() / v.sum_of_squares().sqrt();
            let norm = w.sum_of_squares().sqrt();
            v = w.map(|x| x / norm);
        }
        lambda
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric_and_zero_on_diagonal(seed in any::<u64>(), f in 1usize..10) {
            let x = random_matrix(seed, 2, f);
            for k in DistanceKind::ALL {
                let (a, b) = (x.row(0), x.row(1));
                prop_assert_eq!(k.distance(a, a).unwrap(), 0.0);
                prop_assert_eq!(k.distance(a, b).unwrap(), k.distance(b, a).unwrap());
            }
        }

        #[test]
        fn affine_rescaling_keeps_edges(seed in any::<u64>(), scale in 0.1f64..50.0, shift in 0.0f64..10.0) {
            let x = random_matrix(seed, 6, 4);
            let d = pairwise_distances(&x, DistanceKind::Euclidean).unwrap();
            let moved = Tensor::from_fn(6, 6, |i, j| if i == j { 0.0 } else { d.get(i, j) * scale + shift });
            let a = build_relation_graph(&d, DistanceKind::Euclidean, 0.6).unwrap();
            let b = build_relation_graph(&moved, DistanceKind::Euclidean, 0.6).unwrap();
            prop_assert_eq!(a.edges(), b.edges());
        }

        #[test]
        fn normalized_adjacency_properties(seed in any::<u64>(), n in 3usize..9) {
            let x = random_matrix(seed, n, 3);
            let g = build_relation_graph(&pairwise_distances(&x, DistanceKind::BrayCurtis).unwrap(), DistanceKind::BrayCurtis, 0.6).unwrap();
            let a = normalize_adjacency(&g);
            let m = a.matrix();
            // Symmetric, non-negative, support equals A + I.
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(m.get(i, j), m.get(j, i));
                    prop_assert!(m.get(i, j) >= 0.0);
                    prop_assert_eq!(m.get(i, j) != 0.0, i == j || g.has_edge(i, j));
                }
            }
            // D̂^(1/2)·1 is a fixed point.
            let sqrt_deg = Tensor::from_fn(n, 1, |i, _| (1.0 + g.adjacency().row(i).iter().sum::<f64>()).sqrt());
            let image = m.matmul(&sqrt_deg).unwrap();
            for i in 0..n {
                prop_assert!((image.get(i, 0) - sqrt_deg.get(i, 0)).abs() < 1e-12);
            }
            prop_assert!(spectral_radius(m) <= 1.0 + 1e-9);
        }

        #[test]
        fn shuffle_keeps_row_multiset(seed in any::<u64>(), n in 2usize..20) {
            let x = random_matrix(seed, n, 3);
            let (s, _) = shuffle_features(&x, seed ^ 0xabc).unwrap();
            let key = |t: &Tensor| {
                let mut rows: Vec<Vec<u64>> = (0..t.rows()).map(|i| t.row(i).iter().map(|v| v.to_bits()).collect()).collect();
                rows.sort();
                rows
            };
            prop_assert_eq!(key(&s), key(&x));
        }
    }
}
