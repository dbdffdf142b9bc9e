//! Per-silo k-NN patient similarity graphs with Gaussian static weights.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{euclidean, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticWeights {
    #[default]
    Gaussian,
    Unit,
}

/// Undirected graph; edges are stored once with `i < j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientGraph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    static_weights: Vec<f64>,
    neighbors: Vec<Vec<usize>>,
    bandwidth: f64,
}

impl PatientGraph {
    /// Builds a graph from explicit edges. Pairs may be given in either order.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)], weights: &[f64], bandwidth: f64) -> Result<Self> {
        if edges.len() != weights.len() {
            return Err(Error::dim("graph", format!("{} edges, {} weights", edges.len(), weights.len())));
        }
        let mut set = BTreeSet::new();
        let mut kept = Vec::new();
        for (&(a, b), &w) in edges.iter().zip(weights) {
            if a == b || a >= n_nodes || b >= n_nodes {
                return Err(Error::Parameter(format!("invalid edge ({a}, {b}) for {n_nodes} nodes")));
            }
            let e = (a.min(b), a.max(b));
            if set.insert(e) {
                kept.push((e, w));
            }
        }
        kept.sort_by(|x, y| x.0.cmp(&y.0));
        let mut neighbors = vec![Vec::new(); n_nodes];
        for &((i, j), _) in &kept {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self {
            n_nodes,
            edges: kept.iter().map(|k| k.0).collect(),
            static_weights: kept.iter().map(|k| k.1).collect(),
            neighbors,
            bandwidth,
        })
    }

    /// A graph with no edges.
    pub fn empty(n_nodes: usize) -> Self {
        Self {
            n_nodes,
            edges: Vec::new(),
            static_weights: Vec::new(),
            neighbors: vec![Vec::new(); n_nodes],
            bandwidth: 1.0,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn static_weights(&self) -> &[f64] {
        &self.static_weights
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn neighborhood(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Replaces all static weights with 1.
    pub fn with_unit_weights(mut self) -> Self {
        self.static_weights.iter_mut().for_each(|w| *w = 1.0);
        self
    }

    /// Writes `i j w_ij` lines.
    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (&(i, j), w) in self.edges.iter().zip(&self.static_weights) {
            writeln!(f, "{i} {j} {w}")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Distances from each point to every other, sorted by (distance, index).
fn knn_lists(points: &DenseMatrix, k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = points.rows();
    (0..n)
        .map(|i| {
            let mut cand: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, euclidean(points.row(i), points.row(j))))
                .collect();
            cand.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            cand.truncate(k);
            cand
        })
        .collect()
}

/// Median Euclidean distance over all unordered pairs; 1 if all points coincide.
pub fn median_pairwise_distance(points: &DenseMatrix) -> f64 {
    let n = points.rows();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(euclidean(points.row(i), points.row(j)));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, upper, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let upper = *upper;
    let median = if d.len() % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

pub fn gaussian_weight(distance: f64, bandwidth: f64) -> f64 {
    (-(distance * distance) / (2.0 * bandwidth * bandwidth)).exp()
}

/// Symmetrized k-NN graph: an edge exists if either endpoint lists the other.
pub fn build_knn_graph(points: &DenseMatrix, k: usize) -> Result<PatientGraph> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::Parameter(format!("k-NN graph needs at least 2 nodes, got {n}")));
    }
    if k == 0 || k >= n {
        return Err(Error::Parameter(format!("k={k} must satisfy 1 <= k < n={n}")));
    }
    if !points.is_finite() {
        return Err(Error::Parameter("non-finite coordinates".into()));
    }
    let sigma = median_pairwise_distance(points);
    let mut edges = Vec::new();
    let mut weights = Vec::new();
    for (i, list) in knn_lists(points, k).into_iter().enumerate() {
        for (j, dist) in list {
            edges.push((i, j));
            weights.push(gaussian_weight(dist, sigma));
        }
    }
    PatientGraph::from_edges(n, &edges, &weights, sigma)
}

/// Rebuilds the graph in embedding space, recomputing the bandwidth there.
pub fn refine_graph(embeddings: &DenseMatrix, k_agr: usize) -> Result<PatientGraph> {
    build_knn_graph(embeddings, k_agr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(xs: &[f64]) -> DenseMatrix {
        DenseMatrix::column(xs.to_vec())
    }

    #[test]
    fn collinear_points_k1() {
        let g = build_knn_graph(&line(&[0.0, 1.0, 2.0, 10.0]), 1).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn weight_examples() {
        let pts = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![4.0, 5.0]]).unwrap();
        let g = build_knn_graph(&pts, 1).unwrap();
        let idx = g.edges().iter().position(|&e| e == (0, 1)).unwrap();
        assert_eq!(g.static_weights()[idx], 1.0);
        assert!((gaussian_weight(2.5, 2.5) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((gaussian_weight(2.5, 2.5) - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn parameter_errors() {
        let pts = line(&[0.0, 1.0, 2.0]);
        assert!(build_knn_graph(&pts, 3).is_err());
        assert!(build_knn_graph(&pts, 0).is_err());
        assert!(build_knn_graph(&line(&[0.0]), 1).is_err());
    }

    #[test]
    fn identical_embeddings_fall_back_to_unit_bandwidth() {
        let pts = DenseMatrix::filled(5, 3, 0.25);
        let g = refine_graph(&pts, 2).unwrap();
        assert_eq!(g.bandwidth(), 1.0);
        assert!(g.static_weights().iter().all(|&w| w == 1.0));
        // ties break towards lower indices
        assert_eq!(g.neighborhood(4), &[0, 1]);
    }

    #[test]
    fn refine_on_features_reproduces_graph() {
        let pts = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.5], vec![-1.0, 3.0], vec![0.3, 0.3], vec![5.0, 5.0]]).unwrap();
        assert_eq!(build_knn_graph(&pts, 2).unwrap(), refine_graph(&pts, 2).unwrap());
    }

    #[test]
    fn separated_clusters_have_no_cross_edges() {
        let mut rows = Vec::new();
        for i in 0..10 {
            rows.push(vec![i as f64 * 0.1, 0.0]);
        }
        for i in 0..10 {
            rows.push(vec![100.0 + i as f64 * 0.1, 0.0]);
        }
        let g = refine_graph(&DenseMatrix::from_rows(&rows).unwrap(), 5).unwrap();
        assert!(g.edges().iter().all(|&(i, j)| (i < 10) == (j < 10)));
    }

    #[test]
    fn median_of_even_pair_count() {
        // distances 1, 2, 3 → odd count
        assert_eq!(median_pairwise_distance(&line(&[0.0, 1.0, 3.0])), 2.0);
        // 0,1,2,4: distances 1,2,4,1,3,2 → sorted 1,1,2,2,3,4 → 2
        assert_eq!(median_pairwise_distance(&line(&[0.0, 1.0, 2.0, 4.0])), 2.0);
        // 0,1,3,7: 1,3,7,2,6,4 → 1,2,3,4,6,7 → 3.5
        assert_eq!(median_pairwise_distance(&line(&[0.0, 1.0, 3.0, 7.0])), 3.5);
    }

    proptest! {
        #[test]
        fn symmetric_and_degree_bounded(
            coords in prop::collection::vec(-5.0f64..5.0, 6..60),
            k in 1usize..4,
        ) {
            let n = coords.len() / 2;
            prop_assume!(n > k);
            let pts = DenseMatrix::from_vec(n, 2, coords[..2 * n].to_vec()).unwrap();
            let g = build_knn_graph(&pts, k).unwrap();
            let mut total = 0;
            for i in 0..n {
                prop_assert!(g.degree(i) >= k && g.degree(i) <= n - 1);
                prop_assert!(!g.neighborhood(i).contains(&i));
                for &j in g.neighborhood(i) {
                    prop_assert!(g.neighborhood(j).contains(&i));
                }
                total += g.degree(i);
            }
            prop_assert!(total as f64 / n as f64 <= 2.0 * k as f64);
            for (&w, &(i, j)) in g.static_weights().iter().zip(g.edges()) {
                prop_assert!(w > 0.0 && w <= 1.0);
                prop_assert!(i < j);
            }
        }

        #[test]
        fn weights_decrease_with_distance(a in 0.0f64..10.0, b in 0.0f64..10.0, s in 0.1f64..5.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(gaussian_weight(lo, s) > gaussian_weight(hi, s) || gaussian_weight(hi, s) == 0.0);
        }
    }
}
