//! Attributed graphs, the symmetric normalized operator `D̃^{-1/2}(A+I)D̃^{-1/2}`
//! and k-step feature propagation.
//!
//! Graphs are undirected and unweighted. Every node carries an implicit
//! self-loop in the operator, so isolated nodes are legal and keep their own
//! features under propagation.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::{Array2, ArrayView1, ArrayViewMut1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unordered node pair stored as `(min, max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    lo: usize,
    hi: usize,
}

impl Edge {
    pub fn new(a: usize, b: usize) -> Result<Self> {
        if a == b {
            return Err(Error::SelfLoop(a));
        }
        Ok(Self {
            lo: a.min(b),
            hi: a.max(b),
        })
    }

    pub fn endpoints(self) -> (usize, usize) {
        (self.lo, self.hi)
    }

    pub fn contains(self, v: usize) -> bool {
        self.lo == v || self.hi == v
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lo, self.hi)
    }
}

/// Undirected graph with a dense node feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributedGraph {
    adjacency: Vec<Vec<usize>>,
    num_edges: usize,
    features: Array2<f64>,
}

impl AttributedGraph {
    /// Builds a graph from a feature matrix (one row per node) and an edge list.
    ///
    /// Pairs are canonicalised and deduplicated; self-loops and ids outside
    /// `[0, rows)` are rejected.
    pub fn new<I>(features: Array2<f64>, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let num_nodes = features.nrows();
        if num_nodes == 0 {
            return Err(Error::Validation("graph must have at least one node".into()));
        }
        if features.ncols() == 0 {
            return Err(Error::Validation("feature dimension must be positive".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            for v in [a, b] {
                if v >= num_nodes {
                    return Err(Error::OutOfRange { node: v, num_nodes });
                }
            }
            set.insert(Edge::new(a, b)?);
        }
        let mut adjacency = vec![Vec::new(); num_nodes];
        for e in &set {
            adjacency[e.lo].push(e.hi);
            adjacency[e.hi].push(e.lo);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Self {
            adjacency,
            num_edges: set.len(),
            features,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    /// Sorted neighbor list of `v`.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn has_edge(&self, e: Edge) -> bool {
        e.hi < self.num_nodes() && self.adjacency[e.lo].binary_search(&e.hi).is_ok()
    }

    /// Edges in canonical ascending order.
    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(a, list)| {
            list.iter()
                .filter(move |&&b| b > a)
                .map(move |&b| Edge { lo: a, hi: b })
        })
    }

    pub(crate) fn check_node(&self, v: usize) -> Result<()> {
        if v >= self.num_nodes() {
            return Err(Error::OutOfRange {
                node: v,
                num_nodes: self.num_nodes(),
            });
        }
        Ok(())
    }

    pub fn remove_edge(&self, e: Edge) -> Result<Self> {
        if !self.has_edge(e) {
            return Err(Error::MissingEdge(e.lo, e.hi));
        }
        let mut out = self.clone();
        out.adjacency[e.lo].retain(|&u| u != e.hi);
        out.adjacency[e.hi].retain(|&u| u != e.lo);
        out.num_edges -= 1;
        Ok(out)
    }

    /// Deletes every edge incident to `v`. The node itself stays (isolated),
    /// so matrix dimensions and node ids are preserved.
    pub fn remove_node(&self, v: usize) -> Result<Self> {
        self.check_node(v)?;
        let mut out = self.clone();
        let neighbors = std::mem::take(&mut out.adjacency[v]);
        for &u in &neighbors {
            out.adjacency[u].retain(|&w| w != v);
        }
        out.num_edges -= neighbors.len();
        Ok(out)
    }

    /// Copy with each feature row scaled to unit L1 norm (all-zero rows are kept).
    pub fn with_row_normalized_features(&self) -> Self {
        let mut out = self.clone();
        for mut row in out.features.rows_mut() {
            let norm: f64 = row.iter().map(|x| x.abs()).sum();
            if norm > 0.0 {
                row.mapv_inplace(|x| x / norm);
            }
        }
        out
    }

    /// Closed ball of radius `radius` around `sources`, ascending ids.
    pub fn ball(&self, sources: &[usize], radius: usize) -> Vec<usize> {
        let dist = self.distances(sources, radius);
        (0..dist.len()).filter(|&v| dist[v] != usize::MAX).collect()
    }

    /// BFS hop distance from the nearest source, `usize::MAX` beyond `radius`.
    pub fn distances(&self, sources: &[usize], radius: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.num_nodes()];
        let mut frontier: Vec<usize> = Vec::new();
        for &s in sources {
            if dist[s] == usize::MAX {
                dist[s] = 0;
                frontier.push(s);
            }
        }
        for depth in 1..=radius {
            let mut next = Vec::new();
            for &v in &frontier {
                for &u in &self.adjacency[v] {
                    if dist[u] == usize::MAX {
                        dist[u] = depth;
                        next.push(u);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        dist
    }
}

/// Neighborhood access shared by the full graph and cheap "one removal applied" views.
pub(crate) trait Topology {
    fn degree(&self, v: usize) -> usize;
    /// Visits neighbors of `v` in ascending order.
    fn for_each_neighbor(&self, v: usize, f: impl FnMut(usize));
}

impl Topology for AttributedGraph {
    fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    fn for_each_neighbor(&self, v: usize, mut f: impl FnMut(usize)) {
        self.adjacency[v].iter().for_each(|&u| f(u));
    }
}

/// Normalization weight `1/sqrt((d_a+1)(d_b+1))`. Every code path that builds
/// operator entries goes through here so local and global propagation agree bitwise.
#[inline]
pub(crate) fn normalized_weight(deg_a: usize, deg_b: usize) -> f64 {
    1.0 / (((deg_a + 1) * (deg_b + 1)) as f64).sqrt()
}

/// Writes row `v` of `S·prev` into `out`, visiting `N(v) ∪ {v}` in ascending id order.
pub(crate) fn propagate_row<'a, T: Topology>(
    topo: &T,
    v: usize,
    prev: impl Fn(usize) -> ArrayView1<'a, f64>,
    mut out: ArrayViewMut1<f64>,
) {
    out.fill(0.0);
    let dv = topo.degree(v);
    let mut self_done = false;
    let accumulate = |u: usize, out: &mut ArrayViewMut1<f64>| {
        let w = normalized_weight(dv, topo.degree(u));
        out.scaled_add(w, &prev(u));
    };
    topo.for_each_neighbor(v, |u| {
        if !self_done && u > v {
            accumulate(v, &mut out);
            self_done = true;
        }
        accumulate(u, &mut out);
    });
    if !self_done {
        accumulate(v, &mut out);
    }
}

/// `S = D̃^{-1/2}(A+I)D̃^{-1/2}` in compressed-row layout.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedOperator {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl NormalizedOperator {
    pub fn build(graph: &AttributedGraph) -> Self {
        let n = graph.num_nodes();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(2 * graph.num_edges() + n);
        let mut values = Vec::with_capacity(2 * graph.num_edges() + n);
        row_ptr.push(0);
        for v in 0..n {
            let dv = graph.degree(v);
            let mut self_done = false;
            for &u in graph.neighbors(v) {
                if !self_done && u > v {
                    col_idx.push(v);
                    values.push(normalized_weight(dv, dv));
                    self_done = true;
                }
                col_idx.push(u);
                values.push(normalized_weight(dv, graph.degree(u)));
            }
            if !self_done {
                col_idx.push(v);
                values.push(normalized_weight(dv, dv));
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column ids and values of row `i`, columns ascending.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|p| vals[p]).unwrap_or(0.0)
    }

    /// Sparse × dense product `S·Y`.
    pub fn apply(&self, y: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(y.raw_dim());
        for (i, mut out_row) in out.rows_mut().into_iter().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &w) in cols.iter().zip(vals) {
                out_row.scaled_add(w, &y.row(j));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.dim();
        let mut dense = Array2::zeros((n, n));
        for i in 0..n {
            let (cols, vals) = self.row(i);
            for (&j, &w) in cols.iter().zip(vals) {
                dense[[i, j]] = w;
            }
        }
        dense
    }
}

/// Propagated node representations `Z = S^k X`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub z: Array2<f64>,
    pub k: usize,
}

impl EmbeddingMatrix {
    pub fn row(&self, v: usize) -> ArrayView1<'_, f64> {
        self.z.row(v)
    }
}

/// `S^k X` as k sparse products; `S^k` is never formed.
pub fn propagate(graph: &AttributedGraph, k: usize) -> EmbeddingMatrix {
    let op = NormalizedOperator::build(graph);
    let mut z = graph.features().clone();
    for _ in 0..k {
        z = op.apply(&z);
    }
    EmbeddingMatrix { z, k }
}

/// Labels and the train/val/test node partition.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSplit {
    labels: Vec<Option<usize>>,
    num_classes: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    train_mask: Vec<bool>,
}

impl LabeledSplit {
    pub fn new(
        labels: Vec<Option<usize>>,
        num_classes: usize,
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let n = labels.len();
        if num_classes == 0 {
            return Err(Error::Validation("num_classes must be positive".into()));
        }
        if let Some((v, c)) = labels
            .iter()
            .enumerate()
            .find_map(|(v, l)| l.filter(|&c| c >= num_classes).map(|c| (v, c)))
        {
            return Err(Error::Validation(format!(
                "node {v} has label {c} outside [0, {num_classes})"
            )));
        }
        let mut seen = vec![None::<&str>; n];
        for (name, set) in [("train", &train), ("val", &val), ("test", &test)] {
            for &v in set {
                if v >= n {
                    return Err(Error::Validation(format!(
                        "{name} node {v} is out of range for {n} nodes"
                    )));
                }
                if let Some(prev) = seen[v] {
                    return Err(Error::Validation(format!(
                        "node {v} appears in both {prev} and {name}"
                    )));
                }
                seen[v] = Some(name);
                if labels[v].is_none() {
                    return Err(Error::Validation(format!("{name} node {v} has no label")));
                }
            }
        }
        let mut train_mask = vec![false; n];
        for &v in &train {
            train_mask[v] = true;
        }
        Ok(Self {
            labels,
            num_classes,
            train,
            val,
            test,
            train_mask,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// Label of a node that is known to be labeled (every split member is).
    pub fn label(&self, v: usize) -> usize {
        self.labels[v].expect("split member without a label")
    }

    pub fn is_train(&self, v: usize) -> bool {
        self.train_mask.get(v).copied().unwrap_or(false)
    }

    /// Same split with `v` dropped from the training set.
    pub fn without_train_node(&self, v: usize) -> Self {
        let mut out = self.clone();
        if out.is_train(v) {
            out.train.retain(|&u| u != v);
            out.train_mask[v] = false;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn path3() -> AttributedGraph {
        AttributedGraph::new(Array2::eye(3), [(0, 1), (1, 2)]).unwrap()
    }

    fn dense_normalized(graph: &AttributedGraph) -> Array2<f64> {
        let n = graph.num_nodes();
        let mut a = Array2::<f64>::eye(n);
        for e in graph.edges() {
            let (i, j) = e.endpoints();
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
        let d: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
        Array2::from_shape_fn((n, n), |(i, j)| a[[i, j]] / (d[i] * d[j]).sqrt())
    }

    #[test]
    fn path_operator_entries() {
        let s = NormalizedOperator::build(&path3());
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.408248).abs() < 1e-6);
        assert!((s.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.get(2, 2) - 0.5).abs() < 1e-15);
        assert_eq!(s.get(0, 2), 0.0);
    }

    #[test]
    fn isolated_nodes_give_identity() {
        let one = AttributedGraph::new(array![[2.0]], []).unwrap();
        assert_eq!(NormalizedOperator::build(&one).to_dense(), array![[1.0]]);
        let two = AttributedGraph::new(Array2::ones((2, 3)), []).unwrap();
        assert_eq!(NormalizedOperator::build(&two).to_dense(), Array2::<f64>::eye(2));
    }

    #[test]
    fn propagation_examples() {
        let g = path3();
        assert_eq!(propagate(&g, 0).z, Array2::<f64>::eye(3));
        let s = NormalizedOperator::build(&g).to_dense();
        let z1 = propagate(&g, 1).z;
        assert!((&z1 - &s).iter().all(|x| x.abs() < 1e-15));
        let z2 = propagate(&g, 2).z;
        assert!((z2[[0, 0]] - (0.25 + 1.0 / 6.0)).abs() < 1e-15);
        assert!((z2[[0, 0]] - 0.416667).abs() < 1e-6);
    }

    #[test]
    fn edge_list_is_canonicalised() {
        let g = AttributedGraph::new(Array2::eye(3), [(1, 0), (0, 1), (2, 1)]).unwrap();
        assert_eq!(g.num_edges(), 2);
        let edges: Vec<_> = g.edges().map(Edge::endpoints).collect();
        assert_eq!(edges, vec![(0, 1), (1, 2)]);
        assert!(matches!(
            AttributedGraph::new(Array2::eye(3), [(1, 1)]),
            Err(Error::SelfLoop(1))
        ));
        assert!(matches!(
            AttributedGraph::new(Array2::eye(3), [(0, 3)]),
            Err(Error::OutOfRange { node: 3, .. })
        ));
    }

    #[test]
    fn edge_removal_examples() {
        let g = path3();
        let g2 = g.remove_edge(Edge::new(2, 1).unwrap()).unwrap();
        assert_eq!(g2.edges().collect::<Vec<_>>(), vec![Edge::new(0, 1).unwrap()]);
        assert_eq!(g2.degree(2), 0);
        assert_eq!(g2.features(), g.features());

        let tri = AttributedGraph::new(Array2::eye(3), [(0, 1), (1, 2), (0, 2)]).unwrap();
        let path = tri.remove_edge(Edge::new(0, 1).unwrap()).unwrap();
        assert_eq!(path.neighbors(2), &[0, 1]);
        assert_eq!(path.num_edges(), 2);
        assert!(matches!(
            path.remove_edge(Edge::new(0, 1).unwrap()),
            Err(Error::MissingEdge(0, 1))
        ));
    }

    #[test]
    fn node_removal_examples() {
        let g = path3();
        let g2 = g.remove_node(2).unwrap();
        assert_eq!(g2.num_nodes(), 3);
        assert_eq!(g2.edges().collect::<Vec<_>>(), vec![Edge::new(0, 1).unwrap()]);

        let star = AttributedGraph::new(Array2::eye(5), (1..5).map(|l| (0, l))).unwrap();
        let bare = star.remove_node(0).unwrap();
        assert_eq!(bare.num_edges(), 0);
        assert!((0..5).all(|v| bare.degree(v) == 0));

        assert_eq!(bare.remove_node(3).unwrap(), bare);
        assert!(matches!(g.remove_node(3), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn row_normalization_is_opt_in() {
        let g = AttributedGraph::new(array![[1.0, 3.0], [0.0, 0.0]], []).unwrap();
        assert_eq!(g.features()[[0, 1]], 3.0);
        let n = g.with_row_normalized_features();
        assert_eq!(n.features(), &array![[0.25, 0.75], [0.0, 0.0]]);
    }

    #[test]
    fn split_validation() {
        let labels = vec![Some(0), Some(1), None];
        assert!(LabeledSplit::new(labels.clone(), 2, vec![0], vec![1], vec![]).is_ok());
        assert!(LabeledSplit::new(labels.clone(), 2, vec![0], vec![0], vec![]).is_err());
        assert!(LabeledSplit::new(labels.clone(), 2, vec![2], vec![], vec![]).is_err());
        assert!(LabeledSplit::new(labels, 1, vec![0], vec![], vec![]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_graph(max_nodes: usize) -> impl Strategy<Value = AttributedGraph> {
            (1..=max_nodes).prop_flat_map(|n| {
                let feats = proptest::collection::vec(-2.0f64..2.0, n * 3);
                let edges = proptest::collection::vec((0..n, 0..n), 0..(2 * n));
                (feats, edges).prop_map(move |(f, e)| {
                    let x = Array2::from_shape_vec((n, 3), f).unwrap();
                    AttributedGraph::new(x, e.into_iter().filter(|(a, b)| a != b)).unwrap()
                })
            })
        }

        proptest! {
            #[test]
            fn operator_is_symmetric_with_closed_neighborhood_support(g in arb_graph(20)) {
                let s = NormalizedOperator::build(&g);
                let dense = s.to_dense();
                prop_assert_eq!(&dense, &dense.t().to_owned());
                for i in 0..g.num_nodes() {
                    let (cols, vals) = s.row(i);
                    let mut expected: Vec<usize> = g.neighbors(i).to_vec();
                    expected.push(i);
                    expected.sort_unstable();
                    prop_assert_eq!(cols, &expected[..]);
                    prop_assert!(vals.iter().all(|&w| w > 0.0 && w <= 1.0));
                    prop_assert_eq!(s.get(i, i), 1.0 / (g.degree(i) + 1) as f64);
                }
                let reference = dense_normalized(&g);
                prop_assert!((&dense - &reference).iter().all(|x| x.abs() < 1e-15));
            }

            #[test]
            fn sparse_propagation_matches_dense_power(g in arb_graph(20), k in 0usize..5) {
                let s = dense_normalized(&g);
                let mut dense = g.features().clone();
                for _ in 0..k {
                    dense = s.dot(&dense);
                }
                let z = propagate(&g, k).z;
                let scale = dense.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
                for (a, b) in z.iter().zip(dense.iter()) {
                    prop_assert!((a - b).abs() <= 1e-12 * scale);
                }
            }

            #[test]
            fn node_removal_equals_sequential_edge_removal(g in arb_graph(15), pick in 0usize..15) {
                let v = pick % g.num_nodes();
                let mut seq = g.clone();
                for &u in g.neighbors(v) {
                    seq = seq.remove_edge(Edge::new(v, u).unwrap()).unwrap();
                }
                prop_assert_eq!(g.remove_node(v).unwrap(), seq);
            }
        }
    }
}
