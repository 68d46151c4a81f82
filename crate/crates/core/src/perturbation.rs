//! Exact representation change `Δ = Z' − Z` caused by removing one edge or one node.
//!
//! Propagation only carries information `k` hops, so rows outside the
//! `k`-ball around the edit are untouched. The default path recomputes `Z'`
//! on that ball only, reading inputs from the `2k`-ball. [`DeltaMode::Full`]
//! re-propagates the whole edited graph and serves as the slow reference.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{propagate, propagate_row, AttributedGraph, Edge, EmbeddingMatrix, LabeledSplit, Topology};

/// Rows whose largest absolute entry falls below this are treated as unchanged.
pub const ZERO_ROW_THRESHOLD: f64 = 1e-14;

/// A single removal acting on the graph or on the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Target {
    Edge(Edge),
    /// Node removal: all incident edges go, and its loss term if it is a training node.
    Node(usize),
    /// Drops a training node's loss term but leaves the graph untouched.
    Sample(usize),
}

impl Target {
    pub fn kind(&self) -> &'static str {
        match self {
            Target::Edge(_) => "edge",
            Target::Node(_) => "node",
            Target::Sample(_) => "sample",
        }
    }

    /// `(a, b)` columns for reports; `b` is empty for node-like targets.
    pub fn columns(&self) -> (usize, Option<usize>) {
        match *self {
            Target::Edge(e) => {
                let (a, b) = e.endpoints();
                (a, Some(b))
            }
            Target::Node(v) | Target::Sample(v) => (v, None),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Edge(e) => write!(f, "edge {e}"),
            Target::Node(v) => write!(f, "node {v}"),
            Target::Sample(v) => write!(f, "sample {v}"),
        }
    }
}

/// Sparse set of non-zero rows of `Δ`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationDelta {
    pub target: Target,
    pub k: usize,
    pub rows: BTreeMap<usize, Array1<f64>>,
}

impl PerturbationDelta {
    pub fn is_zero(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    /// Nodes that can possibly change: the edge endpoints, or the node and its neighbors.
    pub fn sources(graph: &AttributedGraph, target: Target) -> Vec<usize> {
        match target {
            Target::Edge(e) => {
                let (a, b) = e.endpoints();
                vec![a, b]
            }
            Target::Node(v) => {
                let mut s = graph.neighbors(v).to_vec();
                s.push(v);
                s.sort_unstable();
                s
            }
            Target::Sample(_) => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DeltaMode {
    #[default]
    Local,
    Full,
}

/// Graph view with one edge or one node's edges hidden.
struct EditedView<'g> {
    graph: &'g AttributedGraph,
    removal: Target,
}

impl EditedView<'_> {
    fn hides(&self, v: usize, u: usize) -> bool {
        match self.removal {
            Target::Edge(e) => e.contains(v) && e.contains(u),
            Target::Node(i) => v == i || u == i,
            Target::Sample(_) => false,
        }
    }
}

impl Topology for EditedView<'_> {
    fn degree(&self, v: usize) -> usize {
        match self.removal {
            Target::Edge(e) if e.contains(v) => self.graph.degree(v) - 1,
            Target::Node(i) if v == i => 0,
            Target::Node(i) if self.graph.neighbors(v).binary_search(&i).is_ok() => {
                self.graph.degree(v) - 1
            }
            _ => self.graph.degree(v),
        }
    }

    fn for_each_neighbor(&self, v: usize, mut f: impl FnMut(usize)) {
        for &u in self.graph.neighbors(v) {
            if !self.hides(v, u) {
                f(u);
            }
        }
    }
}

/// Computes perturbation deltas against a fixed original embedding.
#[derive(Clone, Debug)]
pub struct DeltaContext<'g> {
    graph: &'g AttributedGraph,
    embedding: EmbeddingMatrix,
    mode: DeltaMode,
}

impl<'g> DeltaContext<'g> {
    pub fn new(graph: &'g AttributedGraph, k: usize) -> Self {
        Self::with_embedding(graph, propagate(graph, k))
    }

    pub fn with_embedding(graph: &'g AttributedGraph, embedding: EmbeddingMatrix) -> Self {
        Self {
            graph,
            embedding,
            mode: DeltaMode::Local,
        }
    }

    pub fn mode(mut self, mode: DeltaMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn graph(&self) -> &'g AttributedGraph {
        self.graph
    }

    pub fn embedding(&self) -> &EmbeddingMatrix {
        &self.embedding
    }

    pub fn k(&self) -> usize {
        self.embedding.k
    }

    pub fn edge_removal(&self, e: Edge) -> Result<PerturbationDelta> {
        if !self.graph.has_edge(e) {
            let (a, b) = e.endpoints();
            return Err(crate::Error::MissingEdge(a, b));
        }
        Ok(self.compute(Target::Edge(e)))
    }

    pub fn node_removal(&self, v: usize) -> Result<PerturbationDelta> {
        self.graph.check_node(v)?;
        Ok(self.compute(Target::Node(v)))
    }

    /// Delta for any target; sample removals never change representations.
    pub fn for_target(&self, target: Target) -> Result<PerturbationDelta> {
        match target {
            Target::Edge(e) => self.edge_removal(e),
            Target::Node(v) => self.node_removal(v),
            Target::Sample(v) => {
                self.graph.check_node(v)?;
                Ok(PerturbationDelta {
                    target,
                    k: self.k(),
                    rows: BTreeMap::new(),
                })
            }
        }
    }

    fn compute(&self, target: Target) -> PerturbationDelta {
        let k = self.k();
        let mut rows = BTreeMap::new();
        if k > 0 {
            let sources = PerturbationDelta::sources(self.graph, target);
            let candidates = self.graph.ball(&sources, k);
            let edited = match self.mode {
                DeltaMode::Local => self.local_rows(target, &sources, &candidates),
                DeltaMode::Full => self.full_rows(target, &candidates),
            };
            for (v, new_row) in candidates.into_iter().zip(edited) {
                let delta = &new_row - &self.embedding.row(v);
                if delta.iter().any(|x| x.abs() >= ZERO_ROW_THRESHOLD) {
                    rows.insert(v, delta);
                }
            }
        }
        PerturbationDelta { target, k, rows }
    }

    /// Rows of `Z'` for `candidates`, recomputed on the `2k`-ball only.
    fn local_rows(&self, target: Target, sources: &[usize], candidates: &[usize]) -> Vec<Array1<f64>> {
        let k = self.k();
        let view = EditedView {
            graph: self.graph,
            removal: target,
        };
        let dim = self.graph.feature_dim();
        // distances from the sources decide which rows are still needed at each hop
        let dist = self.graph.distances(sources, 2 * k);
        let region: Vec<usize> = (0..dist.len()).filter(|&v| dist[v] != usize::MAX).collect();
        let mut slot = vec![usize::MAX; self.graph.num_nodes()];
        for (p, &v) in region.iter().enumerate() {
            slot[v] = p;
        }
        let mut prev = Array2::zeros((region.len(), dim));
        for (p, &v) in region.iter().enumerate() {
            prev.row_mut(p).assign(&self.graph.features().row(v));
        }
        for hop in 1..=k {
            let reach = 2 * k - hop;
            let mut next = Array2::zeros((region.len(), dim));
            for (p, &v) in region.iter().enumerate() {
                if dist[v] <= reach {
                    propagate_row(&view, v, |u| prev.row(slot[u]), next.row_mut(p));
                }
            }
            prev = next;
        }
        candidates.iter().map(|&v| prev.row(slot[v]).to_owned()).collect()
    }

    fn full_rows(&self, target: Target, candidates: &[usize]) -> Vec<Array1<f64>> {
        let edited = match target {
            Target::Edge(e) => self.graph.remove_edge(e).expect("edge checked by caller"),
            Target::Node(v) => self.graph.remove_node(v).expect("node checked by caller"),
            Target::Sample(_) => self.graph.clone(),
        };
        let z = propagate(&edited, self.k()).z;
        candidates.iter().map(|&v| z.row(v).to_owned()).collect()
    }

    /// Reference delta over every row: full re-propagation, then subtraction.
    pub fn dense_reference(&self, target: Target) -> Result<Array2<f64>> {
        let edited = match target {
            Target::Edge(e) => self.graph.remove_edge(e)?,
            Target::Node(v) => self.graph.remove_node(v)?,
            Target::Sample(_) => self.graph.clone(),
        };
        Ok(propagate(&edited, self.k()).z - &self.embedding.z)
    }
}

pub fn delta_edge_removal(graph: &AttributedGraph, k: usize, e: Edge) -> Result<PerturbationDelta> {
    DeltaContext::new(graph, k).edge_removal(e)
}

pub fn delta_node_removal(graph: &AttributedGraph, k: usize, v: usize) -> Result<PerturbationDelta> {
    DeltaContext::new(graph, k).node_removal(v)
}

/// Training nodes whose representation changes.
pub fn affected_training_nodes(delta: &PerturbationDelta, split: &LabeledSplit) -> BTreeSet<usize> {
    delta.support().filter(|&v| split.is_train(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn path3() -> AttributedGraph {
        AttributedGraph::new(Array2::eye(3), [(0, 1), (1, 2)]).unwrap()
    }

    fn close(a: &Array1<f64>, b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn path_edge_removal_rows() {
        let g = path3();
        let d = delta_edge_removal(&g, 1, Edge::new(1, 2).unwrap()).unwrap();
        let r6 = 1.0 / 6f64.sqrt();
        assert_eq!(d.rows.len(), 3);
        assert!(close(&d.rows[&0], &[0.0, 0.5 - r6, 0.0]));
        assert!((d.rows[&0][1] - 0.091752).abs() < 1e-6);
        assert!(close(&d.rows[&1], &[0.5 - r6, 0.5 - 1.0 / 3.0, -r6]));
        assert!(close(&d.rows[&2], &[0.0, -r6, 0.5]));
    }

    #[test]
    fn disjoint_component_is_untouched() {
        let edges = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)];
        let g = AttributedGraph::new(Array2::eye(6), edges).unwrap();
        let d = delta_edge_removal(&g, 1, Edge::new(0, 1).unwrap()).unwrap();
        assert!(d.support().all(|v| v < 3));
        assert!(!d.is_zero());
    }

    #[test]
    fn zero_hops_never_change() {
        let g = path3();
        assert!(delta_edge_removal(&g, 0, Edge::new(0, 1).unwrap()).unwrap().is_zero());
        assert!(delta_node_removal(&g, 0, 1).unwrap().is_zero());
    }

    #[test]
    fn missing_edge_and_bad_node() {
        let g = path3();
        assert!(matches!(
            delta_edge_removal(&g, 1, Edge::new(0, 2).unwrap()),
            Err(crate::Error::MissingEdge(0, 2))
        ));
        assert!(matches!(
            delta_node_removal(&g, 1, 7),
            Err(crate::Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn degree_one_node_matches_its_edge() {
        let g = path3();
        let by_node = delta_node_removal(&g, 1, 2).unwrap();
        let by_edge = delta_edge_removal(&g, 1, Edge::new(1, 2).unwrap()).unwrap();
        assert_eq!(by_node.rows, by_edge.rows);
    }

    #[test]
    fn isolated_node_removal_is_zero() {
        let g = AttributedGraph::new(Array2::eye(3), [(0, 1)]).unwrap();
        assert!(delta_node_removal(&g, 2, 2).unwrap().is_zero());
    }

    #[test]
    fn star_center_removal_touches_every_leaf() {
        let g = AttributedGraph::new(Array2::eye(5), (1..5).map(|l| (0, l))).unwrap();
        let ctx = DeltaContext::new(&g, 1);
        let d = ctx.node_removal(0).unwrap();
        let dense = ctx.dense_reference(Target::Node(0)).unwrap();
        for leaf in 1..5 {
            assert!(d.rows.contains_key(&leaf));
            assert!(close(&d.rows[&leaf], dense.row(leaf).as_slice().unwrap()));
        }
    }

    #[test]
    fn affected_training_examples() {
        let g = path3();
        let d = delta_edge_removal(&g, 1, Edge::new(1, 2).unwrap()).unwrap();
        let labels = vec![Some(0), Some(1), Some(0)];
        let only0 = LabeledSplit::new(labels.clone(), 2, vec![0], vec![1], vec![2]).unwrap();
        assert_eq!(affected_training_nodes(&d, &only0), BTreeSet::from([0]));
        let all = LabeledSplit::new(labels, 2, vec![0, 1, 2], vec![], vec![]).unwrap();
        assert_eq!(affected_training_nodes(&d, &all), BTreeSet::from([0, 1, 2]));
        let zero = delta_edge_removal(&g, 0, Edge::new(1, 2).unwrap()).unwrap();
        assert!(affected_training_nodes(&zero, &all).is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_case() -> impl Strategy<Value = (AttributedGraph, usize, usize)> {
            (2usize..=30, 1usize..=3, any::<usize>()).prop_flat_map(|(n, k, pick)| {
                let feats = proptest::collection::vec(-1.0f64..1.0, n * 4);
                let edges = proptest::collection::vec((0..n, 0..n), 1..(3 * n));
                (feats, edges).prop_map(move |(f, e)| {
                    let x = Array2::from_shape_vec((n, 4), f).unwrap();
                    let g = AttributedGraph::new(x, e.into_iter().filter(|(a, b)| a != b)).unwrap();
                    (g, k, pick)
                })
            })
        }

        fn check(ctx: &DeltaContext, target: Target) -> std::result::Result<(), TestCaseError> {
            let d = ctx.for_target(target).unwrap();
            let dense = ctx.dense_reference(target).unwrap();
            let allowed = ctx
                .graph()
                .ball(&PerturbationDelta::sources(ctx.graph(), target), ctx.k());
            for v in 0..ctx.graph().num_nodes() {
                match d.rows.get(&v) {
                    Some(row) => {
                        prop_assert!(allowed.binary_search(&v).is_ok());
                        for (a, b) in row.iter().zip(dense.row(v)) {
                            prop_assert!((a - b).abs() <= 1e-12);
                        }
                    }
                    None => prop_assert!(dense.row(v).iter().all(|x| x.abs() <= 1e-12)),
                }
            }
            let full = ctx.clone().mode(DeltaMode::Full).for_target(target).unwrap();
            prop_assert_eq!(&d.rows, &full.rows);
            Ok(())
        }

        proptest! {
            #[test]
            fn local_delta_matches_dense_recomputation((g, k, pick) in arb_case()) {
                let ctx = DeltaContext::new(&g, k);
                let edges: Vec<Edge> = g.edges().collect();
                if !edges.is_empty() {
                    check(&ctx, Target::Edge(edges[pick % edges.len()]))?;
                }
                check(&ctx, Target::Node(pick % g.num_nodes()))?;
            }
        }
    }
}
