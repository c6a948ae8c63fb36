//! The graph data model.
//!
//! A [`Graph`] is an undirected simple graph in CSR form plus a dense feature
//! matrix and optional class labels. Construction normalises the edge list:
//! both directions are stored, duplicates and self-loops are dropped, and
//! each adjacency row is sorted. Layers that want a self-connection add it
//! themselves.

mod io;
mod sampler;
mod split;

use std::collections::HashMap;

use ultradp_autodiff::Tensor;

use crate::error::{Error, Result};

pub use io::{load_graph, read_features, read_labels, write_edges, write_features, write_graph, write_labels};
pub use sampler::{sample_subgraph, sample_subgraph_with, SamplerKind};
pub use split::{make_split, sample_kshot, ClassDeficit, KShotSample, SplitSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    offsets: Vec<usize>,
    targets: Vec<usize>,
    features: Tensor,
    labels: Option<Vec<usize>>,
    num_classes: Option<usize>,
}

impl Graph {
    /// Builds a graph on `features.rows()` nodes from an arbitrary edge list.
    pub fn from_edges(
        edges: &[(usize, usize)],
        features: Tensor,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = features.rows();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::MalformedInput(format!(
                    "edge ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            if a != b {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        Self::from_adjacency(adj, features, labels)
    }

    fn from_adjacency(
        mut adj: Vec<Vec<usize>>,
        features: Tensor,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = features.rows();
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut targets = Vec::new();
        for row in &mut adj {
            row.sort_unstable();
            row.dedup();
            targets.extend_from_slice(row);
            offsets.push(targets.len());
        }
        let num_classes = match &labels {
            Some(l) if l.len() != n => {
                return Err(Error::Dimension(format!("{} labels for {n} nodes", l.len())));
            }
            Some(l) => Some(l.iter().max().map_or(0, |m| m + 1)),
            None => None,
        };
        Ok(Self { offsets, targets, features, labels, num_classes })
    }

    /// Overrides the class count, which must cover every label.
    pub fn with_num_classes(mut self, c: usize) -> Result<Self> {
        if let Some(l) = &self.labels {
            if let Some(&bad) = l.iter().find(|&&x| x >= c) {
                return Err(Error::Argument(format!("label {bad} outside 0..{c}")));
            }
        }
        self.num_classes = Some(c);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.targets.len() / 2
    }

    pub fn csr_offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn csr_targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes()).map(|v| self.degree(v)).collect()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors(a).binary_search(&b).is_ok()
    }

    /// Each undirected edge once, as `(low, high)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes())
            .flat_map(move |a| self.neighbors(a).iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    /// The subgraph induced by `nodes`; local id `i` is `nodes[i]`.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Graph> {
        let mut local = HashMap::with_capacity(nodes.len());
        for (i, &v) in nodes.iter().enumerate() {
            if v >= self.num_nodes() {
                return Err(Error::Argument(format!("node {v} out of range")));
            }
            if local.insert(v, i).is_some() {
                return Err(Error::Argument(format!("node {v} listed twice")));
            }
        }
        let d = self.feature_dim();
        let mut feats = Vec::with_capacity(nodes.len() * d);
        let mut adj = Vec::with_capacity(nodes.len());
        for &v in nodes {
            feats.extend_from_slice(self.features.row_slice(v));
            adj.push(self.neighbors(v).iter().filter_map(|u| local.get(u).copied()).collect());
        }
        let features = Tensor::new(nodes.len(), d, feats)?;
        let labels = self.labels.as_ref().map(|l| nodes.iter().map(|&v| l[v]).collect());
        let mut g = Self::from_adjacency(adj, features, labels)?;
        g.num_classes = self.num_classes;
        Ok(g)
    }

    /// The same graph with some undirected edges removed.
    pub fn without_edges(&self, removed: &[(usize, usize)]) -> Result<Graph> {
        let drop: std::collections::HashSet<(usize, usize)> =
            removed.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        let kept: Vec<(usize, usize)> = self.edges().filter(|e| !drop.contains(e)).collect();
        let mut g = Self::from_edges(&kept, self.features.clone(), self.labels.clone())?;
        g.num_classes = self.num_classes;
        Ok(g)
    }

    /// Appends `extra` nodes with the given features and undirected edges to
    /// existing nodes. Existing adjacency rows gain only the new edges.
    pub(crate) fn with_appended_nodes(&self, extra_features: &Tensor, attach: &[(usize, usize)]) -> Result<Graph> {
        let n = self.num_nodes();
        let d = self.feature_dim();
        if extra_features.cols() != d {
            return Err(Error::Dimension(format!(
                "appended features have width {}, graph has {d}",
                extra_features.cols()
            )));
        }
        let total = n + extra_features.rows();
        let mut adj: Vec<Vec<usize>> = (0..n).map(|v| self.neighbors(v).to_vec()).collect();
        adj.resize(total, Vec::new());
        for &(a, b) in attach {
            if a >= total || b >= total || a == b {
                return Err(Error::Argument(format!("cannot attach ({a}, {b})")));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(extra_features.data());
        let features = Tensor::new(total, d, data)?;
        Self::from_adjacency(adj, features, None)
    }

    /// Checks the structural invariants; used by tests and loaders.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.features.rows() != n {
            return Err(Error::Dimension("feature rows differ from node count".into()));
        }
        for v in 0..n {
            let row = self.neighbors(v);
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::MalformedInput(format!("row {v} not strictly sorted")));
            }
            for &u in row {
                if u == v {
                    return Err(Error::MalformedInput(format!("self-loop at {v}")));
                }
                if u >= n || !self.has_edge(u, v) {
                    return Err(Error::MalformedInput(format!("edge ({v}, {u}) not symmetric")));
                }
            }
        }
        if let (Some(l), Some(c)) = (&self.labels, self.num_classes) {
            if l.iter().any(|&x| x >= c) {
                return Err(Error::MalformedInput("label outside class range".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(n: usize) -> Tensor {
        Tensor::zeros(n, 1)
    }

    #[test]
    fn single_edge_is_symmetrised() {
        let g = Graph::from_edges(&[(0, 1)], feats(2), None).unwrap();
        assert_eq!(g.csr_offsets(), &[0, 1, 2]);
        assert_eq!(g.csr_targets(), &[1, 0]);
    }

    #[test]
    fn duplicates_and_self_loops_are_dropped() {
        let a = Graph::from_edges(&[(0, 1)], feats(2), None).unwrap();
        let b = Graph::from_edges(&[(0, 1), (1, 0), (0, 0)], feats(2), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn path_degrees() {
        let g = Graph::from_edges(&[(0, 1), (1, 2)], feats(3), None).unwrap();
        assert_eq!(g.degrees(), vec![1, 2, 1]);
        g.validate().unwrap();
    }

    #[test]
    fn out_of_range_edge() {
        let r = Graph::from_edges(&[(0, 5)], feats(2), None);
        assert!(matches!(r, Err(Error::MalformedInput(_))));
    }

    #[test]
    fn label_count_mismatch() {
        let r = Graph::from_edges(&[(0, 1)], feats(2), Some(vec![0]));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn induced_subgraph_relabels() {
        let g = Graph::from_edges(&[(0, 1), (1, 2), (2, 3)], feats(4), Some(vec![0, 1, 0, 1])).unwrap();
        let s = g.induced_subgraph(&[2, 1]).unwrap();
        assert_eq!(s.num_nodes(), 2);
        assert_eq!(s.neighbors(0), &[1]);
        assert_eq!(s.labels().unwrap(), &[0, 1]);
        assert_eq!(s.num_classes(), Some(2));
    }
}
