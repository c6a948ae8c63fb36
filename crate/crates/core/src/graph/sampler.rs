//! Mini-batch subgraph sampling.
//!
//! The default sampler is layer-dependent importance sampling. Starting from
//! the target set `S`, each round scores every frontier node `j` (a neighbour
//! of `S` not yet in `S`) by the squared column norm of the symmetrically
//! normalised adjacency restricted to the rows in `S`,
//! `w_j = Σ_{i ∈ S, i ~ j} 1 / (deg_i · deg_j)`, and draws up to `budget`
//! frontier nodes without replacement with probability proportional to
//! `w_j`. The result is the subgraph induced by every node collected.
//!
//! `SamplerKind::Neighborhood` instead takes a uniform draw of at most
//! `budget` frontier nodes per round and is meant for debugging.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[default]
    Ladies,
    Neighborhood,
}

/// Importance sampler; see the module docs.
///
/// Returns the induced subgraph and `remap[local] = original`. The distinct
/// targets occupy local ids `0..k` in their first-occurrence order.
pub fn sample_subgraph(
    graph: &Graph,
    targets: &[usize],
    layers: usize,
    budget_per_layer: usize,
    seed: u64,
) -> Result<(Graph, Vec<usize>)> {
    sample_subgraph_with(SamplerKind::Ladies, graph, targets, layers, budget_per_layer, seed)
}

pub fn sample_subgraph_with(
    kind: SamplerKind,
    graph: &Graph,
    targets: &[usize],
    layers: usize,
    budget_per_layer: usize,
    seed: u64,
) -> Result<(Graph, Vec<usize>)> {
    if targets.is_empty() {
        return Err(Error::Argument("subgraph sampling needs at least one target".into()));
    }
    let n = graph.num_nodes();
    let mut members: HashSet<usize> = HashSet::with_capacity(targets.len() * 4);
    let mut order = Vec::with_capacity(targets.len() * 4);
    for &t in targets {
        if t >= n {
            return Err(Error::Argument(format!("target {t} outside 0..{n}")));
        }
        if members.insert(t) {
            order.push(t);
        }
    }
    let mut rng = rng::stream(seed, "subgraph", 0);
    for _ in 0..layers {
        // Sorted map keeps the draw order independent of hashing.
        let mut frontier: BTreeMap<usize, f64> = BTreeMap::new();
        for &i in &order {
            let di = graph.degree(i) as f64;
            for &j in graph.neighbors(i) {
                if !members.contains(&j) {
                    *frontier.entry(j).or_insert(0.0) += 1.0 / (di * graph.degree(j) as f64);
                }
            }
        }
        if frontier.is_empty() {
            break;
        }
        let chosen: Vec<usize> = if frontier.len() <= budget_per_layer {
            frontier.keys().copied().collect()
        } else {
            match kind {
                SamplerKind::Ladies => weighted_without_replacement(&frontier, budget_per_layer, &mut rng),
                SamplerKind::Neighborhood => {
                    let keys: Vec<usize> = frontier.keys().copied().collect();
                    keys.choose_multiple(&mut rng, budget_per_layer).copied().collect()
                }
            }
        };
        for j in chosen {
            if members.insert(j) {
                order.push(j);
            }
        }
    }
    let sub = graph.induced_subgraph(&order)?;
    Ok((sub, order))
}

/// Efraimidis–Spirakis: keep the `k` largest `ln(u) / w`.
fn weighted_without_replacement(weights: &BTreeMap<usize, f64>, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .map(|(&j, &w)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / w, j)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, j)| j).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ultradp_autodiff::Tensor;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        let f = Tensor::new(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        Graph::from_edges(edges, f, None).unwrap()
    }

    #[test]
    fn saturated_budget_returns_whole_graph() {
        let edges: Vec<_> = (0..9).map(|i| (i, i + 1)).chain([(0, 5), (2, 7)]).collect();
        let g = graph(10, &edges);
        let all: Vec<usize> = (0..10).collect();
        let (s, remap) = sample_subgraph(&g, &all, 2, 10, 1).unwrap();
        assert_eq!(remap, all);
        assert_eq!(s, g);
    }

    #[test]
    fn isolated_target() {
        let g = graph(3, &[(0, 1)]);
        let (s, remap) = sample_subgraph(&g, &[2], 3, 5, 0).unwrap();
        assert_eq!(remap, vec![2]);
        assert_eq!(s.num_nodes(), 1);
        assert_eq!(s.num_edges(), 0);
    }

    #[test]
    fn triangle_budget_one() {
        let g = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let mut outcomes = HashSet::new();
        for seed in 0..64 {
            let (s, remap) = sample_subgraph(&g, &[0], 1, 1, seed).unwrap();
            assert_eq!(s.num_nodes(), 2);
            assert_eq!(s.num_edges(), 1);
            assert_eq!(remap[0], 0);
            assert!(remap[1] == 1 || remap[1] == 2);
            outcomes.insert(remap[1]);
        }
        assert_eq!(outcomes.len(), 2);
    }

    #[test]
    fn empty_targets() {
        let g = graph(3, &[(0, 1)]);
        assert!(matches!(sample_subgraph(&g, &[], 1, 1, 0), Err(Error::Argument(_))));
        assert!(matches!(sample_subgraph(&g, &[3], 1, 1, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn neighborhood_fallback_keeps_targets() {
        let edges: Vec<_> = (0..19).map(|i| (i, i + 1)).collect();
        let g = graph(20, &edges);
        let (s, remap) = sample_subgraph_with(SamplerKind::Neighborhood, &g, &[4, 15], 2, 1, 9).unwrap();
        assert_eq!(&remap[..2], &[4, 15]);
        assert!(s.num_nodes() <= 6);
    }
}
