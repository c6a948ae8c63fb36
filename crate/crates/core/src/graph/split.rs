//! 70/10/10/10 node splits and K-shot sampling.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::rng;

/// Disjoint pre-training, training, validation and test pools.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub pretrain_nodes: Vec<usize>,
    pub train_pool: Vec<usize>,
    pub val_pool: Vec<usize>,
    pub test_nodes: Vec<usize>,
}

/// Sizes are `⌊0.7n⌋ / ⌊0.1n⌋ / ⌊0.1n⌋ / rest`; flooring leftovers go to test.
pub fn make_split(graph: &Graph, seed: u64) -> Result<SplitSpec> {
    let n = graph.num_nodes();
    if n < 10 {
        return Err(Error::Argument(format!("a split needs at least 10 nodes, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split", 0));
    let pre = n * 7 / 10;
    let tenth = n / 10;
    let mut rest = order.split_off(pre);
    let pretrain_nodes = order;
    let mut val_and_test = rest.split_off(tenth);
    let train_pool = rest;
    let test_nodes = val_and_test.split_off(tenth);
    let val_pool = val_and_test;
    Ok(SplitSpec { pretrain_nodes, train_pool, val_pool, test_nodes })
}

/// A class that had fewer than K candidates in a pool.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDeficit {
    pub pool: String,
    pub class: usize,
    pub available: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KShotSample {
    pub shot: usize,
    pub train_nodes: Vec<usize>,
    pub val_nodes: Vec<usize>,
    pub seed: u64,
    pub deficits: Vec<ClassDeficit>,
}

fn per_class(
    pool: &[usize],
    labels: &[usize],
    classes: usize,
    k: usize,
    seed: u64,
    name: &str,
    deficits: &mut Vec<ClassDeficit>,
) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &v in pool {
        by_class[labels[v]].push(v);
    }
    let mut out = Vec::new();
    for (c, mut members) in by_class.into_iter().enumerate() {
        members.sort_unstable();
        if members.len() < k {
            log::warn!("{name} pool has {} nodes of class {c}, fewer than K={k}", members.len());
            deficits.push(ClassDeficit { pool: name.to_string(), class: c, available: members.len() });
            out.extend(members);
        } else {
            let mut rng = rng::stream(seed, name, c as u64);
            out.extend(members.choose_multiple(&mut rng, k).copied());
        }
    }
    out
}

/// Draws K nodes per class from the training pool and, through a separate
/// stream of the same seed, K per class from the validation pool.
pub fn sample_kshot(split: &SplitSpec, graph: &Graph, k: usize, seed: u64) -> Result<KShotSample> {
    let labels = graph
        .labels()
        .ok_or_else(|| Error::Config("K-shot sampling needs node labels".into()))?;
    let classes = graph.num_classes().unwrap_or(0);
    let mut deficits = Vec::new();
    let train_nodes = per_class(&split.train_pool, labels, classes, k, seed, "kshot-train", &mut deficits);
    let val_nodes = per_class(&split.val_pool, labels, classes, k, seed, "kshot-val", &mut deficits);
    Ok(KShotSample { shot: k, train_nodes, val_nodes, seed, deficits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use ultradp_autodiff::Tensor;

    fn empty(n: usize, labels: Option<Vec<usize>>) -> Graph {
        Graph::from_edges(&[], Tensor::zeros(n, 1), labels).unwrap()
    }

    fn sizes(s: &SplitSpec) -> [usize; 4] {
        [s.pretrain_nodes.len(), s.train_pool.len(), s.val_pool.len(), s.test_nodes.len()]
    }

    #[test]
    fn hundred_nodes() {
        let s = make_split(&empty(100, None), 3).unwrap();
        assert_eq!(sizes(&s), [70, 10, 10, 10]);
    }

    #[test]
    fn remainder_goes_to_test() {
        let s = make_split(&empty(103, None), 3).unwrap();
        assert_eq!(sizes(&s), [72, 10, 10, 11]);
        let all: HashSet<usize> = s
            .pretrain_nodes
            .iter()
            .chain(&s.train_pool)
            .chain(&s.val_pool)
            .chain(&s.test_nodes)
            .copied()
            .collect();
        assert_eq!(all.len(), 103);
    }

    #[test]
    fn split_is_deterministic() {
        let g = empty(50, None);
        assert_eq!(make_split(&g, 11).unwrap(), make_split(&g, 11).unwrap());
        assert_ne!(make_split(&g, 11).unwrap(), make_split(&g, 12).unwrap());
    }

    #[test]
    fn too_small() {
        assert!(make_split(&empty(9, None), 0).is_err());
    }

    #[test]
    fn kshot_counts() {
        let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let g = empty(300, Some(labels));
        let s = make_split(&g, 1).unwrap();
        let k = sample_kshot(&s, &g, 8, 5).unwrap();
        assert_eq!(k.train_nodes.len(), 24);
        assert_eq!(k.val_nodes.len(), 24);
        assert!(k.deficits.is_empty());
        assert_eq!(k, sample_kshot(&s, &g, 8, 5).unwrap());
    }

    #[test]
    fn kshot_clamps_small_classes() {
        // pools {class0: {a, b}, class1: {c}}
        let g = empty(4, Some(vec![0, 0, 1, 1]));
        let split = SplitSpec {
            pretrain_nodes: vec![],
            train_pool: vec![0, 1, 2],
            val_pool: vec![3],
            test_nodes: vec![],
        };
        let mut seen = HashSet::new();
        for seed in 0..40 {
            let k = sample_kshot(&split, &g, 1, seed).unwrap();
            let mut t = k.train_nodes.clone();
            t.sort_unstable();
            assert!(t == vec![0, 2] || t == vec![1, 2], "{t:?}");
            seen.insert(t);
            assert_eq!(k.val_nodes, vec![3]);
            assert_eq!(k.deficits.len(), 1);
        }
        assert_eq!(seen.len(), 2, "both draws should occur");

        let k = sample_kshot(&split, &g, 5, 0).unwrap();
        let mut t = k.train_nodes;
        t.sort_unstable();
        assert_eq!(t, vec![0, 1, 2]);
    }

    #[test]
    fn kshot_without_labels() {
        let g = empty(20, None);
        let s = make_split(&g, 0).unwrap();
        assert!(matches!(sample_kshot(&s, &g, 2, 0), Err(Error::Config(_))));
    }
}
