//! Self-supervised tasks: edge prediction, reachability k-NN and an optional
//! two-view contrastive task.
//!
//! Similarities are cosines and distances are `D = 1 − S`. Batch losses are
//! means over batch elements.

use std::fmt;
use std::rc::Rc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use ultradp_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::reach::ReachabilityCache;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Edge,
    Knn,
    Cl,
}

impl TaskKind {
    pub fn key(self) -> &'static str {
        match self {
            TaskKind::Edge => "edge",
            TaskKind::Knn => "knn",
            TaskKind::Cl => "cl",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge" => Ok(TaskKind::Edge),
            "knn" => Ok(TaskKind::Knn),
            "cl" => Ok(TaskKind::Cl),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

// ---- edge prediction ----

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeBatch {
    /// `(v, v⁺, v⁻)`.
    pub triplets: Vec<(usize, usize, usize)>,
    pub margin: f64,
}

pub fn sample_edge_batch(graph: &Graph, batch_size: usize, seed: u64) -> Result<EdgeBatch> {
    let all: Vec<usize> = (0..graph.num_nodes()).collect();
    sample_edge_batch_from(graph, &all, batch_size, seed)
}

/// Draws `v` uniformly from the members of `pool` that have at least one
/// neighbour and at least one non-neighbour.
pub fn sample_edge_batch_from(graph: &Graph, pool: &[usize], batch_size: usize, seed: u64) -> Result<EdgeBatch> {
    let n = graph.num_nodes();
    if graph.num_edges() == 0 {
        return Err(Error::Sampling("edge prediction needs at least one edge".into()));
    }
    let eligible: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&v| v < n && graph.degree(v) >= 1 && graph.degree(v) + 1 < n)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Sampling("no node has both a neighbour and a non-neighbour".into()));
    }
    let mut rng = rng::stream(seed, "edge-batch", 0);
    let mut triplets = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let v = eligible[rng.gen_range(0..eligible.len())];
        let nb = graph.neighbors(v);
        let pos = nb[rng.gen_range(0..nb.len())];
        let neg = sample_non_neighbor(graph, v, &mut rng);
        triplets.push((v, pos, neg));
    }
    Ok(EdgeBatch { triplets, margin: 0.5 })
}

fn sample_non_neighbor(graph: &Graph, v: usize, rng: &mut impl Rng) -> usize {
    let n = graph.num_nodes();
    for _ in 0..64 {
        let u = rng.gen_range(0..n);
        if u != v && !graph.has_edge(v, u) {
            return u;
        }
    }
    let candidates: Vec<usize> = (0..n).filter(|&u| u != v && !graph.has_edge(v, u)).collect();
    candidates[rng.gen_range(0..candidates.len())]
}

/// Mean over rows of `−S(h, h⁺) + max(0, S(h, h⁻) − α)`.
pub fn edge_loss_on(tape: &Tape, h: Var, pos: Var, neg: Var, alpha: f64) -> Result<Var> {
    let sp = tape.cosine_rows(h, pos)?;
    let sn = tape.cosine_rows(h, neg)?;
    let hinge = tape.relu(tape.shift(sn, -alpha));
    Ok(tape.mean(tape.sub(hinge, sp)?)?)
}

pub fn edge_loss(h: &[f64], pos: &[f64], neg: &[f64], alpha: f64) -> Result<f64> {
    let tape = Tape::new();
    let c = |x: &[f64]| tape.constant(Tensor::row(x));
    let l = edge_loss_on(&tape, c(h), c(pos), c(neg), alpha)?;
    Ok(tape.value(l).item()?)
}

// ---- reachability k-NN ----

#[derive(Clone, Debug, PartialEq)]
pub struct KnnBatch {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub margin: f64,
    pub step: usize,
}

/// Positives follow row `i` of `P^t′`; negatives follow `1 / (reach + λ)`
/// over every node except `i`, with `λ = 1e-4 / n`.
pub fn sample_knn_batch(cache: &ReachabilityCache, i: usize, k: usize, t: usize, seed: u64) -> Result<KnnBatch> {
    let p = cache.power(t)?;
    let n = p.n_rows();
    if i >= n {
        return Err(Error::Argument(format!("node {i} outside 0..{n}")));
    }
    if k == 0 {
        return Err(Error::Argument("k must be positive".into()));
    }
    let (cols, vals) = p.row(i);
    if vals.iter().all(|&v| v <= 0.0) {
        return Err(Error::Sampling(format!("node {i} reaches nothing in {t} steps")));
    }
    if n < 2 {
        return Err(Error::Sampling("negatives need a second node".into()));
    }
    let mut rng = rng::stream(seed, "knn-batch", i as u64);
    let pos_dist = WeightedIndex::new(vals).map_err(|e| Error::Sampling(e.to_string()))?;
    let positives = (0..k).map(|_| cols[pos_dist.sample(&mut rng)]).collect();

    let lambda = 1e-4 / n as f64;
    let mut weights = vec![1.0 / lambda; n];
    for (&c, &v) in cols.iter().zip(vals) {
        weights[c] = 1.0 / (v + lambda);
    }
    weights[i] = 0.0;
    let neg_dist = WeightedIndex::new(&weights).map_err(|e| Error::Sampling(e.to_string()))?;
    let negatives = (0..k).map(|_| neg_dist.sample(&mut rng)).collect();
    Ok(KnnBatch { anchor: i, positives, negatives, margin: 1.0, step: t })
}

/// `h: [b, d]` anchors; `pos`, `neg`: `[b·k, d]` with rows `j·k .. (j+1)·k`
/// belonging to anchor `j`. Returns the mean over anchors of
/// `max(0, J̃)² + (1/k) Σ D(h, p)²`.
pub fn knn_loss_on(tape: &Tape, h: Var, pos: Var, neg: Var, k: usize, margin: f64) -> Result<Var> {
    let b = tape.shape(h)[0];
    if k == 0 || tape.shape(pos)[0] != b * k || tape.shape(neg)[0] != b * k {
        return Err(Error::Dimension(format!(
            "{b} anchors with {} positives and {} negatives for k = {k}",
            tape.shape(pos)[0],
            tape.shape(neg)[0]
        )));
    }
    let rep: Rc<[usize]> = (0..b * k).map(|r| r / k).collect();
    let hr = tape.gather_rows(h, rep)?;
    let dist = |other: Var| -> Result<Var> {
        let s = tape.cosine_rows(hr, other)?;
        Ok(tape.reshape(tape.neg(tape.shift(s, -1.0)), b, k)?)
    };
    let dp = dist(pos)?;
    let dn = dist(neg)?;
    let j = tape.add(tape.log_sum_exp_rows(dp), tape.log_sum_exp_rows(tape.shift(tape.neg(dn), margin)))?;
    let triplet = tape.square(tape.relu(j));
    let center = tape.scale(tape.sum_rows(tape.square(dp)), 1.0 / k as f64);
    Ok(tape.mean(tape.add(triplet, center)?)?)
}

fn rows(x: &[Vec<f64>]) -> Result<Tensor> {
    Ok(Tensor::from_rows(x)?)
}

pub fn knn_loss(h: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>], margin: f64) -> Result<f64> {
    if pos.len() != neg.len() || pos.is_empty() {
        return Err(Error::Dimension(format!("{} positives and {} negatives", pos.len(), neg.len())));
    }
    let tape = Tape::new();
    let l = knn_loss_on(
        &tape,
        tape.constant(Tensor::row(h)),
        tape.constant(rows(pos)?),
        tape.constant(rows(neg)?),
        pos.len(),
        margin,
    )?;
    Ok(tape.value(l).item()?)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Autodiff(ultradp_autodiff::AutodiffError::Domain {
            op: "cosine",
            detail: "zero-norm vector".into(),
        }));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `max{0, J̃}²` alone, with `J̃` the log-sum-exp form.
pub fn smooth_triplet(h: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>], margin: f64) -> Result<f64> {
    let lse = |xs: &[f64]| {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let dp = pos.iter().map(|p| cosine(h, p).map(|s| 1.0 - s)).collect::<Result<Vec<_>>>()?;
    let dn = neg.iter().map(|q| cosine(h, q).map(|s| margin - (1.0 - s))).collect::<Result<Vec<_>>>()?;
    Ok((lse(&dp) + lse(&dn)).max(0.0).powi(2))
}

/// `max{0, J}²` with `J = max D(h, p) + α′ − min D(h, q)`.
pub fn hard_triplet(h: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>], margin: f64) -> Result<f64> {
    let mut far = f64::NEG_INFINITY;
    for p in pos {
        far = far.max(1.0 - cosine(h, p)?);
    }
    let mut near = f64::INFINITY;
    for q in neg {
        near = near.min(1.0 - cosine(h, q)?);
    }
    Ok((far + margin - near).max(0.0).powi(2))
}

// ---- contrastive ----

/// A view with a `ratio` share of edges dropped and the same share of
/// feature columns zeroed.
pub fn augment(graph: &Graph, ratio: f64, seed: u64, view: u64) -> Result<Graph> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Argument(format!("augmentation ratio {ratio} outside [0, 1]")));
    }
    if ratio == 0.0 {
        return Ok(graph.clone());
    }
    let mut rng = rng::stream(seed, "cl-view", view);
    let dropped: Vec<(usize, usize)> = graph.edges().filter(|_| rng.gen_bool(ratio)).collect();
    let mut g = graph.without_edges(&dropped)?;
    let d = g.feature_dim();
    let masked: Vec<usize> = (0..d).filter(|_| rng.gen_bool(ratio)).collect();
    if !masked.is_empty() {
        let mut f = g.features().clone();
        for r in 0..f.rows() {
            let row = f.row_slice_mut(r);
            for &c in &masked {
                row[c] = 0.0;
            }
        }
        let labels = g.labels().map(<[usize]>::to_vec);
        let classes = g.num_classes();
        let edges: Vec<_> = g.edges().collect();
        g = Graph::from_edges(&edges, f, labels)?;
        if let Some(c) = classes {
            g = g.with_num_classes(c)?;
        }
    }
    Ok(g)
}

/// Symmetric normalised-temperature cross-entropy between matching rows of
/// two `[b, d]` views. Each row's denominator runs over the other view,
/// positive included, so a batch of one gives zero.
pub fn nt_xent_on(tape: &Tape, z1: Var, z2: Var, temperature: f64) -> Result<Var> {
    let b = tape.shape(z1)[0];
    let unit = |z: Var| -> Result<Var> { Ok(tape.div(z, tape.l2_norm_rows(z))?) };
    let (u1, u2) = (unit(z1)?, unit(z2)?);
    let sim = tape.scale(tape.matmul(u1, tape.transpose(u2))?, 1.0 / temperature);
    let eye = tape.constant(Tensor::identity(b));
    let diag = tape.sum_rows(tape.mul(sim, eye)?);
    let a = tape.sub(tape.log_sum_exp_rows(sim), diag)?;
    let simt = tape.transpose(sim);
    let bb = tape.sub(tape.log_sum_exp_rows(simt), diag)?;
    Ok(tape.scale(tape.add(tape.mean(a)?, tape.mean(bb)?)?, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reach::{build_cache, build_transition};
    use std::collections::HashSet;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::from_edges(edges, Tensor::full(n, 3, 1.0), None).unwrap()
    }

    #[test]
    fn edge_batch_enumerations() {
        let g = graph(3, &[(0, 1)]);
        let b = sample_edge_batch(&g, 50, 1).unwrap();
        let seen: HashSet<_> = b.triplets.iter().copied().collect();
        assert!(seen.iter().all(|t| *t == (0, 1, 2) || *t == (1, 0, 2)));
        assert_eq!(seen.len(), 2);

        let p = graph(3, &[(0, 1), (1, 2)]);
        let b = sample_edge_batch_from(&p, &[0], 5, 2).unwrap();
        assert!(b.triplets.iter().all(|&t| t == (0, 1, 2)));
        assert_eq!(b, sample_edge_batch_from(&p, &[0], 5, 2).unwrap());
    }

    #[test]
    fn complete_graph_has_no_negatives() {
        let k4 = graph(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        assert!(matches!(sample_edge_batch(&k4, 4, 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn edge_loss_examples() {
        let h = [1.0, 0.0];
        assert_eq!(edge_loss(&h, &h, &[0.0, 1.0], 0.5).unwrap(), -1.0);
        let s = 0.9f64;
        let neg = [s, (1.0 - s * s).sqrt()];
        assert!((edge_loss(&h, &h, &neg, 0.5).unwrap() + 0.6).abs() < 1e-12);
        assert!((edge_loss(&h, &h, &h, 0.5).unwrap() + 0.5).abs() < 1e-15);
        assert!(edge_loss(&[0.0, 0.0], &h, &h, 0.5).is_err());
    }

    #[test]
    fn knn_sampling() {
        let p = graph(3, &[(0, 1), (1, 2)]);
        let c = build_cache(&build_transition(&p), 1).unwrap();
        let b = sample_knn_batch(&c, 0, 1, 1, 0).unwrap();
        assert_eq!(b.positives, vec![1]);

        // node 3 is unreachable from 0
        let g = graph(4, &[(0, 1), (1, 2)]);
        let c = build_cache(&build_transition(&g), 1).unwrap();
        let mut counts = [0usize; 4];
        for s in 0..400 {
            for v in sample_knn_batch(&c, 0, 2, 1, s).unwrap().negatives {
                counts[v] += 1;
            }
        }
        assert_eq!(counts[0], 0);
        assert!(counts[3] > counts[1] && counts[3] > counts[2]);

        let iso = graph(2, &[]);
        let c = build_cache(&build_transition(&iso), 1).unwrap();
        assert!(matches!(sample_knn_batch(&c, 0, 1, 1, 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn knn_loss_examples() {
        let h = vec![1.0, 0.0];
        let anti = vec![-1.0, 0.0];
        assert!(knn_loss(&h, &[h.clone()], &[anti.clone()], 1.0).unwrap().abs() < 1e-12);
        assert!((knn_loss(&h, &[h.clone()], &[h.clone()], 1.0).unwrap() - 1.0).abs() < 1e-12);

        let p = vec![0.6, 0.8];
        let q = vec![0.0, 1.0];
        let j = (1.0 - 0.6) + 1.0 - 1.0;
        let smooth = smooth_triplet(&h, &[p.clone()], &[q.clone()], 1.0).unwrap();
        assert!((smooth - j * j).abs() < 1e-12);
        assert!((hard_triplet(&h, &[p], &[q], 1.0).unwrap() - j * j).abs() < 1e-12);
    }

    #[test]
    fn single_row_nt_xent_is_zero() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::row(&[1.0, 2.0]));
        let b = tape.constant(Tensor::row(&[-0.5, 2.0]));
        let l = nt_xent_on(&tape, a, b, 0.5).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn zero_ratio_views_are_identical() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        assert_eq!(augment(&g, 0.0, 1, 0).unwrap(), g);
        let v = augment(&g, 0.5, 1, 0).unwrap();
        assert_eq!(v, augment(&g, 0.5, 1, 0).unwrap());
        assert!(v.num_edges() <= g.num_edges());
    }
}
