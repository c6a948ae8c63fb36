//! Prompt nodes: anchors, position encodings and embeddings, task
//! embeddings, feature alignment and graph augmentation.
//!
//! A prompt node is attached by one undirected edge to a target. Its
//! feature is `task_row + w_pos · tanh(W_pos · (enc / (σ + ε)) + b_pos)`,
//! where `enc` holds the target's `t`-step reachabilities to the anchors and
//! `σ` is the population standard deviation of `enc`. Prompt and normal
//! nodes are then mapped to the GNN width by separate affine layers.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use ultradp_autodiff::{Axis, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Bound, ParamId, ParamStore};
use crate::reach::ReachabilityCache;
use crate::rng;

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// The `m` nodes with the largest total reachability at step `t`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSet {
    ids: Vec<usize>,
    step: usize,
}

impl AnchorSet {
    pub fn new(ids: Vec<usize>, step: usize) -> Result<Self> {
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Argument("anchor ids must be distinct".into()));
        }
        Ok(Self { ids, step })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Writes the ids as a JSON array.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.ids).expect("ids serialise");
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load_json(path: &Path, step: usize) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let ids: Vec<usize> = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::new(ids, step)
    }
}

pub fn select_anchors(cache: &ReachabilityCache, t: usize, m: usize) -> Result<AnchorSet> {
    let n = cache.num_nodes();
    if m == 0 || m > n {
        return Err(Error::Argument(format!("anchor count {m} outside 1..={n}")));
    }
    let total = cache.total_reach(t)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| total[b].total_cmp(&total[a]).then(a.cmp(&b)));
    order.truncate(m);
    Ok(AnchorSet { ids: order, step: t })
}

/// `[reach(i, a_1, t), …, reach(i, a_m, t)]`.
pub fn position_encoding(cache: &ReachabilityCache, anchors: &AnchorSet, i: usize, t: usize) -> Result<Vec<f64>> {
    let p = cache.power(t)?;
    if i >= p.n_rows() {
        return Err(Error::Argument(format!("node {i} outside 0..{}", p.n_rows())));
    }
    Ok(anchors.ids.iter().map(|&a| p.get(i, a)).collect())
}

/// Stacked encodings of `nodes` at the anchors' own step, `[k, m]`.
pub fn position_encodings(cache: &ReachabilityCache, anchors: &AnchorSet, nodes: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(nodes.len() * anchors.len());
    for &v in nodes {
        data.extend(position_encoding(cache, anchors, v, anchors.step)?);
    }
    Ok(Tensor::new(nodes.len(), anchors.len(), data)?)
}

/// Divides each row by its population standard deviation plus `eps`.
pub fn normalize_encodings(enc: &Tensor, eps: f64) -> Tensor {
    let m = enc.cols() as f64;
    let mut out = enc.clone();
    for r in 0..enc.rows() {
        let row = out.row_slice_mut(r);
        let mean = row.iter().sum::<f64>() / m;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
        let s = var.sqrt() + eps;
        row.iter_mut().for_each(|x| *x /= s);
    }
    out
}

/// `tanh(enc_norm · Wᵀ + b)` for row-stacked normalised encodings `[k, m]`,
/// with `w: [d, m]` and `b: [1, d]`.
pub fn position_embedding_on(tape: &Tape, enc_norm: Var, w: Var, b: Var) -> Result<Var> {
    let wt = tape.transpose(w);
    let pre = tape.add(tape.matmul(enc_norm, wt)?, b)?;
    Ok(tape.tanh(pre))
}

pub fn position_embedding(enc: &[f64], w: &Tensor, b: &Tensor, eps: f64) -> Result<Vec<f64>> {
    if w.cols() != enc.len() || b.shape() != [1, w.rows()] {
        return Err(Error::Dimension(format!(
            "encoding of length {} with W_pos {:?} and b_pos {:?}",
            enc.len(),
            w.shape(),
            b.shape()
        )));
    }
    let tape = Tape::new();
    let e = tape.constant(normalize_encodings(&Tensor::row(enc), eps));
    let out = position_embedding_on(&tape, e, tape.constant(w.clone()), tape.constant(b.clone()))?;
    Ok(tape.value(out).data().to_vec())
}

/// `task_row + w_pos · pos_emb`.
pub fn prompt_feature(task_row: &[f64], pos_emb: &[f64], w_pos: f64) -> Result<Vec<f64>> {
    if task_row.len() != pos_emb.len() {
        return Err(Error::Dimension(format!(
            "task row has length {}, position embedding {}",
            task_row.len(),
            pos_emb.len()
        )));
    }
    Ok(task_row.iter().zip(pos_emb).map(|(t, p)| t + w_pos * p).collect())
}

/// Trainable prompt state inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptParams {
    #[serde(skip)]
    ids: Option<PromptIds>,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_anchors: usize,
    pub num_tasks: usize,
    pub w_pos: f64,
    pub epsilon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct PromptIds {
    task: ParamId,
    w_pos: ParamId,
    b_pos: ParamId,
    prompt_w: ParamId,
    prompt_b: ParamId,
    normal_w: ParamId,
    normal_b: ParamId,
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(rows, cols, data).expect("sized")
}

fn normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(rows, cols, data).expect("sized")
}

impl PromptParams {
    /// Dimensions only; call [`PromptParams::attach`] before use.
    pub fn detached(
        feature_dim: usize,
        hidden_dim: usize,
        num_anchors: usize,
        num_tasks: usize,
        w_pos: f64,
        epsilon: f64,
    ) -> Self {
        Self { ids: None, feature_dim, hidden_dim, num_anchors, num_tasks, w_pos, epsilon }
    }

    /// Registers freshly initialised prompt tensors under `prompt.*` and
    /// `align.*`.
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        feature_dim: usize,
        hidden_dim: usize,
        num_anchors: usize,
        num_tasks: usize,
        w_pos: f64,
        epsilon: f64,
        seed: u64,
    ) -> Result<Self> {
        if feature_dim == 0 || hidden_dim == 0 || num_anchors == 0 || num_tasks == 0 {
            return Err(Error::Argument("prompt dimensions must be positive".into()));
        }
        let mut rng = rng::stream(seed, "prompt-init", 0);
        let d = feature_dim;
        let fd = 1.0 / (d as f64).sqrt();
        let fm = 1.0 / (num_anchors as f64).sqrt();
        let ids = PromptIds {
            task: store.insert("prompt.task", normal(num_tasks, d, &mut rng))?,
            w_pos: store.insert("prompt.w_pos", uniform(d, num_anchors, fm, &mut rng))?,
            b_pos: store.insert("prompt.b_pos", Tensor::zeros(1, d))?,
            prompt_w: store.insert("align.prompt.w", uniform(d, hidden_dim, fd, &mut rng))?,
            prompt_b: store.insert("align.prompt.b", Tensor::zeros(1, hidden_dim))?,
            normal_w: store.insert("align.normal.w", uniform(d, hidden_dim, fd, &mut rng))?,
            normal_b: store.insert("align.normal.b", Tensor::zeros(1, hidden_dim))?,
        };
        let mut p = Self::detached(feature_dim, hidden_dim, num_anchors, num_tasks, w_pos, epsilon);
        p.ids = Some(ids);
        Ok(p)
    }

    /// Re-attaches to tensors already present in `store`, checking shapes.
    pub fn attach(&mut self, store: &ParamStore) -> Result<()> {
        let (d, h, m) = (self.feature_dim, self.hidden_dim, self.num_anchors);
        let find = |name: &str, shape: [usize; 2]| -> Result<ParamId> {
            let id = store.id(name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if store.get(id).shape() != shape {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
            Ok(id)
        };
        self.ids = Some(PromptIds {
            task: find("prompt.task", [self.num_tasks, d])?,
            w_pos: find("prompt.w_pos", [d, m])?,
            b_pos: find("prompt.b_pos", [1, d])?,
            prompt_w: find("align.prompt.w", [d, h])?,
            prompt_b: find("align.prompt.b", [1, h])?,
            normal_w: find("align.normal.w", [d, h])?,
            normal_b: find("align.normal.b", [1, h])?,
        });
        Ok(())
    }

    fn ids(&self) -> &PromptIds {
        self.ids.as_ref().expect("prompt params attached to a store")
    }

    pub fn task_table(&self) -> ParamId {
        self.ids().task
    }

    pub fn w_pos_id(&self) -> ParamId {
        self.ids().w_pos
    }

    pub fn b_pos_id(&self) -> ParamId {
        self.ids().b_pos
    }

    pub fn align_prompt_ids(&self) -> (ParamId, ParamId) {
        (self.ids().prompt_w, self.ids().prompt_b)
    }

    pub fn align_normal_ids(&self) -> (ParamId, ParamId) {
        (self.ids().normal_w, self.ids().normal_b)
    }

    /// Row `j` of the task table.
    pub fn task_row(&self, store: &ParamStore, j: usize) -> Result<Vec<f64>> {
        let t = store.get(self.ids().task);
        if j >= t.rows() {
            return Err(Error::Argument(format!("task {j} outside 0..{}", t.rows())));
        }
        Ok(t.row_slice(j).to_vec())
    }

    /// Prompt features for targets with raw encodings `enc: [k, m]`, given a
    /// `[1, d]` task row already on the tape.
    pub fn prompt_features_on(&self, tape: &Tape, bound: &Bound, task_row: Var, enc: &Tensor) -> Result<Var> {
        let e = tape.constant(normalize_encodings(enc, self.epsilon));
        let pos = position_embedding_on(tape, e, bound.var(self.ids().w_pos), bound.var(self.ids().b_pos))?;
        Ok(tape.add(tape.scale(pos, self.w_pos), task_row)?)
    }

    /// `h⁰`: normal rows through the normal map followed by prompt rows
    /// through the prompt map.
    pub fn align_on(&self, tape: &Tape, bound: &Bound, normal: Var, prompts: Option<Var>) -> Result<Var> {
        let ids = self.ids();
        let hn = affine(tape, normal, bound.var(ids.normal_w), bound.var(ids.normal_b))?;
        match prompts {
            Some(p) => {
                let hp = affine(tape, p, bound.var(ids.prompt_w), bound.var(ids.prompt_b))?;
                Ok(tape.concat(&[hn, hp], Axis::Rows)?)
            }
            None => Ok(hn),
        }
    }
}

pub fn affine(tape: &Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    Ok(tape.add(tape.matmul(x, w)?, b)?)
}

/// Maps each row of `features` through the prompt or normal map according
/// to `is_prompt`.
pub fn align_features(
    features: &Tensor,
    is_prompt: &[bool],
    store: &ParamStore,
    params: &PromptParams,
) -> Result<Tensor> {
    if is_prompt.len() != features.rows() {
        return Err(Error::Dimension(format!(
            "{} prompt flags for {} rows",
            is_prompt.len(),
            features.rows()
        )));
    }
    let tape = Tape::new();
    let x = tape.constant(features.clone());
    let (pw, pb) = params.align_prompt_ids();
    let (nw, nb) = params.align_normal_ids();
    let c = |id| tape.constant(store.get(id).clone());
    let hp = tape.value(affine(&tape, x, c(pw), c(pb))?);
    let hn = tape.value(affine(&tape, x, c(nw), c(nb))?);
    let mut out = Tensor::zeros(features.rows(), hp.cols());
    for (r, &p) in is_prompt.iter().enumerate() {
        let src = if p { &hp } else { &hn };
        out.row_slice_mut(r).copy_from_slice(src.row_slice(r));
    }
    Ok(out)
}

/// Adds one prompt node per target. Prompt `i` gets id `n + i` and an
/// undirected edge to `targets[i]`. `prompt_rows` holds their features.
pub fn attach_prompts(graph: &Graph, targets: &[usize], prompt_rows: &Tensor) -> Result<(Graph, Vec<usize>)> {
    let n = graph.num_nodes();
    if prompt_rows.rows() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} prompt rows for {} targets",
            prompt_rows.rows(),
            targets.len()
        )));
    }
    let mut seen = vec![false; n];
    for &t in targets {
        if t >= n {
            return Err(Error::Argument(format!("target {t} outside 0..{n}")));
        }
        if std::mem::replace(&mut seen[t], true) {
            return Err(Error::Argument(format!("target {t} listed twice")));
        }
    }
    if targets.is_empty() {
        return Ok((graph.clone(), Vec::new()));
    }
    let ids: Vec<usize> = (n..n + targets.len()).collect();
    let attach: Vec<(usize, usize)> = ids.iter().zip(targets).map(|(&p, &t)| (p, t)).collect();
    Ok((graph.with_appended_nodes(prompt_rows, &attach)?, ids))
}

/// Builds the prompted graph with numerically evaluated prompt features.
/// `graph` must be the graph `cache` was built on (or share its ids).
pub fn prompt_graph(
    graph: &Graph,
    targets: &[usize],
    task_row: &[f64],
    cache: &ReachabilityCache,
    anchors: &AnchorSet,
    store: &ParamStore,
    params: &PromptParams,
) -> Result<(Graph, Vec<usize>)> {
    if task_row.len() != graph.feature_dim() {
        return Err(Error::Dimension(format!(
            "task row of length {} for features of width {}",
            task_row.len(),
            graph.feature_dim()
        )));
    }
    let n = graph.num_nodes();
    if let Some(&t) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::Argument(format!("target {t} outside 0..{n}")));
    }
    let enc = position_encodings(cache, anchors, targets)?;
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let task = tape.constant(Tensor::row(task_row));
    let rows = if targets.is_empty() {
        Tensor::zeros(0, graph.feature_dim())
    } else {
        Tensor::clone(&tape.value(params.prompt_features_on(&tape, &bound, task, &enc)?))
    };
    attach_prompts(graph, targets, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reach::{build_cache, build_transition};

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        let f = Tensor::new(n, 2, (0..2 * n).map(|i| i as f64 * 0.1).collect()).unwrap();
        Graph::from_edges(edges, f, None).unwrap()
    }

    fn star() -> Graph {
        graph(5, &[(0, 1), (0, 2), (0, 3), (0, 4)])
    }

    fn cache(g: &Graph, t: usize) -> ReachabilityCache {
        build_cache(&build_transition(g), t).unwrap()
    }

    #[test]
    fn anchors_on_star_and_isolated() {
        let s = star();
        assert_eq!(select_anchors(&cache(&s, 1), 1, 1).unwrap().ids(), &[0]);
        let iso = graph(4, &[]);
        assert_eq!(select_anchors(&cache(&iso, 1), 1, 2).unwrap().ids(), &[0, 1]);
        let all = select_anchors(&cache(&s, 2), 2, 5).unwrap();
        let mut ids = all.ids().to_vec();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        assert!(matches!(select_anchors(&cache(&s, 1), 1, 6), Err(Error::Argument(_))));
    }

    #[test]
    fn encodings() {
        let iso = graph(1, &[]);
        let c = cache(&iso, 1);
        let a = select_anchors(&c, 1, 1).unwrap();
        assert_eq!(position_encoding(&c, &a, 0, 1).unwrap(), vec![0.0]);

        let p = graph(3, &[(0, 1), (1, 2)]);
        let c = cache(&p, 1);
        let a = AnchorSet::new(vec![1], 1).unwrap();
        assert_eq!(position_encoding(&c, &a, 0, 1).unwrap(), vec![1.0]);

        let s = star();
        let c = cache(&s, 2);
        let a = AnchorSet::new(vec![0], 2).unwrap();
        assert_eq!(position_encoding(&c, &a, 3, 2).unwrap(), vec![0.0]);
    }

    #[test]
    fn embedding_examples() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let b = Tensor::zeros(1, 3);
        assert_eq!(position_embedding(&[0.0, 0.0], &w, &b, DEFAULT_EPSILON).unwrap(), vec![0.0; 3]);

        let out = position_embedding(&[1.0, 0.0], &w, &b, DEFAULT_EPSILON).unwrap();
        let expect = (1.0f64 / (0.5 + 1e-6)).tanh();
        assert!((out[0] - expect).abs() < 1e-15);
        assert!((out[0] - 2.0f64.tanh()).abs() < 1e-5);
        assert_eq!(&out[1..], &[0.0, 0.0]);

        let bias = Tensor::row(&[0.3, -0.2, 0.0]);
        let out = position_embedding(&[5.0, 1.0], &Tensor::zeros(3, 2), &bias, DEFAULT_EPSILON).unwrap();
        assert_eq!(out, vec![0.3f64.tanh(), (-0.2f64).tanh(), 0.0]);
    }

    #[test]
    fn feature_combination() {
        assert_eq!(prompt_feature(&[1.0, 2.0], &[9.0, 9.0], 0.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(prompt_feature(&[0.0, 0.0], &[0.3, -0.7], 1.0).unwrap(), vec![0.3, -0.7]);
        let v = prompt_feature(&[1.0, 1.0], &[0.5, -0.5], 0.1).unwrap();
        assert!((v[0] - 1.05).abs() < 1e-15 && (v[1] - 0.95).abs() < 1e-15);
        assert!(matches!(prompt_feature(&[1.0], &[1.0, 2.0], 1.0), Err(Error::Dimension(_))));
    }

    fn params(d: usize, h: usize, m: usize) -> (ParamStore, PromptParams) {
        let mut s = ParamStore::new();
        let p = PromptParams::register(&mut s, d, h, m, 2, 1.0, DEFAULT_EPSILON, 0).unwrap();
        (s, p)
    }

    #[test]
    fn alignment() {
        let (mut s, p) = params(2, 2, 1);
        let (pw, pb) = p.align_prompt_ids();
        let (nw, nb) = p.align_normal_ids();
        for id in [pw, pb, nw, nb] {
            let t = s.get_mut(id);
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(align_features(&x, &[true, false], &s, &p).unwrap(), Tensor::zeros(2, 2));

        *s.get_mut(nw) = Tensor::identity(2);
        *s.get_mut(pw) = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        *s.get_mut(pb) = Tensor::row(&[1.0, 1.0]);
        let out = align_features(&x, &[true, false], &s, &p).unwrap();
        assert_eq!(out.row_slice(0), &[3.0, 5.0]);
        assert_eq!(out.row_slice(1), &[3.0, 4.0]);
    }

    #[test]
    fn prompting_counts() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let c = cache(&g, 2);
        let a = select_anchors(&c, 2, 1).unwrap();
        let (s, p) = params(2, 4, 1);
        let row = p.task_row(&s, 0).unwrap();

        let (same, ids) = prompt_graph(&g, &[], &row, &c, &a, &s, &p).unwrap();
        assert_eq!(same, g);
        assert!(ids.is_empty());

        let (aug, ids) = prompt_graph(&g, &[2], &row, &c, &a, &s, &p).unwrap();
        assert_eq!((aug.num_nodes(), aug.num_edges()), (4, 3));
        assert_eq!(ids, vec![3]);

        let (aug, ids) = prompt_graph(&g, &[0, 2], &row, &c, &a, &s, &p).unwrap();
        assert_eq!(aug.neighbors(ids[0]), &[0]);
        assert_eq!(aug.neighbors(ids[1]), &[2]);
        assert_eq!(aug.neighbors(1), g.neighbors(1));
        assert_eq!(aug.induced_subgraph(&[0, 1, 2]).unwrap(), g);

        assert!(matches!(prompt_graph(&g, &[1, 1], &row, &c, &a, &s, &p), Err(Error::Argument(_))));
    }

    #[test]
    fn prompt_rows_follow_formula() {
        let g = star();
        let c = cache(&g, 2);
        let a = select_anchors(&c, 2, 2).unwrap();
        let (s, p) = params(2, 3, 2);
        let row = p.task_row(&s, 1).unwrap();
        let (aug, ids) = prompt_graph(&g, &[4], &row, &c, &a, &s, &p).unwrap();
        let enc = position_encoding(&c, &a, 4, 2).unwrap();
        let pos = position_embedding(&enc, s.get(p.w_pos_id()), s.get(p.b_pos_id()), p.epsilon).unwrap();
        let expect = prompt_feature(&row, &pos, p.w_pos).unwrap();
        assert_eq!(aug.features().row_slice(ids[0]), expect.as_slice());
    }

    #[test]
    fn anchors_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("anchors.json");
        let a = AnchorSet::new(vec![4, 0, 2], 9).unwrap();
        a.save_json(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "[4,0,2]");
        assert_eq!(AnchorSet::load_json(&path, 9).unwrap(), a);
    }
}
