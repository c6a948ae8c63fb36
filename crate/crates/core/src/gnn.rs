//! Message-passing backbones: multi-head attention, symmetric-normalised
//! convolution and mean-aggregate-and-concatenate.
//!
//! Every layer adds a self-connection on the fly (the graph itself has no
//! self-loops). Hidden layers are followed by ELU for attention and ReLU for
//! the others; the final layer is linear. Attention concatenates head
//! outputs on hidden layers and averages them on the last one.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use ultradp_autodiff::{Axis, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng;

pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    #[serde(alias = "attention")]
    Gat,
    #[serde(alias = "convolutional")]
    Gcn,
    #[serde(alias = "aggregate")]
    Sage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub backbone: Backbone,
    pub layers: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
}

impl GnnConfig {
    pub fn new(backbone: Backbone, input_dim: usize, hidden_dim: usize) -> Self {
        Self { backbone, layers: 3, input_dim, hidden_dim, heads: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("a GNN needs at least one layer".into()));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("GNN widths must be positive".into()));
        }
        if self.backbone == Backbone::Gat && (self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads)) {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn activation(&self) -> Activation {
        match self.backbone {
            Backbone::Gat => Activation::Elu,
            Backbone::Gcn | Backbone::Sage => Activation::Relu,
        }
    }

    /// Per-head output width of layer `l`.
    pub fn head_width(&self, l: usize) -> usize {
        if l + 1 == self.layers {
            self.hidden_dim
        } else {
            self.hidden_dim / self.heads
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub att_src: Option<ParamId>,
    pub att_dst: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnParams {
    pub layers: Vec<LayerParams>,
}

fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let b = 1.0 / (fan_in as f64).sqrt();
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-b..=b)).collect()).expect("sized")
}

/// Registers `gnn.{l}.*` tensors: weights uniform in `±1/√fan_in`, zero
/// biases.
pub fn init_params(config: &GnnConfig, seed: u64, store: &mut ParamStore) -> Result<GnnParams> {
    config.validate()?;
    let mut layers = Vec::with_capacity(config.layers);
    let mut in_dim = config.input_dim;
    for l in 0..config.layers {
        let mut rng = rng::stream(seed, "gnn-init", l as u64);
        let last = l + 1 == config.layers;
        let p = match config.backbone {
            Backbone::Gat => {
                let f = config.head_width(l);
                let width = config.heads * f;
                LayerParams {
                    weight: store.insert(format!("gnn.{l}.w"), uniform(in_dim, width, in_dim, &mut rng))?,
                    bias: store.insert(format!("gnn.{l}.b"), Tensor::zeros(1, if last { f } else { width }))?,
                    att_src: Some(store.insert(format!("gnn.{l}.att_src"), uniform(1, width, f, &mut rng))?),
                    att_dst: Some(store.insert(format!("gnn.{l}.att_dst"), uniform(1, width, f, &mut rng))?),
                }
            }
            Backbone::Gcn => LayerParams {
                weight: store.insert(format!("gnn.{l}.w"), uniform(in_dim, config.hidden_dim, in_dim, &mut rng))?,
                bias: store.insert(format!("gnn.{l}.b"), Tensor::zeros(1, config.hidden_dim))?,
                att_src: None,
                att_dst: None,
            },
            Backbone::Sage => LayerParams {
                weight: store.insert(
                    format!("gnn.{l}.w"),
                    uniform(2 * in_dim, config.hidden_dim, 2 * in_dim, &mut rng),
                )?,
                bias: store.insert(format!("gnn.{l}.b"), Tensor::zeros(1, config.hidden_dim))?,
                att_src: None,
                att_dst: None,
            },
        };
        layers.push(p);
        in_dim = config.hidden_dim;
    }
    Ok(GnnParams { layers })
}

/// Looks up existing `gnn.{l}.*` tensors.
pub fn attach_params(config: &GnnConfig, store: &ParamStore) -> Result<GnnParams> {
    config.validate()?;
    let find = |name: String| store.id(&name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")));
    let layers = (0..config.layers)
        .map(|l| {
            let gat = config.backbone == Backbone::Gat;
            Ok(LayerParams {
                weight: find(format!("gnn.{l}.w"))?,
                bias: find(format!("gnn.{l}.b"))?,
                att_src: if gat { Some(find(format!("gnn.{l}.att_src"))?) } else { None },
                att_dst: if gat { Some(find(format!("gnn.{l}.att_dst"))?) } else { None },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GnnParams { layers })
}

/// Directed message list `src → dst`, optionally with one self-loop per node.
struct EdgeIndex {
    src: Rc<[usize]>,
    dst: Rc<[usize]>,
}

impl EdgeIndex {
    fn new(graph: &Graph, self_loops: bool) -> Self {
        let n = graph.num_nodes();
        let cap = graph.csr_targets().len() + if self_loops { n } else { 0 };
        let mut src = Vec::with_capacity(cap);
        let mut dst = Vec::with_capacity(cap);
        for v in 0..n {
            if self_loops {
                src.push(v);
                dst.push(v);
            }
            for &u in graph.neighbors(v) {
                src.push(u);
                dst.push(v);
            }
        }
        Self { src: src.into(), dst: dst.into() }
    }
}

/// `[heads·f, heads]` with ones where column `h` covers the block of head `h`.
fn head_blocks(heads: usize, f: usize) -> Tensor {
    let mut g = Tensor::zeros(heads * f, heads);
    for h in 0..heads {
        for k in 0..f {
            g.set(h * f + k, h, 1.0);
        }
    }
    g
}

/// `[heads·f, f]` averaging matrix across heads.
fn head_mean(heads: usize, f: usize) -> Tensor {
    let mut m = Tensor::zeros(heads * f, f);
    for h in 0..heads {
        for k in 0..f {
            m.set(h * f + k, k, 1.0 / heads as f64);
        }
    }
    m
}

/// Per-layer attention coefficients, recorded when requested.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// `[edges, heads]` per layer, edges ordered by destination with the
    /// self-loop first.
    pub attention: Vec<Tensor>,
    pub destinations: Vec<usize>,
}

pub fn forward(tape: &Tape, bound: &Bound, graph: &Graph, h0: Var, params: &GnnParams, config: &GnnConfig) -> Result<Var> {
    forward_traced(tape, bound, graph, h0, params, config, None)
}

pub fn forward_traced(
    tape: &Tape,
    bound: &Bound,
    graph: &Graph,
    h0: Var,
    params: &GnnParams,
    config: &GnnConfig,
    mut trace: Option<&mut Trace>,
) -> Result<Var> {
    let n = graph.num_nodes();
    let [rows, cols] = tape.shape(h0);
    if rows != n || cols != config.input_dim {
        return Err(Error::Dimension(format!(
            "h0 is [{rows}x{cols}] for {n} nodes of width {}",
            config.input_dim
        )));
    }
    if params.layers.len() != config.layers {
        return Err(Error::Dimension(format!(
            "{} layer groups for {} layers",
            params.layers.len(),
            config.layers
        )));
    }
    let mut h = h0;
    match config.backbone {
        Backbone::Gat => {
            let edges = EdgeIndex::new(graph, true);
            if let Some(t) = trace.as_deref_mut() {
                t.destinations = edges.dst.to_vec();
            }
            for (l, p) in params.layers.iter().enumerate() {
                let last = l + 1 == config.layers;
                let f = config.head_width(l);
                let g = tape.constant(head_blocks(config.heads, f));
                let z = tape.matmul(h, bound.var(p.weight))?;
                let att = |id: Option<ParamId>| -> Result<Var> {
                    let a = bound.var(id.expect("attention layer"));
                    Ok(tape.matmul(tape.mul(z, a)?, g)?)
                };
                let s_src = att(p.att_src)?;
                let s_dst = att(p.att_dst)?;
                let e = tape.add(
                    tape.gather_rows(s_src, edges.src.clone())?,
                    tape.gather_rows(s_dst, edges.dst.clone())?,
                )?;
                let e = tape.leaky_relu(e, ATTENTION_SLOPE);
                let alpha = tape.segment_softmax(e, edges.dst.clone(), n)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.attention.push(Tensor::clone(&tape.value(alpha)));
                }
                let agg = tape.edge_aggregate(z, alpha, edges.src.clone(), edges.dst.clone(), n)?;
                h = if last {
                    let avg = tape.matmul(agg, tape.constant(head_mean(config.heads, f)))?;
                    tape.add(avg, bound.var(p.bias))?
                } else {
                    tape.elu(tape.add(agg, bound.var(p.bias))?, 1.0)
                };
            }
        }
        Backbone::Gcn => {
            let edges = EdgeIndex::new(graph, true);
            let deg: Vec<f64> = (0..n).map(|v| graph.degree(v) as f64 + 1.0).collect();
            let coef: Vec<f64> =
                edges.src.iter().zip(edges.dst.iter()).map(|(&u, &v)| 1.0 / (deg[u] * deg[v]).sqrt()).collect();
            let coef = tape.constant(Tensor::column(&coef));
            for (l, p) in params.layers.iter().enumerate() {
                let hw = tape.matmul(h, bound.var(p.weight))?;
                let agg = tape.edge_aggregate(hw, coef, edges.src.clone(), edges.dst.clone(), n)?;
                let agg = tape.add(agg, bound.var(p.bias))?;
                h = if l + 1 == config.layers { agg } else { tape.relu(agg) };
            }
        }
        Backbone::Sage => {
            let edges = EdgeIndex::new(graph, false);
            let inv: Vec<f64> = edges.dst.iter().map(|&v| 1.0 / graph.degree(v) as f64).collect();
            let inv = tape.constant(Tensor::column(&inv));
            for (l, p) in params.layers.iter().enumerate() {
                let mean = if edges.src.is_empty() {
                    tape.constant(Tensor::zeros(n, tape.shape(h)[1]))
                } else {
                    tape.edge_aggregate(h, inv, edges.src.clone(), edges.dst.clone(), n)?
                };
                let cat = tape.concat(&[h, mean], Axis::Cols)?;
                let out = tape.add(tape.matmul(cat, bound.var(p.weight))?, bound.var(p.bias))?;
                h = if l + 1 == config.layers { out } else { tape.relu(out) };
            }
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::from_edges(edges, Tensor::zeros(n, 1), None).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let c = GnnConfig::new(Backbone::Gat, 16, 64);
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let pa = init_params(&c, 5, &mut a).unwrap();
        init_params(&c, 5, &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa.layers.len(), 3);
        assert_eq!(c.head_width(0), 8);
        assert_eq!(a.get(pa.layers[0].weight).shape(), [16, 64]);
        assert_eq!(a.get(pa.layers[2].weight).shape(), [64, 512]);
        assert_eq!(a.get(pa.layers[2].bias).shape(), [1, 64]);
        assert_eq!(attach_params(&c, &a).unwrap(), pa);
    }

    #[test]
    fn bad_heads() {
        let mut c = GnnConfig::new(Backbone::Gat, 4, 10);
        c.heads = 3;
        assert!(matches!(init_params(&c, 0, &mut ParamStore::new()), Err(Error::Config(_))));
    }

    #[test]
    fn gcn_hand_example() {
        let g = graph(2, &[(0, 1)]);
        let c = GnnConfig { backbone: Backbone::Gcn, layers: 1, input_dim: 1, hidden_dim: 1, heads: 1 };
        let mut s = ParamStore::new();
        let p = init_params(&c, 0, &mut s).unwrap();
        *s.get_mut(p.layers[0].weight) = Tensor::scalar(1.0);
        let tape = Tape::new();
        let bound = s.bind(&tape);
        let h0 = tape.constant(Tensor::column(&[1.0, 0.0]));
        let out = forward(&tape, &bound, &g, h0, &p, &c).unwrap();
        let v = tape.value(out);
        assert!((v.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((v.get(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn equal_keys_give_uniform_attention() {
        let g = graph(4, &[(0, 1), (0, 2), (0, 3), (1, 2)]);
        let c = GnnConfig { backbone: Backbone::Gat, layers: 2, input_dim: 3, hidden_dim: 4, heads: 2 };
        let mut s = ParamStore::new();
        let p = init_params(&c, 1, &mut s).unwrap();
        let tape = Tape::new();
        let bound = s.bind(&tape);
        let h0 = tape.constant(Tensor::full(4, 3, 0.7));
        let mut trace = Trace::default();
        forward_traced(&tape, &bound, &g, h0, &p, &c, Some(&mut trace)).unwrap();
        let a = &trace.attention[0];
        for (e, &v) in trace.destinations.iter().enumerate() {
            let expect = 1.0 / (g.degree(v) + 1) as f64;
            for h in 0..2 {
                assert!((a.get(e, h) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let g = graph(3, &[(0, 1)]);
        let c = GnnConfig::new(Backbone::Sage, 2, 4);
        let mut s = ParamStore::new();
        let p = init_params(&c, 0, &mut s).unwrap();
        let tape = Tape::new();
        let bound = s.bind(&tape);
        let h0 = tape.constant(Tensor::zeros(2, 2));
        assert!(matches!(forward(&tape, &bound, &g, h0, &p, &c), Err(Error::Dimension(_))));
    }
}
