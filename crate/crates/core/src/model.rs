//! Prompt parameters and a GNN backbone sharing one parameter store.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use ultradp_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::gnn::{self, Backbone, GnnConfig, GnnParams};
use crate::graph::{sample_subgraph_with, Graph, SamplerKind};
use crate::params::{Bound, ParamStore};
use crate::prompt::{attach_prompts, position_encodings, AnchorSet, PromptParams, DEFAULT_EPSILON};
use crate::reach::ReachabilityCache;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub feature_dim: usize,
    pub num_anchors: usize,
    pub num_tasks: usize,
    pub w_pos: f64,
    pub epsilon: f64,
}

impl ModelConfig {
    pub fn new(backbone: Backbone, feature_dim: usize, num_anchors: usize, num_tasks: usize) -> Self {
        Self {
            backbone,
            layers: 3,
            hidden_dim: 64,
            heads: 8,
            feature_dim,
            num_anchors,
            num_tasks,
            w_pos: 1.0,
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// The GNN consumes aligned rows, so its input width is `hidden_dim`.
    pub fn gnn(&self) -> GnnConfig {
        GnnConfig {
            backbone: self.backbone,
            layers: self.layers,
            input_dim: self.hidden_dim,
            hidden_dim: self.hidden_dim,
            heads: self.heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub store: ParamStore,
    pub prompt: PromptParams,
    pub gnn: GnnParams,
    pub config: ModelConfig,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let prompt = PromptParams::register(
            &mut store,
            config.feature_dim,
            config.hidden_dim,
            config.num_anchors,
            config.num_tasks,
            config.w_pos,
            config.epsilon,
            rng::derive_seed(seed, "model", 0),
        )?;
        let gnn = gnn::init_params(&config.gnn(), rng::derive_seed(seed, "model", 1), &mut store)?;
        Ok(Self { store, prompt, gnn, config })
    }

    /// Rebuilds a model around tensors loaded from elsewhere.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut prompt = PromptParams::detached(
            config.feature_dim,
            config.hidden_dim,
            config.num_anchors,
            config.num_tasks,
            config.w_pos,
            config.epsilon,
        );
        prompt.attach(&store)?;
        let gnn = gnn::attach_params(&config.gnn(), &store)?;
        Ok(Self { store, prompt, gnn, config })
    }

    /// Row `j` of the task table as a `[1, d]` tape variable.
    pub fn task_row_on(&self, tape: &Tape, bound: &Bound, j: usize) -> Result<Var> {
        if j >= self.config.num_tasks {
            return Err(Error::Argument(format!("task {j} outside 0..{}", self.config.num_tasks)));
        }
        Ok(tape.gather_rows(bound.var(self.prompt.task_table()), Rc::from(vec![j]))?)
    }

    /// Representations of `targets` (local ids in `sub`, distinct) after
    /// attaching one prompt per target. `enc` holds their raw encodings.
    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        sub: &Graph,
        targets: &[usize],
        enc: &Tensor,
        task_row: Var,
    ) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Argument("forward needs at least one target".into()));
        }
        let d = self.config.feature_dim;
        if sub.feature_dim() != d {
            return Err(Error::Dimension(format!("graph features have width {}, model expects {d}", sub.feature_dim())));
        }
        let (aug, _) = attach_prompts(sub, targets, &Tensor::zeros(targets.len(), d))?;
        let prompts = self.prompt.prompt_features_on(tape, bound, task_row, enc)?;
        let normal = tape.constant(sub.features().clone());
        let h0 = self.prompt.align_on(tape, bound, normal, Some(prompts))?;
        let h = gnn::forward(tape, bound, &aug, h0, &self.gnn, &self.config.gnn())?;
        Ok(tape.gather_rows(h, Rc::from(targets))?)
    }
}

/// Where a prompted forward gets its structure and positions from.
#[derive(Clone, Copy)]
pub struct Context<'a> {
    pub graph: &'a Graph,
    pub cache: &'a ReachabilityCache,
    pub anchors: &'a AnchorSet,
    pub sampler: SamplerKind,
    pub budget: usize,
}

/// Distinct nodes in first-occurrence order and, for every input position,
/// its index in that list.
pub fn dedup_targets(nodes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut pos: HashMap<usize, usize> = HashMap::with_capacity(nodes.len());
    let mut distinct = Vec::new();
    let slots = nodes
        .iter()
        .map(|&v| {
            *pos.entry(v).or_insert_with(|| {
                distinct.push(v);
                distinct.len() - 1
            })
        })
        .collect();
    (distinct, slots)
}

impl Context<'_> {
    /// Samples a subgraph around `nodes` (original ids, may repeat), prompts
    /// the distinct ones and returns one representation row per input entry.
    pub fn represent(
        &self,
        model: &Model,
        tape: &Tape,
        bound: &Bound,
        nodes: &[usize],
        task_row: Var,
        seed: u64,
    ) -> Result<Var> {
        self.represent_on(self.graph, model, tape, bound, nodes, task_row, seed)
    }

    /// As [`Context::represent`] but on a graph sharing ids with the
    /// context graph (e.g. an augmented view).
    #[allow(clippy::too_many_arguments)]
    pub fn represent_on(
        &self,
        graph: &Graph,
        model: &Model,
        tape: &Tape,
        bound: &Bound,
        nodes: &[usize],
        task_row: Var,
        seed: u64,
    ) -> Result<Var> {
        let (distinct, slots) = dedup_targets(nodes);
        let layers = model.config.layers;
        let (sub, _) = sample_subgraph_with(self.sampler, graph, &distinct, layers, self.budget, seed)?;
        let local: Vec<usize> = (0..distinct.len()).collect();
        let enc = position_encodings(self.cache, self.anchors, &distinct)?;
        let reps = model.forward(tape, bound, &sub, &local, &enc, task_row)?;
        if slots == local {
            return Ok(reps);
        }
        Ok(tape.gather_rows(reps, Rc::from(slots))?)
    }

    /// Numeric representations of `nodes` in chunks of `batch`, prompted
    /// with the fixed `task_row`.
    pub fn embed(&self, model: &Model, nodes: &[usize], task_row: &[f64], batch: usize, seed: u64) -> Result<Tensor> {
        let batch = batch.max(1);
        let width = model.config.hidden_dim;
        let mut data = Vec::with_capacity(nodes.len() * width);
        for (c, chunk) in nodes.chunks(batch).enumerate() {
            let tape = Tape::new();
            let bound = model.store.bind(&tape);
            let row = tape.constant(Tensor::row(task_row));
            let reps = self.represent(model, &tape, &bound, chunk, row, rng::derive_seed(seed, "embed", c as u64))?;
            data.extend_from_slice(tape.value(reps).data());
        }
        Ok(Tensor::new(nodes.len(), width, data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::select_anchors;
    use crate::reach::{build_cache, build_transition};

    fn setup() -> (Graph, ReachabilityCache, AnchorSet) {
        let f = Tensor::new(6, 3, (0..18).map(|i| ((i * 7) % 5) as f64 - 2.0).collect()).unwrap();
        let g = Graph::from_edges(&[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 3)], f, None).unwrap();
        let c = build_cache(&build_transition(&g), 2).unwrap();
        let a = select_anchors(&c, 2, 2).unwrap();
        (g, c, a)
    }

    #[test]
    fn dedup() {
        let (d, s) = dedup_targets(&[4, 2, 4, 9, 2]);
        assert_eq!(d, vec![4, 2, 9]);
        assert_eq!(s, vec![0, 1, 0, 2, 1]);
    }

    #[test]
    fn store_round_trip() {
        let mut cfg = ModelConfig::new(Backbone::Gcn, 3, 2, 2);
        cfg.hidden_dim = 8;
        let m = Model::new(cfg.clone(), 4).unwrap();
        let again = Model::from_store(cfg, m.store.clone()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn repeated_nodes_share_rows() {
        let (g, c, a) = setup();
        let mut cfg = ModelConfig::new(Backbone::Sage, 3, 2, 1);
        cfg.hidden_dim = 4;
        let m = Model::new(cfg, 0).unwrap();
        let ctx = Context { graph: &g, cache: &c, anchors: &a, sampler: SamplerKind::Ladies, budget: 10 };
        let tape = Tape::new();
        let bound = m.store.bind(&tape);
        let row = m.task_row_on(&tape, &bound, 0).unwrap();
        let r = tape.value(ctx.represent(&m, &tape, &bound, &[5, 1, 5], row, 0).unwrap());
        assert_eq!(r.shape(), [3, 4]);
        assert_eq!(r.row_slice(0), r.row_slice(2));
    }
}
