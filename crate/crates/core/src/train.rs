//! Hybrid pre-training.
//!
//! Each step draws one task from the configured mixture, samples its
//! targets from the pre-training pool, builds a prompted subgraph with that
//! task's embedding row and takes one AdamW step on every parameter. After
//! each epoch the mixture-weighted loss on a fixed holdout decides early
//! stopping; the best parameters seen are returned.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use ultradp_autodiff::{Tape, Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{sample_subgraph_with, Graph, SamplerKind, SplitSpec};
use crate::model::{dedup_targets, Context, Model, ModelConfig};
use crate::optim::AdamW;
use crate::params::{Bound, ParamStore};
use crate::pretext::{self, TaskKind};
use crate::prompt::{position_encodings, AnchorSet};
use crate::reach::ReachabilityCache;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskWeight {
    pub task: TaskKind,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tasks: Vec<TaskWeight>,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Walk length of the k-NN task.
    pub knn_step: usize,
    pub alpha: f64,
    pub alpha_knn: f64,
    pub k: usize,
    pub cl_ratio: f64,
    pub cl_temperature: f64,
    pub sampler: SamplerKind,
    /// Nodes added per sampling round.
    pub budget: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tasks: vec![
                TaskWeight { task: TaskKind::Edge, weight: 0.5 },
                TaskWeight { task: TaskKind::Knn, weight: 0.5 },
            ],
            batch_size: 256,
            lr: 1e-3,
            weight_decay: 0.0,
            max_epochs: 500,
            patience: 50,
            knn_step: 6,
            alpha: 0.5,
            alpha_knn: 1.0,
            k: 4,
            cl_ratio: 0.2,
            cl_temperature: 0.5,
            sampler: SamplerKind::Ladies,
            budget: 512,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one pretext task is required".into()));
        }
        let mut keys: Vec<_> = self.tasks.iter().map(|t| t.task).collect();
        keys.sort();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("a task is listed twice".into()));
        }
        if self.tasks.iter().any(|t| !(t.weight >= 0.0) || !t.weight.is_finite()) {
            return Err(Error::Config("task probabilities must be finite and non-negative".into()));
        }
        let total: f64 = self.tasks.iter().map(|t| t.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("task probabilities sum to {total}, not 1")));
        }
        if self.batch_size == 0 || self.k == 0 || self.knn_step == 0 {
            return Err(Error::Config("batch_size, k and knn_step must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.cl_ratio) || !(self.cl_temperature > 0.0) {
            return Err(Error::Config("cl_ratio must be in [0, 1] and cl_temperature positive".into()));
        }
        Ok(())
    }

    pub fn task_kinds(&self) -> Vec<TaskKind> {
        self.tasks.iter().map(|t| t.task).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Steps taken per task this epoch.
    pub task_steps: BTreeMap<String, usize>,
    /// Mean training loss per task this epoch.
    pub train_loss: BTreeMap<String, f64>,
    pub val_loss: f64,
    pub val_task_loss: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: Model,
    pub optimizer: AdamW,
    pub tasks: Vec<TaskKind>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: Vec<EpochLog>,
}

/// Targets and loss of one task on one batch.
struct TaskRun<'a> {
    ctx: Context<'a>,
    config: &'a TrainConfig,
}

impl TaskRun<'_> {
    fn loss(
        &self,
        model: &Model,
        tape: &Tape,
        bound: &Bound,
        task: TaskKind,
        row: Var,
        pool: &[usize],
        count: usize,
        seed: u64,
    ) -> Result<Var> {
        let cfg = self.config;
        let sub_seed = rng::derive_seed(seed, "subgraph", 0);
        match task {
            TaskKind::Edge => {
                let batch = pretext::sample_edge_batch_from(self.ctx.graph, pool, count, seed)?;
                let b = batch.triplets.len();
                let nodes: Vec<usize> = batch
                    .triplets
                    .iter()
                    .map(|t| t.0)
                    .chain(batch.triplets.iter().map(|t| t.1))
                    .chain(batch.triplets.iter().map(|t| t.2))
                    .collect();
                let reps = self.ctx.represent(model, tape, bound, &nodes, row, sub_seed)?;
                let part = |k: usize| -> Result<Var> {
                    Ok(tape.gather_rows(reps, (k * b..(k + 1) * b).collect::<Rc<[usize]>>())?)
                };
                pretext::edge_loss_on(tape, part(0)?, part(1)?, part(2)?, cfg.alpha)
            }
            TaskKind::Knn => {
                let p = self.ctx.cache.power(cfg.knn_step)?;
                let usable: Vec<usize> = pool.iter().copied().filter(|&v| !p.row(v).0.is_empty()).collect();
                if usable.is_empty() {
                    return Err(Error::Sampling("no pool node reaches anything".into()));
                }
                let mut rng = rng::stream(seed, "knn-anchors", 0);
                let anchors: Vec<usize> = (0..count).map(|_| usable[rng.gen_range(0..usable.len())]).collect();
                let mut pos = Vec::with_capacity(count * cfg.k);
                let mut neg = Vec::with_capacity(count * cfg.k);
                for (j, &a) in anchors.iter().enumerate() {
                    let s = rng::derive_seed(seed, "knn", j as u64);
                    let kb = pretext::sample_knn_batch(self.ctx.cache, a, cfg.k, cfg.knn_step, s)?;
                    pos.extend(kb.positives);
                    neg.extend(kb.negatives);
                }
                let b = anchors.len();
                let nodes: Vec<usize> = anchors.iter().chain(&pos).chain(&neg).copied().collect();
                let reps = self.ctx.represent(model, tape, bound, &nodes, row, sub_seed)?;
                let slice = |a: usize, z: usize| -> Result<Var> {
                    Ok(tape.gather_rows(reps, (a..z).collect::<Rc<[usize]>>())?)
                };
                let bk = b * cfg.k;
                pretext::knn_loss_on(
                    tape,
                    slice(0, b)?,
                    slice(b, b + bk)?,
                    slice(b + bk, b + 2 * bk)?,
                    cfg.k,
                    cfg.alpha_knn,
                )
            }
            TaskKind::Cl => {
                let mut rng = rng::stream(seed, "cl-targets", 0);
                let targets: Vec<usize> = pool.choose_multiple(&mut rng, count.min(pool.len())).copied().collect();
                let (distinct, _) = dedup_targets(&targets);
                let (sub, _) = sample_subgraph_with(
                    self.ctx.sampler,
                    self.ctx.graph,
                    &distinct,
                    model.config.layers,
                    self.ctx.budget,
                    sub_seed,
                )?;
                let local: Vec<usize> = (0..distinct.len()).collect();
                let enc = position_encodings(self.ctx.cache, self.ctx.anchors, &distinct)?;
                let view = |v: u64| -> Result<Var> {
                    let g = pretext::augment(&sub, cfg.cl_ratio, seed, v)?;
                    model.forward(tape, bound, &g, &local, &enc, row)
                };
                let (z1, z2) = (view(0)?, view(1)?);
                pretext::nt_xent_on(tape, z1, z2, cfg.cl_temperature)
            }
        }
    }
}

fn fit_error(task: TaskKind, e: Error) -> Error {
    match e {
        Error::Sampling(m) => Error::Config(format!("task `{task}` cannot run on this graph: {m}")),
        other => other,
    }
}

/// Runs the pre-training loop. `cache` must cover `max(t, knn_step)` and
/// `anchors` carry the position step `t`.
pub fn pretrain(
    graph: &Graph,
    split: &SplitSpec,
    cache: &ReachabilityCache,
    anchors: &AnchorSet,
    model_config: ModelConfig,
    config: &TrainConfig,
) -> Result<Pretrained> {
    config.validate()?;
    let tasks = config.task_kinds();
    if model_config.num_tasks != tasks.len() {
        return Err(Error::Config(format!(
            "model has {} task rows for {} tasks",
            model_config.num_tasks,
            tasks.len()
        )));
    }
    if cache.max_step() < config.knn_step.max(anchors.step()) {
        return Err(Error::Config(format!(
            "cache holds {} steps, training needs {}",
            cache.max_step(),
            config.knn_step.max(anchors.step())
        )));
    }
    if split.pretrain_nodes.is_empty() {
        return Err(Error::Config("the split has no pre-training nodes".into()));
    }
    let mut pool = split.pretrain_nodes.clone();
    pool.shuffle(&mut rng::stream(config.seed, "val-holdout", 0));
    let hold = pool.len().div_ceil(10).min(pool.len().saturating_sub(1)).max(1);
    let holdout: Vec<usize> = pool[..hold].to_vec();
    let train_pool: Vec<usize> = if pool.len() > hold { pool[hold..].to_vec() } else { holdout.clone() };

    let ctx = Context { graph, cache, anchors, sampler: config.sampler, budget: config.budget };
    let run = TaskRun { ctx, config };
    let mut model = Model::new(model_config, rng::derive_seed(config.seed, "init", 0))?;
    let mut optim = AdamW::new(&model.store, config.lr, config.weight_decay);

    let weights: Vec<f64> = config.tasks.iter().map(|t| t.weight).collect();
    let picker = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
    let steps_per_epoch = split.pretrain_nodes.len().div_ceil(config.batch_size);

    let validate = |model: &Model| -> Result<(f64, BTreeMap<String, f64>)> {
        let mut total = 0.0;
        let mut per = BTreeMap::new();
        for (j, tw) in config.tasks.iter().enumerate() {
            if tw.weight == 0.0 {
                continue;
            }
            let tape = Tape::new();
            let bound = model.store.bind(&tape);
            let row = model.task_row_on(&tape, &bound, j)?;
            let seed = rng::derive_seed(config.seed, "val-batch", j as u64);
            let l = run
                .loss(model, &tape, &bound, tw.task, row, &holdout, holdout.len(), seed)
                .map_err(|e| fit_error(tw.task, e))?;
            let v = tape.value(l).item()?;
            per.insert(tw.task.key().to_string(), v);
            total += tw.weight * v;
        }
        Ok((total, per))
    };

    let mut best: Option<(f64, usize, ParamStore, AdamW)> = None;
    let mut since_best = 0usize;
    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 1..=config.max_epochs {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for _ in 0..steps_per_epoch {
            let j = picker.sample(&mut rng::stream(config.seed, "task-pick", step));
            let task = tasks[j];
            let tape = Tape::new();
            let bound = model.store.bind(&tape);
            let row = model.task_row_on(&tape, &bound, j)?;
            let seed = rng::derive_seed(config.seed, "step", step);
            let loss = run
                .loss(&model, &tape, &bound, task, row, &train_pool, config.batch_size, seed)
                .map_err(|e| fit_error(task, e))?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Training(format!("task `{task}` produced loss {value} at step {step}")));
            }
            let grads = model.store.collect_grads(&bound, &tape.backward(loss)?);
            optim.step(&mut model.store, &grads)?;
            let e = sums.entry(task.key().to_string()).or_insert((0.0, 0));
            e.0 += value;
            e.1 += 1;
            step += 1;
        }
        let (val, val_task_loss) = validate(&model)?;
        log::info!("epoch {epoch}: validation loss {val:.6}");
        log.push(EpochLog {
            epoch,
            task_steps: sums.iter().map(|(k, v)| (k.clone(), v.1)).collect(),
            train_loss: sums.iter().map(|(k, v)| (k.clone(), v.0 / v.1 as f64)).collect(),
            val_loss: val,
            val_task_loss,
        });
        if best.as_ref().is_none_or(|b| val < b.0) {
            best = Some((val, epoch, model.store.clone(), optim.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log::info!("no improvement for {since_best} epochs, stopping");
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, store, optimizer) = match best {
        Some(b) => b,
        None => {
            let (v, _) = validate(&model)?;
            (v, 0, model.store.clone(), optim)
        }
    };
    model.store = store;
    Ok(Pretrained { model, optimizer, tasks, best_epoch, best_val_loss, log })
}

impl Pretrained {
    pub fn to_checkpoint(&self, config: Value, config_hash: String) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("model".into(), serde_json::to_value(&self.model.config).expect("config serialises"));
        meta.insert("tasks".into(), Value::from(self.tasks.iter().map(|t| t.key()).collect::<Vec<_>>()));
        meta.insert("best_epoch".into(), Value::from(self.best_epoch));
        meta.insert("best_val_loss".into(), Value::from(self.best_val_loss));
        meta.insert("optimizer_step".into(), Value::from(self.optimizer.steps()));
        meta.insert("lr".into(), Value::from(self.optimizer.lr));
        meta.insert("weight_decay".into(), Value::from(self.optimizer.weight_decay));
        let mut tensors: Vec<(String, Tensor)> =
            self.model.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        let (m, v) = self.optimizer.moments();
        for ((_, n, _), t) in self.model.store.iter().zip(m) {
            tensors.push((format!("adam.m.{n}"), t.clone()));
        }
        for ((_, n, _), t) in self.model.store.iter().zip(v) {
            tensors.push((format!("adam.v.{n}"), t.clone()));
        }
        Checkpoint { config, config_hash, meta, tensors }
    }
}

/// The model, task list and optimizer stored in a checkpoint.
pub fn restore(ckpt: &Checkpoint) -> Result<(Model, Vec<TaskKind>, AdamW)> {
    let get = |k: &str| ckpt.meta.get(k).ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}`")));
    let config: ModelConfig =
        serde_json::from_value(get("model")?.clone()).map_err(|e| Error::Format(e.to_string()))?;
    let tasks: Vec<String> =
        serde_json::from_value(get("tasks")?.clone()).map_err(|e| Error::Format(e.to_string()))?;
    let tasks = tasks.iter().map(|t| t.parse()).collect::<Result<Vec<TaskKind>>>()?;
    let mut store = ParamStore::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for (name, t) in &ckpt.tensors {
        if let Some(p) = name.strip_prefix("adam.m.") {
            m.push((p.to_string(), t.clone()));
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            v.push((p.to_string(), t.clone()));
        } else {
            store.insert(name.clone(), t.clone())?;
        }
    }
    let step = get("optimizer_step")?.as_u64().unwrap_or(0);
    let lr = get("lr")?.as_f64().unwrap_or(0.0);
    let wd = get("weight_decay")?.as_f64().unwrap_or(0.0);
    let order = |xs: Vec<(String, Tensor)>| -> Result<Vec<Tensor>> {
        store
            .iter()
            .map(|(_, n, _)| {
                xs.iter()
                    .find(|(k, _)| k == n)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::Format(format!("missing optimizer moment for `{n}`")))
            })
            .collect()
    };
    let optim = AdamW::from_state(&store, lr, wd, step, order(m)?, order(v)?)?;
    let model = Model::from_store(config, store)?;
    Ok((model, tasks, optim))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_checks() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.tasks[0].weight = 0.7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig { max_epochs: 3, patience: 5, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        c.patience = 3;
        c.tasks = vec![];
        assert!(c.validate().is_err());
    }
}
