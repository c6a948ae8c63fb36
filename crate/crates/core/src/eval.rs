//! K-shot fine-tuning with class prototypes, the initialisation-selection
//! test over pre-trained task rows, and metrics.
//!
//! A fine-tuned model adds two tensors to the pre-trained store:
//! `down.task`, the single task row used for every downstream prompt, and
//! `down.proto`, one prototype per class. Classification picks the
//! prototype with the highest cosine similarity.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ultradp_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::graph::{Graph, KShotSample, SamplerKind};
use crate::model::{Context, Model};
use crate::optim::AdamW;
use crate::params::ParamId;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub sampler: SamplerKind,
    pub budget: usize,
    /// Nodes per forward pass when only predictions are needed.
    pub eval_batch: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            patience: 50,
            lr: 1e-3,
            weight_decay: 0.0,
            sampler: SamplerKind::Ladies,
            budget: 512,
            eval_batch: 256,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "fine-tuning patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean over rows of `−log softmax(S(h, E))[label]`, with `S` the cosine.
pub fn downstream_loss_on(tape: &Tape, reps: Var, protos: Var, labels: &[usize]) -> Result<Var> {
    let [b, _] = tape.shape(reps);
    let c = tape.shape(protos)[0];
    if labels.len() != b {
        return Err(Error::Dimension(format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Argument(format!("label {bad} outside 0..{c}")));
    }
    let unit = |z: Var| -> Result<Var> { Ok(tape.div(z, tape.l2_norm_rows(z))?) };
    let sim = tape.matmul(unit(reps)?, tape.transpose(unit(protos)?))?;
    let mut onehot = Tensor::zeros(b, c);
    for (r, &l) in labels.iter().enumerate() {
        onehot.set(r, l, 1.0);
    }
    let picked = tape.sum_rows(tape.mul(sim, tape.constant(onehot))?);
    Ok(tape.mean(tape.sub(tape.log_sum_exp_rows(sim), picked)?)?)
}

pub fn downstream_loss(reps: &Tensor, labels: &[usize], protos: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let l = downstream_loss_on(&tape, tape.constant(reps.clone()), tape.constant(protos.clone()), labels)?;
    Ok(tape.value(l).item()?)
}

/// Index of the most cosine-similar prototype for every row.
pub fn classify(reps: &Tensor, protos: &Tensor) -> Vec<usize> {
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    (0..reps.rows())
        .map(|r| {
            let h = reps.row_slice(r);
            let nh = norm(h);
            let mut best = (f64::NEG_INFINITY, 0);
            for c in 0..protos.rows() {
                let e = protos.row_slice(c);
                let s = h.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / (nh * norm(e));
                if s > best.0 {
                    best = (s, c);
                }
            }
            best.1
        })
        .collect()
}

/// Micro-averaged F1; with one label per node this is accuracy.
pub fn micro_f1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Argument("micro-F1 of nothing".into()));
    }
    let tp = pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64;
    let fp = pred.len() as f64 - tp;
    let fnn = fp;
    Ok(2.0 * tp / (2.0 * tp + fp + fnn))
}

/// Area under the ROC curve from the rank-sum statistic, ties averaged.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Argument("AUC needs positives and negatives".into()));
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Index of the best `(val_micro_f1, val_loss)` pair: highest F1, then
/// lowest loss, then earliest.
pub fn select_best(scores: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(f1, loss)) in scores.iter().enumerate() {
        let better = best.is_none_or(|b| {
            let (bf, bl) = scores[b];
            f1 > bf || (f1 == bf && loss < bl)
        });
        if better {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Finetuned {
    pub model: Model,
    pub down_task: ParamId,
    pub prototypes: ParamId,
    pub init_task: usize,
    pub val_micro_f1: f64,
    pub val_loss: f64,
    pub best_epoch: usize,
}

impl Finetuned {
    pub fn task_row(&self) -> Vec<f64> {
        self.model.store.get(self.down_task).data().to_vec()
    }

    pub fn predict(&self, ctx: &Context<'_>, nodes: &[usize], batch: usize, seed: u64) -> Result<Vec<usize>> {
        let reps = ctx.embed(&self.model, nodes, &self.task_row(), batch, seed)?;
        Ok(classify(&reps, self.model.store.get(self.prototypes)))
    }
}

fn labels_of(graph: &Graph, nodes: &[usize]) -> Result<Vec<usize>> {
    let labels = graph.labels().ok_or_else(|| Error::Config("fine-tuning needs node labels".into()))?;
    Ok(nodes.iter().map(|&v| labels[v]).collect())
}

/// Fine-tunes a copy of `model` on `kshot.train_nodes`, initialising the
/// downstream task row from pre-trained row `init_task`.
pub fn finetune_one(
    model: &Model,
    ctx: &Context<'_>,
    kshot: &KShotSample,
    init_task: usize,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<Finetuned> {
    config.validate()?;
    let classes = ctx.graph.num_classes().ok_or_else(|| Error::Config("fine-tuning needs node labels".into()))?;
    let train_y = labels_of(ctx.graph, &kshot.train_nodes)?;
    let val_y = labels_of(ctx.graph, &kshot.val_nodes)?;
    if kshot.train_nodes.is_empty() || kshot.val_nodes.is_empty() {
        return Err(Error::Config("the K-shot sample has no training or validation nodes".into()));
    }
    let row = model.prompt.task_row(&model.store, init_task)?;
    let mut ft = model.clone();
    let down_task = ft.store.insert("down.task", Tensor::row(&row))?;

    let init = ctx.embed(&ft, &kshot.train_nodes, &row, config.eval_batch, rng::derive_seed(seed, "proto-init", 0))?;
    let width = init.cols();
    let mut protos = Tensor::zeros(classes, width);
    let mut counts = vec![0usize; classes];
    for (r, &y) in train_y.iter().enumerate() {
        counts[y] += 1;
        for (p, h) in protos.row_slice_mut(y).iter_mut().zip(init.row_slice(r)) {
            *p += h;
        }
    }
    let mut prng = rng::stream(seed, "proto-fill", 0);
    for (c, &k) in counts.iter().enumerate() {
        let row = protos.row_slice_mut(c);
        if k == 0 {
            row.iter_mut().for_each(|x| *x = prng.gen_range(-0.1..0.1));
        } else {
            row.iter_mut().for_each(|x| *x /= k as f64);
        }
    }
    let prototypes = ft.store.insert("down.proto", protos)?;
    let mut optim = AdamW::new(&ft.store, config.lr, config.weight_decay);

    let val_seed = rng::derive_seed(seed, "ft-val", 0);
    let evaluate = |m: &Model| -> Result<(f64, f64)> {
        let tape = Tape::new();
        let bound = m.store.bind(&tape);
        let reps = ctx.represent(m, &tape, &bound, &kshot.val_nodes, bound.var(down_task), val_seed)?;
        let loss = downstream_loss_on(&tape, reps, bound.var(prototypes), &val_y)?;
        let pred = classify(&tape.value(reps), m.store.get(prototypes));
        Ok((tape.value(loss).item()?, micro_f1(&pred, &val_y)?))
    };

    let (l0, f0) = evaluate(&ft)?;
    let mut best = (l0, f0, 0usize, ft.store.clone());
    let mut since = 0;
    for epoch in 1..=config.max_epochs {
        let tape = Tape::new();
        let bound = ft.store.bind(&tape);
        let s = rng::derive_seed(seed, "ft-epoch", epoch as u64);
        let reps = ctx.represent(&ft, &tape, &bound, &kshot.train_nodes, bound.var(down_task), s)?;
        let loss = downstream_loss_on(&tape, reps, bound.var(prototypes), &train_y)?;
        let grads = ft.store.collect_grads(&bound, &tape.backward(loss)?);
        optim.step(&mut ft.store, &grads)?;
        let (vl, vf) = evaluate(&ft)?;
        if vl < best.0 {
            best = (vl, vf, epoch, ft.store.clone());
            since = 0;
        } else {
            since += 1;
            if since >= config.patience {
                break;
            }
        }
    }
    let (val_loss, val_micro_f1, best_epoch, store) = best;
    ft.store = store;
    Ok(Finetuned { model: ft, down_task, prototypes, init_task, val_micro_f1, val_loss, best_epoch })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub init_task: usize,
    pub val_micro_f1: f64,
    pub val_loss: f64,
    pub test_micro_f1: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferOutcome {
    pub candidates: Vec<Candidate>,
    pub chosen: usize,
    pub test_micro_f1: f64,
}

/// Fine-tunes once per pre-trained task row and keeps the run with the
/// best validation Micro-F1.
pub fn transferability_test(
    model: &Model,
    ctx: &Context<'_>,
    kshot: &KShotSample,
    test_nodes: &[usize],
    config: &FinetuneConfig,
    seed: u64,
) -> Result<TransferOutcome> {
    if model.config.num_tasks == 0 {
        return Err(Error::Config("the model has no task rows".into()));
    }
    let test_y = labels_of(ctx.graph, test_nodes)?;
    let candidates = (0..model.config.num_tasks)
        .into_par_iter()
        .map(|j| {
            let ft = finetune_one(model, ctx, kshot, j, config, seed)?;
            let pred = ft.predict(ctx, test_nodes, config.eval_batch, rng::derive_seed(seed, "test", 0))?;
            Ok(Candidate {
                init_task: j,
                val_micro_f1: ft.val_micro_f1,
                val_loss: ft.val_loss,
                test_micro_f1: micro_f1(&pred, &test_y)?,
                best_epoch: ft.best_epoch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<(f64, f64)> = candidates.iter().map(|c| (c.val_micro_f1, c.val_loss)).collect();
    let chosen = select_best(&scores).expect("at least one candidate");
    Ok(TransferOutcome { test_micro_f1: candidates[chosen].test_micro_f1, chosen, candidates })
}

/// Removes a `ratio` share of edges (at least one) for link probing.
pub fn hold_out_edges(graph: &Graph, ratio: f64, seed: u64) -> Result<(Graph, Vec<(usize, usize)>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Argument(format!("held-out ratio {ratio} outside [0, 1)")));
    }
    let mut edges: Vec<(usize, usize)> = graph.edges().collect();
    if ratio == 0.0 || edges.is_empty() {
        return Ok((graph.clone(), Vec::new()));
    }
    let k = ((edges.len() as f64 * ratio).round() as usize).max(1);
    let mut rng = rng::stream(seed, "link-holdout", 0);
    let (held, _) = edges.partial_shuffle(&mut rng, k);
    let mut held = held.to_vec();
    held.sort_unstable();
    Ok((graph.without_edges(&held)?, held))
}

/// Link-prediction AUC of cosine scores between representations, with as
/// many uniformly drawn non-edges as held-out edges. `full` is the graph
/// before holding out; negatives avoid all of its edges.
pub fn link_auc(
    model: &Model,
    ctx: &Context<'_>,
    full: &Graph,
    held: &[(usize, usize)],
    task_row: &[f64],
    batch: usize,
    seed: u64,
) -> Result<f64> {
    if held.is_empty() {
        return Err(Error::Argument("link probing needs held-out edges".into()));
    }
    let n = full.num_nodes();
    let mut rng = rng::stream(seed, "link-negatives", 0);
    let mut negs = Vec::with_capacity(held.len());
    let mut seen = HashSet::new();
    let mut tries = 0usize;
    while negs.len() < held.len() {
        tries += 1;
        if tries > 1000 * held.len() + 1000 {
            return Err(Error::Sampling("too few non-edges for link negatives".into()));
        }
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let key = (a.min(b), a.max(b));
        if a != b && !full.has_edge(a, b) && seen.insert(key) {
            negs.push(key);
        }
    }
    let mut nodes: Vec<usize> = held.iter().chain(&negs).flat_map(|&(a, b)| [a, b]).collect();
    nodes.sort_unstable();
    nodes.dedup();
    let reps = ctx.embed(model, &nodes, task_row, batch, rng::derive_seed(seed, "link-embed", 0))?;
    let row = |v: usize| reps.row_slice(nodes.binary_search(&v).expect("embedded"));
    let score = |&(a, b): &(usize, usize)| {
        let (x, y) = (row(a), row(b));
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny).max(f64::MIN_POSITIVE)
    };
    let pos: Vec<f64> = held.iter().map(score).collect();
    let neg: Vec<f64> = negs.iter().map(score).collect();
    auc(&pos, &neg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downstream_examples() {
        let reps = Tensor::row(&[1.0, 0.0]);
        assert!(downstream_loss(&reps, &[0], &Tensor::row(&[0.3, 2.0])).unwrap().abs() < 1e-15);

        let protos = Tensor::from_rows(&[vec![2.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let l = downstream_loss(&reps, &[0], &protos).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + (-1f64).exp())).ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.1269).abs() < 1e-4);

        let eq = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 2.0], vec![0.0, 0.5]]).unwrap();
        let l = downstream_loss(&reps, &[2], &eq).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);

        assert!(downstream_loss(&Tensor::zeros(1, 2), &[0], &protos).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(micro_f1(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(micro_f1(&[1, 2, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(micro_f1(&[0, 1, 1, 0], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert!(matches!(micro_f1(&[], &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3, 0.3], &[0.3, 0.3, 0.3]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
        assert!(auc(&[], &[1.0]).is_err());
    }

    #[test]
    fn selection_ties_go_low() {
        assert_eq!(select_best(&[(0.5, 0.1), (0.7, 0.9), (0.7, 0.9)]), Some(1));
        assert_eq!(select_best(&[(0.2, 1.0), (0.2, 1.0)]), Some(0));
        assert_eq!(select_best(&[(0.8, 0.4), (0.8, 0.3), (0.6, 0.1)]), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn holdout_sizes() {
        let edges: Vec<_> = (0..40).map(|i| (i, i + 1)).collect();
        let g = Graph::from_edges(&edges, Tensor::zeros(41, 1), None).unwrap();
        let (rest, held) = hold_out_edges(&g, 0.05, 3).unwrap();
        assert_eq!(held.len(), 2);
        assert_eq!(rest.num_edges(), 38);
        assert!(held.iter().all(|&(a, b)| !rest.has_edge(a, b) && g.has_edge(a, b)));
    }
}
