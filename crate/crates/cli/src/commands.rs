use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use ultradp_core::checkpoint::Checkpoint;
use ultradp_core::eval::{hold_out_edges, link_auc, transferability_test, TransferOutcome};
use ultradp_core::graph::{load_graph, make_split, sample_kshot};
use ultradp_core::model::Context;
use ultradp_core::prompt::{select_anchors, AnchorSet};
use ultradp_core::reach::{build_cache, build_transition, ReachabilityCache};
use ultradp_core::train::{pretrain, restore};
use ultradp_core::Graph;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

const CACHE_FILE: &str = "reach.udpr";
const ANCHOR_FILE: &str = "anchors.json";
const MANIFEST_FILE: &str = "manifest.json";

/// The graph every stage trains on, plus the edges held out from it.
struct Data {
    full: Graph,
    graph: Graph,
    held: Vec<(usize, usize)>,
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    for p in [&cfg.data.edges, &cfg.data.features].into_iter().chain(cfg.data.labels.as_ref()) {
        if !p.is_file() {
            return Err(CliError::reading(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
        }
    }
    let full = load_graph(&cfg.data.edges, &cfg.data.features, cfg.data.labels.as_deref())?;
    let (graph, held) = hold_out_edges(&full, cfg.data.link_holdout, cfg.data.split_seed)?;
    log::info!(
        "graph: {} nodes, {} edges ({} held out)",
        full.num_nodes(),
        graph.num_edges(),
        held.len()
    );
    Ok(Data { full, graph, held })
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    cache_key: String,
    nodes: usize,
    max_step: usize,
    anchor_step: usize,
    anchors: usize,
}

fn anchor_count(cfg: &RunConfig, graph: &Graph) -> usize {
    cfg.prompt.anchors.unwrap_or_else(|| graph.num_nodes().div_ceil(100).max(1))
}

/// Hash of everything the cache depends on: the training graph's structure,
/// the longest walk and the anchor settings.
fn cache_key(cfg: &RunConfig, graph: &Graph) -> String {
    let mut h = Sha256::new();
    h.update((graph.num_nodes() as u64).to_le_bytes());
    for (a, b) in graph.edges() {
        h.update((a as u64).to_le_bytes());
        h.update((b as u64).to_le_bytes());
    }
    for x in [cfg.max_step(), cfg.prompt.step, anchor_count(cfg, graph)] {
        h.update((x as u64).to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

struct Cache {
    dir: PathBuf,
    reach: ReachabilityCache,
    anchors: AnchorSet,
}

fn read_manifest(dir: &Path) -> Option<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Loads the cache for `graph`, building and writing it first if absent.
fn ensure_cache(cfg: &RunConfig, graph: &Graph) -> Result<Cache> {
    let key = cache_key(cfg, graph);
    let dir = cfg.out_dir.join(format!("cache-{}", &key[..16]));
    let m = anchor_count(cfg, graph);
    let expected = Manifest {
        cache_key: key.clone(),
        nodes: graph.num_nodes(),
        max_step: cfg.max_step(),
        anchor_step: cfg.prompt.step,
        anchors: m,
    };
    if read_manifest(&dir).as_ref() == Some(&expected) {
        log::info!("reusing cache {}", dir.display());
        let reach = ReachabilityCache::load(&dir.join(CACHE_FILE))?;
        let anchors = AnchorSet::load_json(&dir.join(ANCHOR_FILE), cfg.prompt.step)?;
        if reach.num_nodes() != graph.num_nodes() || reach.max_step() < cfg.max_step() || anchors.len() != m {
            return Err(CliError::Config(format!("cache {} does not match its manifest", dir.display())));
        }
        return Ok(Cache { dir, reach, anchors });
    }

    log::info!("computing transition powers up to {}", cfg.max_step());
    let reach = build_cache(&build_transition(graph), cfg.max_step())?;
    let anchors = select_anchors(&reach, cfg.prompt.step, m)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::writing(&cfg.out_dir, e))?;
    let staging = cfg.out_dir.join(format!(".cache-{}-{}", &key[..16], std::process::id()));
    fs::create_dir_all(&staging).map_err(|e| CliError::writing(&staging, e))?;
    reach.save(&staging.join(CACHE_FILE))?;
    anchors.save_json(&staging.join(ANCHOR_FILE))?;
    let manifest = serde_json::to_string_pretty(&expected).expect("manifest serialises");
    fs::write(staging.join(MANIFEST_FILE), manifest).map_err(|e| CliError::writing(&staging, e))?;
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| CliError::writing(&dir, e))?;
    }
    fs::rename(&staging, &dir).map_err(|e| CliError::writing(&dir, e))?;
    Ok(Cache { dir, reach, anchors })
}

/// Creates `<out>/run-<hash16>-<utc timestamp>`, suffixed on collision.
fn run_dir(cfg: &RunConfig, hash: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::writing(&cfg.out_dir, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string().replace('.', "");
    let base = format!("run-{}-{stamp}", &hash[..16]);
    for i in 0.. {
        let name = if i == 0 { base.clone() } else { format!("{base}-{i}") };
        let dir = cfg.out_dir.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::writing(&dir, e)),
        }
    }
    unreachable!("unbounded suffix search")
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = Value>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| CliError::writing(path, e))?);
    for v in lines {
        writeln!(f, "{v}").map_err(|e| CliError::writing(path, e))?;
    }
    f.flush().map_err(|e| CliError::writing(path, e))
}

pub fn precompute(cfg: &RunConfig) -> Result<PathBuf> {
    let data = load_data(cfg)?;
    Ok(ensure_cache(cfg, &data.graph)?.dir)
}

pub fn pretrain_cmd(cfg: &RunConfig) -> Result<PathBuf> {
    let data = load_data(cfg)?;
    let cache = ensure_cache(cfg, &data.graph)?;
    let split = make_split(&data.graph, cfg.data.split_seed)?;
    let mc = cfg.model_config(data.graph.feature_dim(), cache.anchors.len());
    let trained = pretrain(&data.graph, &split, &cache.reach, &cache.anchors, mc, &cfg.pretrain)?;
    log::info!("best epoch {} with validation loss {:.6}", trained.best_epoch, trained.best_val_loss);

    let hash = cfg.hash();
    let dir = run_dir(cfg, &hash)?;
    trained.to_checkpoint(cfg.echo(), hash.clone()).save(&dir.join("checkpoint.udpc"))?;
    let log_lines = trained.log.iter().map(|e| {
        let mut v = serde_json::to_value(e).expect("log serialises");
        v["config_hash"] = Value::from(hash.clone());
        v
    });
    write_lines(&dir.join("train_log.jsonl"), log_lines)?;
    Ok(dir)
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub link_probe: bool,
}

fn candidate_records(hash: &str, seed: u64, shot: usize, tasks: &[String], out: &TransferOutcome) -> Vec<Value> {
    let mut v: Vec<Value> = out
        .candidates
        .iter()
        .map(|c| {
            json!({
                "config_hash": hash, "kind": "candidate", "seed": seed, "shot": shot,
                "init_task": c.init_task, "task": tasks[c.init_task],
                "val_micro_f1": c.val_micro_f1, "val_loss": c.val_loss,
                "test_micro_f1": c.test_micro_f1, "best_epoch": c.best_epoch,
            })
        })
        .collect();
    v.push(json!({
        "config_hash": hash, "kind": "selection", "seed": seed, "shot": shot,
        "chosen": out.chosen, "task": tasks[out.chosen], "test_micro_f1": out.test_micro_f1,
    }));
    v
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, opts: &EvalOptions) -> Result<PathBuf> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let hash = cfg.hash();
    if ckpt.config_hash != hash {
        return Err(CliError::Config(format!(
            "checkpoint {} was trained under config {}, this config hashes to {}",
            checkpoint.display(),
            ckpt.config_hash.get(..16).unwrap_or(&ckpt.config_hash),
            &hash[..16]
        )));
    }
    let (model, tasks, _) = restore(&ckpt)?;
    let tasks: Vec<String> = tasks.iter().map(|t| t.key().to_string()).collect();
    let data = load_data(cfg)?;
    if data.graph.labels().is_none() {
        return Err(CliError::Config("evaluation needs node labels (data.labels)".into()));
    }
    let link_probe = opts.link_probe || cfg.eval.link_probe;
    if link_probe && data.held.is_empty() {
        return Err(CliError::Config("link probing needs data.link_holdout > 0".into()));
    }
    let cache = ensure_cache(cfg, &data.graph)?;
    if cache.anchors.len() != model.config.num_anchors || data.graph.feature_dim() != model.config.feature_dim {
        return Err(CliError::Config("checkpoint dimensions do not match the data".into()));
    }
    let ctx = Context {
        graph: &data.graph,
        cache: &cache.reach,
        anchors: &cache.anchors,
        sampler: cfg.finetune.sampler,
        budget: cfg.finetune.budget,
    };
    let split = make_split(&data.graph, cfg.data.split_seed)?;

    let runs: Vec<(u64, usize)> =
        cfg.eval.seeds.iter().flat_map(|&s| cfg.eval.shots.iter().map(move |&k| (s, k))).collect();
    let outcomes = runs
        .par_iter()
        .map(|&(seed, shot)| {
            let kshot = sample_kshot(&split, &data.graph, shot, seed)?;
            let out = transferability_test(&model, &ctx, &kshot, &split.test_nodes, &cfg.finetune, seed)?;
            log::info!("seed {seed}, {shot}-shot: test Micro-F1 {:.4} via task {}", out.test_micro_f1, out.chosen);
            Ok((seed, shot, out))
        })
        .collect::<ultradp_core::Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut by_shot: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (seed, shot, out) in &outcomes {
        records.extend(candidate_records(&hash, *seed, *shot, &tasks, out));
        by_shot.entry(*shot).or_default().push(out.test_micro_f1);
    }

    let mut aucs: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    if link_probe {
        for &seed in &cfg.eval.seeds {
            for (j, name) in tasks.iter().enumerate() {
                let row = model.prompt.task_row(&model.store, j)?;
                let a = link_auc(&model, &ctx, &data.full, &data.held, &row, cfg.finetune.eval_batch, seed)?;
                records.push(json!({
                    "config_hash": hash, "kind": "link_auc", "seed": seed,
                    "init_task": j, "task": name, "auc": a,
                }));
                aucs.entry(j).or_default().push(a);
            }
        }
    }

    let dir = run_dir(cfg, &hash)?;
    write_lines(&dir.join("report.jsonl"), records)?;
    let mut csv = String::from("config_hash,metric,setting,runs,mean,std\n");
    let mut table = format!("{:<12} {:<10} {:>5} {:>8} {:>8}\n", "metric", "setting", "runs", "mean", "std");
    let mut row = |metric: &str, setting: String, xs: &[f64]| {
        let (m, s) = mean_std(xs);
        csv.push_str(&format!("{hash},{metric},{setting},{},{m:.6},{s:.6}\n", xs.len()));
        table.push_str(&format!("{metric:<12} {setting:<10} {:>5} {:>8.4} {:>8.4}\n", xs.len(), m, s));
    };
    for (shot, xs) in &by_shot {
        row("micro_f1", format!("{shot}-shot"), xs);
    }
    for (j, xs) in &aucs {
        row("link_auc", tasks[*j].clone(), xs);
    }
    let summary = dir.join("summary.csv");
    fs::write(&summary, csv).map_err(|e| CliError::writing(&summary, e))?;
    print!("{table}");
    Ok(dir)
}
