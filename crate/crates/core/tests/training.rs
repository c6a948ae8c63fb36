use ultradp_autodiff::Tensor;
use ultradp_core::checkpoint::Checkpoint;
use ultradp_core::eval::{finetune_one, micro_f1, transferability_test, FinetuneConfig};
use ultradp_core::gnn::Backbone;
use ultradp_core::graph::{make_split, sample_kshot, SamplerKind};
use ultradp_core::model::{Context, Model, ModelConfig};
use ultradp_core::optim::{AdamW, BETA1, BETA2, EPS};
use ultradp_core::params::ParamStore;
use ultradp_core::pretext::sample_knn_batch;
use ultradp_core::prompt::{select_anchors, AnchorSet};
use ultradp_core::reach::{build_cache, build_transition, ReachabilityCache};
use ultradp_core::synthetic::{sbm, SbmConfig};
use ultradp_core::train::{pretrain, restore, Pretrained, TrainConfig};
use ultradp_core::{Graph, Result};

struct Fixture {
    graph: Graph,
    cache: ReachabilityCache,
    anchors: AnchorSet,
}

fn fixture(signal: f64) -> Fixture {
    let cfg = SbmConfig { blocks: 2, block_size: 40, p_in: 0.2, p_out: 0.01, feature_dim: 8, signal, ..Default::default() };
    let graph = sbm(&cfg).unwrap();
    let cache = build_cache(&build_transition(&graph), 9).unwrap();
    let anchors = select_anchors(&cache, 9, 2).unwrap();
    Fixture { graph, cache, anchors }
}

fn small_model(f: &Fixture, tasks: usize) -> ModelConfig {
    let mut mc = ModelConfig::new(Backbone::Gat, f.graph.feature_dim(), f.anchors.len(), tasks);
    mc.layers = 2;
    mc.hidden_dim = 8;
    mc.heads = 2;
    mc
}

fn short_training() -> TrainConfig {
    TrainConfig { batch_size: 16, budget: 48, max_epochs: 3, patience: 3, ..Default::default() }
}

fn train(f: &Fixture, config: &TrainConfig) -> Result<Pretrained> {
    let split = make_split(&f.graph, 0)?;
    pretrain(&f.graph, &split, &f.cache, &f.anchors, small_model(f, config.tasks.len()), config)
}

#[test]
fn knn_positives_follow_the_walk_distribution() {
    // On a triangle every two-step walk returns home with probability 1/2
    // and lands on each other node with probability 1/4.
    let g = Graph::from_edges(&[(0, 1), (1, 2), (0, 2)], Tensor::zeros(3, 1), None).unwrap();
    let cache = build_cache(&build_transition(&g), 2).unwrap();
    let b = sample_knn_batch(&cache, 0, 100_000, 2, 11).unwrap();
    let mut counts = [0f64; 3];
    b.positives.iter().for_each(|&v| counts[v] += 1.0);
    let expected = [50_000.0, 25_000.0, 25_000.0];
    let chi2: f64 = counts.iter().zip(expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    // 99.9th percentile of chi-square with two degrees of freedom.
    assert!(chi2 < 13.82, "chi2 = {chi2}, counts {counts:?}");
    assert!(b.negatives.iter().all(|&v| v != 0));
}

#[test]
fn adamw_matches_a_reference_update() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(1, 3, vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let (lr, wd) = (0.05, 0.01);
    let mut opt = AdamW::new(&store, lr, wd);

    let mut p = [1.0, -2.0, 0.5];
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    for t in 1..=40 {
        let g: Vec<f64> = p.iter().enumerate().map(|(i, x)| 2.0 * (x - i as f64) + (t as f64).sin()).collect();
        opt.step(&mut store, &[Tensor::new(1, 3, g.clone()).unwrap()]).unwrap();
        for i in 0..3 {
            p[i] *= 1.0 - lr * wd;
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let mh = m[i] / (1.0 - BETA1.powi(t));
            let vh = v[i] / (1.0 - BETA2.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + EPS);
        }
        let got = store.iter().next().unwrap().2.data().to_vec();
        for i in 0..3 {
            assert!((got[i] - p[i]).abs() < 1e-12, "step {t}: {got:?} vs {p:?}");
        }
    }
    assert_eq!(opt.steps(), 40);
}

#[test]
fn pretraining_is_deterministic_and_learns() {
    let f = fixture(0.3);
    let a = train(&f, &short_training()).unwrap();
    let b = train(&f, &short_training()).unwrap();
    assert_eq!(a.model.store, b.model.store);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 3);
    assert!(a.log.iter().all(|e| e.val_loss.is_finite()));
    let first: f64 = a.log[0].train_loss.values().sum();
    let last: f64 = a.log[2].train_loss.values().sum();
    assert!(last < first, "training loss went from {first} to {last}");

    let other = train(&f, &TrainConfig { seed: 7, ..short_training() }).unwrap();
    assert_ne!(a.model.store, other.model.store);
}

#[test]
fn checkpoints_round_trip_through_restore() {
    let f = fixture(0.3);
    let trained = train(&f, &TrainConfig { max_epochs: 1, patience: 1, ..short_training() }).unwrap();
    let ckpt = trained.to_checkpoint(serde_json::json!({ "note": "test" }), "ab".repeat(32));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.udpc");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);

    let (model, tasks, opt) = restore(&back).unwrap();
    assert_eq!(model.store, trained.model.store);
    assert_eq!(model.config, trained.model.config);
    assert_eq!(tasks, trained.tasks);
    assert_eq!(opt.steps(), trained.optimizer.steps());
    assert_eq!(opt.moments(), trained.optimizer.moments());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

fn finetune_config() -> FinetuneConfig {
    FinetuneConfig { max_epochs: 40, patience: 10, budget: 64, sampler: SamplerKind::Ladies, ..Default::default() }
}

#[test]
fn separable_two_class_finetune() {
    let f = fixture(2.0);
    let model = Model::new(small_model(&f, 2), 3).unwrap();
    let ctx = Context { graph: &f.graph, cache: &f.cache, anchors: &f.anchors, sampler: SamplerKind::Ladies, budget: 64 };
    let split = make_split(&f.graph, 0).unwrap();
    let kshot = sample_kshot(&split, &f.graph, 4, 0).unwrap();
    let config = finetune_config();
    let ft = finetune_one(&model, &ctx, &kshot, 1, &config, 0).unwrap();
    assert_eq!(ft.init_task, 1);
    let pred = ft.predict(&ctx, &split.test_nodes, 64, 0).unwrap();
    let truth: Vec<usize> = split.test_nodes.iter().map(|&v| f.graph.labels().unwrap()[v]).collect();
    let f1 = micro_f1(&pred, &truth).unwrap();
    assert!(f1 >= 0.9, "test Micro-F1 {f1}");

    let out = transferability_test(&model, &ctx, &kshot, &split.test_nodes, &config, 0).unwrap();
    assert_eq!(out.candidates.len(), 2);
    assert_eq!(out.test_micro_f1, out.candidates[out.chosen].test_micro_f1);
    assert_eq!(out, transferability_test(&model, &ctx, &kshot, &split.test_nodes, &config, 0).unwrap());
}
