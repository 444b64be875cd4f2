use strgnn_core::checkpoint;
use strgnn_core::eval::{read_scores, roc_auc};
use strgnn_core::graph::build_snapshots_with_nodes;
use strgnn_core::sampling::InjectionSpec;
use strgnn_core::synthetic::{generate_communities, CommunityConfig, CommunityGraph};
use strgnn_core::trainer::{evaluate_split, fit, rolling_cv, CheckpointMeta};
use strgnn_core::{DynamicGraph, GraphMode, Model, Partition, TrainConfig};

fn small_graph() -> (CommunityGraph, DynamicGraph) {
    let cfg = CommunityConfig { community_size: 20, snapshots: 10, seed: 3, ..Default::default() };
    let cg = generate_communities(&cfg).unwrap();
    let g = build_snapshots_with_nodes(&cg.edges, cg.num_nodes(), 10, Partition::EqualTime, GraphMode::TimeEvolving).unwrap();
    (cg, g)
}

fn small_config() -> TrainConfig {
    TrainConfig {
        snapshots: 10,
        window: 3,
        epochs: 2,
        gcn_channels: vec![4, 4],
        gru_hidden: 8,
        lr: 1e-3,
        workers: 1,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn train_evaluate_and_reload() {
    let (cg, g) = small_graph();
    let config = small_config();
    let mut epochs = Vec::new();
    let outcome = fit(&g, &config, |e| epochs.push(e.epoch)).unwrap();
    assert_eq!(epochs, vec![0, 1]);
    assert!(outcome.log.iter().all(|e| e.mean_loss.is_finite()));

    let spec = InjectionSpec::new(0.1);
    let accept = |a, b| !cg.same_community(a, b);
    let eval = evaluate_split(&outcome.model, &g, &cg.nodes, &config, &spec, accept).unwrap();
    assert!(eval.injected > 0);
    assert_eq!(eval.report.scores.len(), eval.candidates.len());
    assert_eq!(eval.report.embedding.len(), eval.candidates.len());

    let dir = tempfile::tempdir().unwrap();
    strgnn_core::eval::export_report(&eval.report, &config, dir.path()).unwrap();
    let rows = read_scores(dir.path().join("scores.csv")).unwrap();
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert!((roc_auc(&scores, &labels).unwrap() - metrics["auc"].as_f64().unwrap()).abs() < 1e-12);

    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &outcome.model.params, &outcome.meta(&config)).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let meta: CheckpointMeta = loaded.meta_as().unwrap();
    assert_eq!(meta.train, config);
    let model = Model::from_params(meta.model, loaded.params).unwrap();
    let again = evaluate_split(&model, &g, &cg.nodes, &config, &spec, accept).unwrap();
    assert_eq!(again.report.scores, eval.report.scores);
}

#[test]
fn training_is_reproducible() {
    let (_, g) = small_graph();
    let config = small_config();
    let a = fit(&g, &config, |_| {}).unwrap();
    let b = fit(&g, &config, |_| {}).unwrap();
    let bits = |m: &Model| m.params.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
    assert_eq!(bits(&a.model), bits(&b.model));
    assert_eq!(a.log.iter().map(|e| e.mean_loss).collect::<Vec<_>>(), b.log.iter().map(|e| e.mean_loss).collect::<Vec<_>>());
}

#[test]
fn rolling_folds_report_one_auc_each() {
    let (cg, g) = small_graph();
    let config = TrainConfig { epochs: 1, window: 2, train_ratio: 0.9, ..small_config() };
    let folds = rolling_cv(&g, &cg.nodes, &config, 2, &InjectionSpec::new(0.1), |a, b| !cg.same_community(a, b)).unwrap();
    assert_eq!(folds.len(), 2);
    assert!(folds[0].train_edges < folds[1].train_edges);
    assert!(folds.iter().all(|f| (0.0..=1.0).contains(&f.auc)));
}
