use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;
use strgnn_core::checkpoint;
use strgnn_core::eval::{export_report, EvalReport, ScoreRow};
use strgnn_core::graph::{build_snapshots_with_nodes, export_edges, ingest_edge_stream, EdgeLabel, EdgeStream};
use strgnn_core::sampling::inject_anomalies;
use strgnn_core::synthetic::{generate_communities, CommunityConfig};
use strgnn_core::trainer::{
    derive_seed, evaluate_candidates, evaluate_split, fit, predict_scores, rolling_cv, split_dataset, thread_pool,
    CheckpointMeta, EpochLog, TrainOutcome,
};
use strgnn_core::{CandidateEdge, DynamicGraph, Model, NodeId, NodeMap, TrainConfig};

use crate::config::{ConfigFlags, RunConfig};
use crate::error::{CliError, CliResult, Kind};

const CHECKPOINT_FILE: &str = "model.ckpt";
const TRAIN_LOG_FILE: &str = "train_log.jsonl";
const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
const CANDIDATES_FILE: &str = "candidates.csv";

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::new(Kind::Internal, e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn prepare_out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg.out_dir().to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

struct Dataset {
    stream: EdgeStream,
    graph: DynamicGraph,
}

fn read_stream(cfg: &RunConfig) -> CliResult<EdgeStream> {
    let path = cfg.dataset()?;
    ingest_edge_stream(path, cfg.format.into()).map_err(|e| {
        let message = format!("{}: {e}", path.display());
        CliError { message, ..CliError::from(e) }
    })
}

fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let stream = read_stream(cfg)?;
    let t = &cfg.train;
    let graph = build_snapshots_with_nodes(&stream.edges, stream.nodes.len(), t.snapshots, t.partition, t.mode)?;
    info!(
        "loaded {} edges over {} nodes into {} snapshots",
        graph.edges().len(),
        stream.nodes.len(),
        graph.num_snapshots()
    );
    Ok(Dataset { stream, graph })
}

#[derive(Debug, Deserialize)]
struct CommunityRow {
    node: String,
    community: String,
}

/// Pair filter for injection: any pair, or only cross-community pairs when
/// a community file is configured.
struct Accept {
    community: Option<Vec<Option<String>>>,
}

impl Accept {
    fn load(cfg: &RunConfig, nodes: &NodeMap) -> CliResult<Self> {
        let Some(path) = &cfg.communities else { return Ok(Self { community: None }) };
        let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let mut by_key = HashMap::new();
        for row in reader.deserialize() {
            let row: CommunityRow = row.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            by_key.insert(row.node, row.community);
        }
        let community = nodes.keys().iter().map(|k| by_key.get(k).cloned()).collect();
        Ok(Self { community: Some(community) })
    }

    fn accepts(&self, a: NodeId, b: NodeId) -> bool {
        match &self.community {
            None => true,
            Some(c) => matches!((&c[a.index()], &c[b.index()]), (Some(x), Some(y)) if x != y),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CandidateRow {
    src: String,
    dst: String,
    snapshot: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
}

fn read_candidates(path: &Path, nodes: &NodeMap, graph: &DynamicGraph) -> CliResult<(Vec<CandidateEdge>, bool)> {
    let ctx = |e: &dyn std::fmt::Display| CliError::data(format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| ctx(&e))?;
    let mut out = Vec::new();
    let mut labeled = true;
    for (i, row) in reader.deserialize().enumerate() {
        let row: CandidateRow = row.map_err(|e| ctx(&e))?;
        let node = |key: &str| {
            nodes.get(key).ok_or_else(|| ctx(&format!("row {}: node `{key}` is not in the dataset", i + 1)))
        };
        let (x, y) = (node(&row.src)?, node(&row.dst)?);
        if row.snapshot >= graph.num_snapshots() {
            return Err(ctx(&format!("row {}: snapshot {} out of range", i + 1, row.snapshot)));
        }
        let label = match row.label {
            None => {
                labeled = false;
                0
            }
            Some(l @ (0 | 1)) => l,
            Some(l) => return Err(ctx(&format!("row {}: label must be 0 or 1, got {l}", i + 1))),
        };
        out.push(CandidateEdge { x, y, t: row.snapshot, label });
    }
    if out.is_empty() {
        return Err(ctx(&"no candidates"));
    }
    Ok((out, labeled))
}

fn load_model(path: &Path) -> CliResult<(Model, CheckpointMeta)> {
    let ck = checkpoint::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let meta: CheckpointMeta = ck.meta_as()?;
    let model = Model::from_params(meta.model.clone(), ck.params)?;
    Ok((model, meta))
}

/// Keys that shape the model or its inputs; a checkpoint fixes them.
fn check_model_keys(saved: &TrainConfig, asked: &TrainConfig) -> CliResult<()> {
    let differs = [
        ("hops", saved.hops != asked.hops),
        ("window", saved.window != asked.window),
        ("gcn_channels", saved.gcn_channels != asked.gcn_channels),
        ("gru_hidden", saved.gru_hidden != asked.gru_hidden),
        ("head_hidden", saved.head_hidden != asked.head_hidden),
        ("sortpool_rate", saved.sortpool_rate != asked.sortpool_rate),
    ];
    match differs.iter().find(|(_, d)| *d) {
        Some((key, _)) => Err(CliError::config(format!("`{key}` is fixed by the checkpoint and cannot be changed"))),
        None => Ok(()),
    }
}

fn checkpoint_config(flags: &ConfigFlags, path: &Path) -> CliResult<(Model, RunConfig)> {
    let (model, meta) = load_model(path)?;
    let cfg = flags.resolve(RunConfig { train: meta.train.clone(), ..RunConfig::default() })?;
    cfg.validate()?;
    check_model_keys(&meta.train, &cfg.train)?;
    Ok((model, cfg))
}

fn resolve(flags: &ConfigFlags) -> CliResult<RunConfig> {
    let cfg = flags.resolve(RunConfig::default())?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
    /// Also write the parsed edges in canonical `src dst time [label]` form.
    #[arg(long)]
    pub export: Option<PathBuf>,
}

pub fn ingest(args: &IngestArgs) -> CliResult<()> {
    let cfg = args.flags.resolve(RunConfig::default())?;
    let stream = read_stream(&cfg)?;
    let times = stream.edges.iter().map(|e| e.time);
    let (lo, hi) = (times.clone().min().unwrap_or(0), times.max().unwrap_or(0));
    let labeled = stream.edges.iter().filter(|e| e.label == EdgeLabel::Anomalous).count();
    let mut summary = json!({
        "edges": stream.edges.len(),
        "nodes": stream.nodes.len(),
        "self_loops_dropped": stream.self_loops_dropped,
        "labeled_anomalies": labeled,
        "time_range": [lo, hi],
    });
    if cfg.train.snapshots > 0 {
        let t = &cfg.train;
        let g = build_snapshots_with_nodes(&stream.edges, stream.nodes.len(), t.snapshots, t.partition, t.mode)?;
        let counts: Vec<usize> = (0..g.num_snapshots()).map(|i| g.snapshot(i).num_edges()).collect();
        summary["snapshot_edges"] = json!(counts);
    }
    if let Some(path) = &args.export {
        let file = File::create(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        export_edges(&mut w, &stream.edges, &stream.nodes)?;
        w.flush()?;
    }
    print_json(&summary);
    Ok(())
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = CommunityConfig::default().communities)]
    pub communities: usize,
    #[arg(long = "community-size", default_value_t = CommunityConfig::default().community_size)]
    pub community_size: usize,
    #[arg(long, default_value_t = CommunityConfig::default().snapshots)]
    pub snapshots: usize,
    #[arg(long = "ring-radius", default_value_t = CommunityConfig::default().ring_radius)]
    pub ring_radius: usize,
    #[arg(long = "p-intra", default_value_t = CommunityConfig::default().p_intra)]
    pub p_intra: f64,
    #[arg(long = "p-inter", default_value_t = CommunityConfig::default().p_inter)]
    pub p_inter: f64,
    #[arg(long, default_value_t = CommunityConfig::default().activation)]
    pub activation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory [default: $STRGNN_OUT_DIR or ./strgnn-out].
    #[arg(long = "out", value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
}

/// Writes `edges.txt` and `communities.csv` for a planted-community graph.
pub fn generate(args: &GenerateArgs) -> CliResult<()> {
    let config = CommunityConfig {
        communities: args.communities,
        community_size: args.community_size,
        snapshots: args.snapshots,
        ring_radius: args.ring_radius,
        p_intra: args.p_intra,
        p_inter: args.p_inter,
        activation: args.activation,
        seed: args.seed,
    };
    let cg = generate_communities(&config)?;
    let cfg = ConfigFlags { output_dir: args.output_dir.clone(), ..Default::default() }.resolve(RunConfig::default())?;
    let dir = prepare_out_dir(&cfg)?;

    let mut w = BufWriter::new(File::create(dir.join("edges.txt"))?);
    export_edges(&mut w, &cg.edges, &cg.nodes)?;
    w.flush()?;

    let mut c = csv::Writer::from_path(dir.join("communities.csv"))?;
    c.write_record(["node", "community"])?;
    for (i, key) in cg.nodes.keys().iter().enumerate() {
        c.write_record([key.clone(), cg.community[i].to_string()])?;
    }
    c.flush()?;

    print_json(&json!({
        "edges": cg.edges.len(),
        "nodes": cg.num_nodes(),
        "out": dir,
        "config": config,
    }));
    Ok(())
}

// ---------------------------------------------------------------- inject

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
}

/// Writes the labeled test candidates (observed edges plus injected
/// anomalies) to `candidates.csv`.
pub fn inject(args: &RunArgs) -> CliResult<()> {
    let cfg = resolve(&args.flags)?;
    let data = load_dataset(&cfg)?;
    let split = split_dataset(&data.graph, cfg.train.train_ratio, cfg.train.window)?;
    let accept = Accept::load(&cfg, &data.stream.nodes)?;
    let mut rng = injection_rng(&cfg);
    let labeled = inject_anomalies(
        &data.graph,
        &split.test,
        &cfg.injection(),
        split.test_snapshots.clone(),
        |a, b| accept.accepts(a, b),
        &mut rng,
    )?;
    let dir = prepare_out_dir(&cfg)?;
    let mut w = csv::Writer::from_path(dir.join(CANDIDATES_FILE))?;
    for c in &labeled {
        w.serialize(CandidateRow {
            src: data.stream.nodes.key(c.x).to_string(),
            dst: data.stream.nodes.key(c.y).to_string(),
            snapshot: c.t,
            label: Some(c.label),
        })?;
    }
    w.flush()?;
    print_json(&json!({
        "test_candidates": split.test.len(),
        "injected": labeled.len() - split.test.len(),
        "out": dir.join(CANDIDATES_FILE),
    }));
    Ok(())
}

fn injection_rng(cfg: &RunConfig) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    // A stream distinct from the evaluator's, so `inject` output can be
    // evaluated without being confused with an in-process injection.
    rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, 0x4341_4e44))
}

// ---------------------------------------------------------------- train

fn train_model(cfg: &RunConfig, graph: &DynamicGraph, log_path: Option<&Path>) -> CliResult<TrainOutcome> {
    let mut log = match log_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut io_error = None;
    let outcome = fit(graph, &cfg.train, |e: &EpochLog| {
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(e).expect("epoch logs serialize");
            if let Err(err) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                io_error.get_or_insert(err);
            }
        }
    })?;
    if let Some(err) = io_error {
        return Err(err.into());
    }
    Ok(outcome)
}

pub fn train(args: &RunArgs) -> CliResult<()> {
    let cfg = resolve(&args.flags)?;
    let data = load_dataset(&cfg)?;
    let dir = prepare_out_dir(&cfg)?;
    let outcome = train_model(&cfg, &data.graph, Some(&dir.join(TRAIN_LOG_FILE)))?;
    checkpoint::save(dir.join(CHECKPOINT_FILE), &outcome.model.params, &outcome.meta(&cfg.train))?;
    let summary = json!({
        "best_epoch": outcome.best_epoch,
        "best_val_auc": outcome.best_val_auc,
        "final_loss": outcome.log.last().map(|e| e.mean_loss),
        "train_candidates": outcome.train_candidates,
        "validation_candidates": outcome.validation_candidates,
        "parameters": outcome.model.params.iter().map(|p| p.value.len()).sum::<usize>(),
        "model": outcome.model.config,
        "config": cfg,
    });
    write_json(&dir.join(TRAIN_SUMMARY_FILE), &summary)?;
    print_json(&json!({
        "checkpoint": dir.join(CHECKPOINT_FILE),
        "best_epoch": outcome.best_epoch,
        "best_val_auc": outcome.best_val_auc,
    }));
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
    /// Checkpoint written by `train`.
    #[arg(long, required = true)]
    pub checkpoint: PathBuf,
    /// Labeled `src,dst,snapshot,label` CSV to score instead of injecting.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let (model, cfg) = checkpoint_config(&args.flags, &args.checkpoint)?;
    let data = load_dataset(&cfg)?;
    let nodes = &data.stream.nodes;
    let eval = match &args.candidates {
        Some(path) => {
            let (candidates, labeled) = read_candidates(path, nodes, &data.graph)?;
            if !labeled || !candidates.iter().any(|c| c.label == 1) {
                return Err(CliError::data(format!("{}: every row needs a label and at least one must be 1", path.display())));
            }
            let first = candidates.iter().map(|c| c.t).min().expect("non-empty");
            let last = candidates.iter().map(|c| c.t).max().expect("non-empty");
            evaluate_candidates(&model, &data.graph, nodes, &cfg.train, &candidates, first..=last, &cfg.injection(), |_, _| true)?
        }
        None => {
            let accept = Accept::load(&cfg, nodes)?;
            evaluate_split(&model, &data.graph, nodes, &cfg.train, &cfg.injection(), |a, b| accept.accepts(a, b))?
        }
    };
    let dir = prepare_out_dir(&cfg)?;
    export_report(&eval.report, &cfg, &dir)?;
    report_line(&eval.report, eval.injected, &dir);
    Ok(())
}

fn report_line(report: &EvalReport, injected: usize, dir: &Path) {
    print_json(&json!({
        "auc": report.auc,
        "candidates": report.scores.len(),
        "anomalies": report.positives(),
        "injected": injected,
        "out": dir,
    }));
}

// ---------------------------------------------------------------- score

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
    #[arg(long, required = true)]
    pub checkpoint: PathBuf,
    /// `src,dst,snapshot[,label]` CSV of edges to score.
    #[arg(long, required = true)]
    pub candidates: PathBuf,
}

/// Scores arbitrary candidates; writes `scores.csv` (label column is 0 when
/// the input has none).
pub fn score(args: &ScoreArgs) -> CliResult<()> {
    let (model, cfg) = checkpoint_config(&args.flags, &args.checkpoint)?;
    let data = load_dataset(&cfg)?;
    let (candidates, _) = read_candidates(&args.candidates, &data.stream.nodes, &data.graph)?;
    let workers = cfg.train.workers;
    let preds = thread_pool(workers)?
        .install(|| predict_scores(&model, &data.graph, &candidates, cfg.train.hops, cfg.train.window))?;
    let rows: Vec<ScoreRow> = candidates
        .iter()
        .zip(&preds)
        .enumerate()
        .map(|(i, (c, p))| ScoreRow {
            candidate: i,
            src: data.stream.nodes.key(c.x).to_string(),
            dst: data.stream.nodes.key(c.y).to_string(),
            snapshot: c.t,
            score: p.score,
            label: c.label,
        })
        .collect();
    let dir = prepare_out_dir(&cfg)?;
    strgnn_core::eval::write_scores(dir.join("scores.csv"), &rows)?;
    print_json(&json!({ "scored": rows.len(), "out": dir.join("scores.csv") }));
    Ok(())
}

// ---------------------------------------------------------------- sweep

fn grid<T: Copy>(values: &Option<Vec<T>>, fallback: T) -> Vec<T> {
    values.clone().unwrap_or_else(|| vec![fallback])
}

#[derive(Debug, Serialize)]
struct SweepRow {
    hops: usize,
    window: usize,
    train_ratio: f64,
    injection_fraction: f64,
    auc: f64,
    best_epoch: usize,
}

/// Grid over hops, window, train ratio and injection fraction. One model is
/// trained per (hops, window, ratio) and evaluated at every fraction.
pub fn sweep(args: &RunArgs) -> CliResult<()> {
    let base = args.flags.without_grid().resolve(RunConfig::default())?;
    let hops: Vec<usize> = grid(&args.flags.hops, base.train.hops);
    let windows: Vec<usize> = grid(&args.flags.window, base.train.window);
    let ratios: Vec<f64> = grid(&args.flags.train_ratio, base.train.train_ratio);
    let fractions: Vec<f64> = grid(&args.flags.injection_fraction, base.injection_fraction);

    let data = load_dataset(&base)?;
    let accept = Accept::load(&base, &data.stream.nodes)?;
    let dir = prepare_out_dir(&base)?;
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    let mut rows = 0;
    for &h in &hops {
        for &win in &windows {
            for &ratio in &ratios {
                let mut cfg = base.clone();
                cfg.train.hops = h;
                cfg.train.window = win;
                cfg.train.train_ratio = ratio;
                cfg.validate()?;
                info!("sweep: hops {h}, window {win}, train ratio {ratio}");
                let outcome = train_model(&cfg, &data.graph, None)?;
                for &fraction in &fractions {
                    cfg.injection_fraction = fraction;
                    cfg.validate()?;
                    let eval = evaluate_split(
                        &outcome.model,
                        &data.graph,
                        &data.stream.nodes,
                        &cfg.train,
                        &cfg.injection(),
                        |a, b| accept.accepts(a, b),
                    )?;
                    let row = SweepRow {
                        hops: h,
                        window: win,
                        train_ratio: ratio,
                        injection_fraction: fraction,
                        auc: eval.report.auc,
                        best_epoch: outcome.best_epoch,
                    };
                    print_json(&serde_json::to_value(&row).expect("rows serialize"));
                    w.serialize(&row)?;
                    w.flush()?;
                    rows += 1;
                }
            }
        }
    }
    info!("sweep wrote {rows} rows to {}", dir.join("sweep.csv").display());
    Ok(())
}

// ---------------------------------------------------------------- cv

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
}

/// Rolling-origin cross-validation inside the training period.
pub fn cv(args: &CvArgs) -> CliResult<()> {
    let cfg = resolve(&args.flags)?;
    let data = load_dataset(&cfg)?;
    let accept = Accept::load(&cfg, &data.stream.nodes)?;
    let accept = &accept;
    let folds = rolling_cv(&data.graph, &data.stream.nodes, &cfg.train, args.folds, &cfg.injection(), move |a, b| {
        accept.accepts(a, b)
    })?;
    let dir = prepare_out_dir(&cfg)?;
    let mut w = csv::Writer::from_path(dir.join("cv.csv"))?;
    for f in &folds {
        w.serialize(f)?;
        print_json(&serde_json::to_value(f).expect("folds serialize"));
    }
    w.flush()?;
    let mean = folds.iter().map(|f| f.auc).sum::<f64>() / folds.len() as f64;
    print_json(&json!({ "folds": folds.len(), "mean_auc": mean }));
    Ok(())
}
