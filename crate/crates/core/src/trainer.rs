//! End-to-end training and scoring.
//!
//! Training candidates are the observed edges of the first part of the
//! stream (label 0, normal); every epoch draws fresh context-dependent
//! negatives (label 1) at a 1:1 ratio, shuffles, and runs Adam on the mean
//! binary cross-entropy of each batch. The tail of the training period is
//! held out for checkpoint selection by validation AUC.

use std::ops::{Range, RangeInclusive};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{roc_auc, EvalReport, ScoreRow};
use crate::graph::{DynamicGraph, EdgeLabel, GraphMode, NodeId, NodeMap, Partition};
use crate::gsfe::determine_k;
use crate::model::{Model, ModelConfig, PreparedWindow, WindowPrediction};
use crate::sampling::{inject_anomalies, sample_negatives, InjectionSpec, SamplingConfig};
use crate::subgraph::{extract_window, CandidateEdge};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hops: usize,
    pub window: usize,
    pub snapshots: usize,
    pub partition: Partition,
    pub mode: GraphMode,
    pub train_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub sortpool_rate: f64,
    pub gcn_channels: Vec<usize>,
    pub gru_hidden: usize,
    pub head_hidden: Vec<usize>,
    pub negatives_per_positive: f64,
    pub max_retries: usize,
    /// Trailing share of the training candidates held out for checkpoint selection.
    pub validation_fraction: f64,
    /// Sample-level worker threads; 0 uses every available core.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hops: 1,
            window: 5,
            snapshots: 0,
            partition: Partition::EqualCount,
            mode: GraphMode::TimeEvolving,
            train_ratio: 0.5,
            epochs: 50,
            batch_size: 32,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            sortpool_rate: 0.6,
            gcn_channels: vec![32, 32, 32],
            gru_hidden: 256,
            head_hidden: vec![],
            negatives_per_positive: 1.0,
            max_retries: 100,
            validation_fraction: 0.1,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.hops == 0 {
            return fail("hops must be >= 1".into());
        }
        if self.snapshots < 2 {
            return fail(format!("snapshots must be >= 2, got {}", self.snapshots));
        }
        if self.window >= self.snapshots {
            return fail(format!("window {} leaves no snapshot with a full history out of {}", self.window, self.snapshots));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return fail(format!("train_ratio must be in (0, 1), got {}", self.train_ratio));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("invalid Adam hyperparameters".into());
        }
        if !(self.sortpool_rate > 0.0 && self.sortpool_rate <= 1.0) {
            return fail(format!("sortpool_rate must be in (0, 1], got {}", self.sortpool_rate));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return fail(format!("validation_fraction must be in [0, 0.5), got {}", self.validation_fraction));
        }
        if !(self.negatives_per_positive > 0.0) {
            return fail("negatives_per_positive must be > 0".into());
        }
        Ok(())
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig { negatives_per_positive: self.negatives_per_positive, max_retries: self.max_retries }
    }
}

/// splitmix64 finalizer; derives independent stream seeds from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_VALIDATION: u64 = 0x0056_414c;
const STREAM_INJECTION: u64 = 0x0049_4e4a;
const STREAM_EPOCH: u64 = 0x4550_4f43_4800;

/// Candidates for the edges in `range` of the time-sorted stream, dropping
/// those without a full window. Returns `(candidates, dropped)`.
pub fn candidates_in(graph: &DynamicGraph, range: Range<usize>, window: usize) -> (Vec<CandidateEdge>, usize) {
    let mut out = Vec::with_capacity(range.len());
    let mut dropped = 0;
    for i in range {
        let e = graph.edges()[i];
        let t = graph.edge_snapshots()[i];
        if t < window {
            dropped += 1;
            continue;
        }
        let label = u8::from(e.label == EdgeLabel::Anomalous);
        out.push(CandidateEdge::new(e.src, e.dst, t, label));
    }
    (out, dropped)
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<CandidateEdge>,
    pub test: Vec<CandidateEdge>,
    pub dropped_train: usize,
    pub dropped_test: usize,
    /// Snapshots spanned by the test period (with a full window).
    pub test_snapshots: RangeInclusive<usize>,
}

/// Time-ordered prefix split: the first `round(ratio * E)` edges train, the rest test.
pub fn split_dataset(graph: &DynamicGraph, train_ratio: f64, window: usize) -> Result<Split> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::Config(format!("train_ratio must be in (0, 1), got {train_ratio}")));
    }
    let n = graph.edges().len();
    let cut = ((train_ratio * n as f64).round() as usize).clamp(1, n.saturating_sub(1));
    let (train, dropped_train) = candidates_in(graph, 0..cut, window);
    let (test, dropped_test) = candidates_in(graph, cut..n, window);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "split leaves {} training and {} test candidates with a full window of {window}",
            train.len(),
            test.len()
        )));
    }
    let first_test = graph.edge_snapshots()[cut].max(window);
    Ok(Split { train, test, dropped_train, dropped_test, test_snapshots: first_test..=graph.num_snapshots() - 1 })
}

/// Adam moments for every parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update from each parameter's accumulated `grad`.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let value = p.value.data_mut();
        for (k, &g) in p.grad.data().iter().enumerate() {
            let mk = &mut m.data_mut()[k];
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * g;
            let vk = &mut v.data_mut()[k];
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mk / c1;
            let v_hat = *vk / c2;
            value[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_auc: Option<f64>,
    pub wall_ms: u64,
}

/// Everything needed to rebuild a trained model and its data pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub train_candidates: usize,
    pub validation_candidates: usize,
}

impl TrainOutcome {
    pub fn meta(&self, train: &TrainConfig) -> CheckpointMeta {
        CheckpointMeta { model: self.model.config.clone(), train: train.clone() }
    }
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

fn prepare_all(
    graph: &DynamicGraph,
    candidates: &[CandidateEdge],
    hops: usize,
    window: usize,
    label_width: usize,
) -> Result<Vec<PreparedWindow>> {
    candidates
        .par_iter()
        .map(|&c| PreparedWindow::from_window(&extract_window(graph, c, hops, window)?, label_width))
        .collect()
}

/// Scores windows in parallel; output order matches input order.
const PREDICT_CHUNK: usize = 64;

pub fn predict_prepared(model: &Model, windows: &[PreparedWindow]) -> Result<Vec<WindowPrediction>> {
    let chunks: Vec<Vec<WindowPrediction>> = windows
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| model.predict_batch(&chunk.iter().collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Scores candidates with a trained model (extract, encode, forward).
pub fn predict_scores(
    model: &Model,
    graph: &DynamicGraph,
    candidates: &[CandidateEdge],
    hops: usize,
    window: usize,
) -> Result<Vec<WindowPrediction>> {
    candidates
        .par_iter()
        .map(|&c| {
            let w = PreparedWindow::from_window(&extract_window(graph, c, hops, window)?, model.config.label_width)?;
            model.predict(&w)
        })
        .collect()
}

fn validation_auc(model: &Model, windows: &[PreparedWindow]) -> Result<Option<f64>> {
    if windows.is_empty() {
        return Ok(None);
    }
    let preds = predict_prepared(model, windows)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let labels: Vec<u8> = windows.iter().map(|w| w.label).collect();
    match roc_auc(&scores, &labels) {
        Ok(auc) => Ok(Some(auc)),
        Err(Error::Evaluation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Summed loss of one batch, plus a copy of the parameters holding the
/// batch-mean gradient.
fn train_batch(model: &Model, batch: &[&PreparedWindow], workers: usize) -> Result<(ParamStore, f64)> {
    let scale = 1.0 / batch.len() as f64;
    let chunk = batch.len().div_ceil(workers.max(1));
    let partials: Vec<(crate::tensor::Gradients, f64)> = batch
        .par_chunks(chunk)
        .map(|samples| {
            let mut grads = model.params.gradients();
            let loss = model.accumulate_batch_gradients(samples, scale, &mut grads)?;
            Ok((grads, loss))
        })
        .collect::<Result<_>>()?;
    let mut params = model.params.clone();
    params.zero_grad();
    let mut total = 0.0;
    for (g, loss) in &partials {
        params.accumulate(g);
        total += loss;
    }
    Ok((params, total))
}

/// Trains on the training split of `graph`.
pub fn fit(graph: &DynamicGraph, config: &TrainConfig, progress: impl FnMut(&EpochLog) + Send) -> Result<TrainOutcome> {
    config.validate()?;
    let split = split_dataset(graph, config.train_ratio, config.window)?;
    fit_candidates(graph, &split.train, config, progress)
}

/// Trains on explicit observed-edge candidates (time-ordered).
pub fn fit_candidates(
    graph: &DynamicGraph,
    candidates: &[CandidateEdge],
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochLog) + Send,
) -> Result<TrainOutcome> {
    config.validate()?;
    let workers = if config.workers == 0 { rayon::current_num_threads().max(1) } else { config.workers };
    let pool = thread_pool(workers)?;
    pool.install(|| fit_inner(graph, candidates, config, workers, &mut progress))
}

fn fit_inner(
    graph: &DynamicGraph,
    candidates: &[CandidateEdge],
    config: &TrainConfig,
    workers: usize,
    progress: &mut (dyn FnMut(&EpochLog) + Send),
) -> Result<TrainOutcome> {
    let (hops, window) = (config.hops, config.window);
    let positives: Vec<CandidateEdge> = candidates.iter().map(|c| CandidateEdge { label: 0, ..*c }).collect();
    if positives.is_empty() {
        return Err(Error::Config("no training candidates".into()));
    }
    let n_val = (config.validation_fraction * positives.len() as f64).round() as usize;
    let (train_pos, val_pos) = positives.split_at(positives.len() - n_val);
    if train_pos.is_empty() {
        return Err(Error::Config("validation hold-out leaves no training candidates".into()));
    }

    let sampling = config.sampling();
    let mut val_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_VALIDATION));
    let val_neg = sample_negatives(graph, val_pos, &sampling, &mut val_rng)?;

    // Label vocabulary and K come from the training positives only.
    let windows: Vec<_> = train_pos
        .par_iter()
        .map(|&c| extract_window(graph, c, hops, window))
        .collect::<Result<_>>()?;
    let max_label = windows
        .iter()
        .flat_map(|w| w.subgraphs.iter().flat_map(|s| s.labels.iter().copied()))
        .max()
        .unwrap_or(0);
    let label_width = (max_label as usize + 1).max(2);
    let sizes: Vec<usize> = windows.iter().flat_map(|w| w.subgraphs.iter().map(|s| s.len())).collect();
    let k = determine_k(&sizes, config.sortpool_rate)?;

    let model_config = ModelConfig {
        label_width,
        gcn_channels: config.gcn_channels.clone(),
        k,
        gru_hidden: config.gru_hidden,
        head_hidden: config.head_hidden.clone(),
    };
    let mut model = Model::new(model_config, config.seed)?;
    log::info!(
        "training on {} positives ({} held out), label width {label_width}, K = {k}, {} parameters",
        train_pos.len(),
        val_pos.len(),
        model.params.num_values()
    );

    let pos_windows: Vec<PreparedWindow> = windows
        .iter()
        .map(|w| PreparedWindow::from_window(w, label_width))
        .collect::<Result<_>>()?;
    drop(windows);
    let mut val_windows = prepare_all(graph, val_pos, hops, window, label_width)?;
    val_windows.extend(prepare_all(graph, &val_neg, hops, window, label_width)?);

    let adam = AdamConfig { lr: config.lr, beta1: config.beta1, beta2: config.beta2, eps: config.adam_eps };
    let mut state = AdamState::new(&model.params);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_EPOCH + epoch as u64));
        let negatives = sample_negatives(graph, train_pos, &sampling, &mut rng)?;
        let neg_windows = prepare_all(graph, &negatives, hops, window, label_width)?;

        let mut samples: Vec<&PreparedWindow> = pos_windows.iter().chain(&neg_windows).collect();
        samples.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in samples.chunks(config.batch_size) {
            let (mut params, batch_loss) = train_batch(&model, batch, workers)?;
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss in epoch {epoch}; check the learning rate or probability clamp"
                )));
            }
            loss_sum += batch_loss;
            adam_step(&mut params, &mut state, &adam);
            if params.iter().any(|p| !p.value.is_finite()) {
                return Err(Error::Numeric(format!("non-finite parameters after epoch {epoch} update")));
            }
            model.params = params;
        }
        let mean_loss = loss_sum / samples.len() as f64;
        let val_auc = validation_auc(&model, &val_windows)?;
        let entry = EpochLog { epoch, mean_loss, val_auc, wall_ms: start.elapsed().as_millis() as u64 };
        match val_auc {
            Some(auc) => log::info!("epoch {epoch}: loss {mean_loss:.5}, val auc {auc:.4}"),
            None => log::info!("epoch {epoch}: loss {mean_loss:.5}"),
        }
        progress(&entry);
        log.push(entry);

        if let Some(auc) = val_auc {
            if best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
                best = Some((auc, epoch, model.params.clone()));
            }
        }
    }

    let (best_val_auc, best_epoch) = match best {
        Some((auc, epoch, params)) => {
            model.params = params;
            (Some(auc), epoch)
        }
        None => (None, config.epochs - 1),
    };
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_auc,
        train_candidates: train_pos.len(),
        validation_candidates: val_pos.len(),
    })
}

/// Test candidates plus injected anomalies, scored and summarized.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub candidates: Vec<CandidateEdge>,
    pub injected: usize,
}

/// Labels the test candidates (injecting anomalies unless the input already
/// carries anomaly labels), scores them and builds the report.
pub fn evaluate_split(
    model: &Model,
    graph: &DynamicGraph,
    nodes: &NodeMap,
    config: &TrainConfig,
    injection: &InjectionSpec,
    accept: impl Fn(NodeId, NodeId) -> bool,
) -> Result<Evaluation> {
    let split = split_dataset(graph, config.train_ratio, config.window)?;
    evaluate_candidates(model, graph, nodes, config, &split.test, split.test_snapshots, injection, accept)
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_candidates(
    model: &Model,
    graph: &DynamicGraph,
    nodes: &NodeMap,
    config: &TrainConfig,
    test: &[CandidateEdge],
    test_snapshots: RangeInclusive<usize>,
    injection: &InjectionSpec,
    accept: impl Fn(NodeId, NodeId) -> bool,
) -> Result<Evaluation> {
    let already_labeled = test.iter().any(|c| c.label == 1);
    let candidates = if already_labeled {
        test.to_vec()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_INJECTION));
        inject_anomalies(graph, test, injection, test_snapshots, accept, &mut rng)?
    };
    let injected = if already_labeled { 0 } else { candidates.len() - test.len() };

    let workers = if config.workers == 0 { rayon::current_num_threads().max(1) } else { config.workers };
    let preds = thread_pool(workers)?.install(|| predict_scores(model, graph, &candidates, config.hops, config.window))?;

    let rows: Vec<ScoreRow> = candidates
        .iter()
        .zip(&preds)
        .enumerate()
        .map(|(i, (c, p))| ScoreRow {
            candidate: i,
            src: nodes.key(c.x).to_string(),
            dst: nodes.key(c.y).to_string(),
            snapshot: c.t,
            score: p.score,
            label: c.label,
        })
        .collect();
    let hiddens: Vec<Vec<f64>> = preds.into_iter().map(|p| p.hidden).collect();
    let report = EvalReport::build(rows, &hiddens)?;
    Ok(Evaluation { report, candidates, injected })
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_edges: usize,
    pub test_edges: usize,
    pub auc: f64,
}

/// Expanding-window cross-validation over the training period: fold `k`
/// trains on the first `k + 1` of `folds + 1` equal chunks and tests on
/// chunk `k + 1`, with anomalies injected at `injection.fraction`.
pub fn rolling_cv(
    graph: &DynamicGraph,
    nodes: &NodeMap,
    config: &TrainConfig,
    folds: usize,
    injection: &InjectionSpec,
    accept: impl Fn(NodeId, NodeId) -> bool + Copy,
) -> Result<Vec<FoldResult>> {
    config.validate()?;
    if folds == 0 {
        return Err(Error::Config("need at least one fold".into()));
    }
    let n = graph.edges().len();
    let period = ((config.train_ratio * n as f64).round() as usize).clamp(1, n);
    let bound = |i: usize| i * period / (folds + 1);
    let mut out = Vec::with_capacity(folds);
    for fold in 0..folds {
        let (train, _) = candidates_in(graph, 0..bound(fold + 1), config.window);
        let (test, _) = candidates_in(graph, bound(fold + 1)..bound(fold + 2), config.window);
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config(format!("fold {fold} has no usable train or test candidates")));
        }
        let first = test.iter().map(|c| c.t).min().expect("non-empty");
        let last = test.iter().map(|c| c.t).max().expect("non-empty");
        let outcome = fit_candidates(graph, &train, config, |_| {})?;
        let eval = evaluate_candidates(&outcome.model, graph, nodes, config, &test, first..=last, injection, accept)?;
        out.push(FoldResult { fold, train_edges: train.len(), test_edges: test.len(), auc: eval.report.auc });
    }
    Ok(out)
}
