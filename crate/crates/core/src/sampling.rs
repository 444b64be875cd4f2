//! Training negatives by context-dependent corruption, and benchmark
//! anomaly injection for the test split.

use std::collections::HashSet;
use std::ops::RangeInclusive;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{edge_key, DynamicGraph, NodeId};
use crate::subgraph::CandidateEdge;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub negatives_per_positive: f64,
    pub max_retries: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { negatives_per_positive: 1.0, max_retries: 100 }
    }
}

/// Corrupts one endpoint of a random edge of snapshot `t`.
///
/// Picks an edge uniformly, flips a fair coin for which endpoint to replace,
/// and draws the replacement uniformly over all nodes. The result is kept
/// only if its endpoints differ and it is not an edge of snapshot `t`.
pub fn sample_negative<R: Rng + ?Sized>(graph: &DynamicGraph, t: usize, max_retries: usize, rng: &mut R) -> Result<CandidateEdge> {
    let snapshot = graph.snapshot(t);
    let edges = snapshot.edges();
    if edges.is_empty() {
        return Err(Error::Sampling(format!("snapshot {t} has no edges to corrupt")));
    }
    for _ in 0..max_retries.max(1) {
        let (a, b) = edges[rng.gen_range(0..edges.len())];
        let replacement = NodeId(rng.gen_range(0..graph.num_nodes as u32));
        let (x, y) = if rng.gen_bool(0.5) { (replacement, b) } else { (a, replacement) };
        if x != y && !snapshot.has_edge(x, y) {
            return Ok(CandidateEdge::new(x, y, t, 1));
        }
    }
    Err(Error::Sampling(format!(
        "no non-edge found in snapshot {t} after {max_retries} attempts"
    )))
}

/// One batch of negatives for the given positives: `round(ratio * P)`
/// samples, the i-th drawn from the snapshot of `positives[i % P]`.
pub fn sample_negatives<R: Rng + ?Sized>(
    graph: &DynamicGraph,
    positives: &[CandidateEdge],
    config: &SamplingConfig,
    rng: &mut R,
) -> Result<Vec<CandidateEdge>> {
    if !(config.negatives_per_positive > 0.0) {
        return Err(Error::Config("negatives_per_positive must be > 0".into()));
    }
    if positives.is_empty() {
        return Ok(Vec::new());
    }
    let count = (config.negatives_per_positive * positives.len() as f64).round() as usize;
    (0..count)
        .map(|i| sample_negative(graph, positives[i % positives.len()].t, config.max_retries, rng))
        .collect()
}

/// Which snapshots an injected pair must be absent from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionScope {
    #[default]
    AllSnapshots,
    AssignedSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub fraction: f64,
    pub scope: InjectionScope,
    pub max_retries: usize,
}

impl InjectionSpec {
    pub fn new(fraction: f64) -> Self {
        Self { fraction, scope: InjectionScope::AllSnapshots, max_retries: 100 }
    }
}

/// Adds `round(fraction * |test|)` anomalous candidates to the test list.
///
/// Each anomaly is a uniformly random node pair never connected in the
/// dataset (or in its own snapshot, under [`InjectionScope::AssignedSnapshot`])
/// and accepted by `accept`, assigned to a snapshot drawn uniformly from
/// `snapshots`. Originals are relabeled 0, injected edges get 1, and the
/// injected candidates are appended after the originals.
pub fn inject_anomalies<R, F>(
    graph: &DynamicGraph,
    test: &[CandidateEdge],
    spec: &InjectionSpec,
    snapshots: RangeInclusive<usize>,
    accept: F,
    rng: &mut R,
) -> Result<Vec<CandidateEdge>>
where
    R: Rng + ?Sized,
    F: Fn(NodeId, NodeId) -> bool,
{
    if test.is_empty() {
        return Err(Error::Injection("no test candidates to inject into".into()));
    }
    if !(spec.fraction > 0.0 && spec.fraction < 1.0) {
        return Err(Error::Config(format!("injection fraction must be in (0, 1), got {}", spec.fraction)));
    }
    if snapshots.is_empty() || *snapshots.end() >= graph.num_snapshots() {
        return Err(Error::Config(format!("invalid injection snapshot range {snapshots:?}")));
    }
    if graph.num_nodes < 2 {
        return Err(Error::Injection("graph has fewer than two nodes".into()));
    }

    let m = (spec.fraction * test.len() as f64).round() as usize;
    let mut out: Vec<CandidateEdge> = test.iter().map(|c| CandidateEdge { label: 0, ..*c }).collect();
    let mut used = HashSet::new();
    let n = graph.num_nodes as u32;
    for _ in 0..m {
        let mut found = None;
        for _ in 0..spec.max_retries.max(1) {
            let x = NodeId(rng.gen_range(0..n));
            let y = NodeId(rng.gen_range(0..n));
            let t = rng.gen_range(snapshots.clone());
            if x == y || used.contains(&edge_key(x, y)) || !accept(x, y) {
                continue;
            }
            let present = match spec.scope {
                InjectionScope::AllSnapshots => graph.ever_connected(x, y),
                InjectionScope::AssignedSnapshot => graph.snapshot(t).has_edge(x, y),
            };
            if !present {
                found = Some(CandidateEdge::new(x, y, t, 1));
                break;
            }
        }
        let c = found.ok_or_else(|| {
            Error::Injection(format!("could not find an absent pair within {} attempts", spec.max_retries))
        })?;
        used.insert(edge_key(c.x, c.y));
        out.push(c);
    }
    Ok(out)
}
