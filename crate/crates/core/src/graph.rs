//! Timestamped edge storage and per-snapshot adjacency.
//!
//! Edges are undirected and unweighted once they reach a [`Snapshot`]:
//! direction is dropped, duplicates within a snapshot collapse to a single
//! adjacency entry, and self-loops never make it past ingestion.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense node index, contiguous in `0..num_nodes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeLabel {
    Normal,
    Anomalous,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TemporalEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub time: i64,
    pub label: EdgeLabel,
}

/// Undirected key for an edge: smaller endpoint first.
#[inline]
pub fn edge_key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Bijection between external node keys and dense [`NodeId`]s, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeMap {
    keys: Vec<String>,
    index: HashMap<String, NodeId>,
}

impl NodeMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, key: &str) -> NodeId {
        if let Some(&id) = self.index.get(key) {
            return id;
        }
        let id = NodeId(self.keys.len() as u32);
        self.keys.push(key.to_string());
        self.index.insert(key.to_string(), id);
        id
    }

    pub fn get(&self, key: &str) -> Option<NodeId> {
        self.index.get(key).copied()
    }

    pub fn key(&self, id: NodeId) -> &str {
        &self.keys[id.index()]
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Identity map `"0" -> 0, "1" -> 1, ...` for generated graphs.
    pub fn identity(num_nodes: usize) -> Self {
        let mut map = Self::new();
        for i in 0..num_nodes {
            map.intern(&i.to_string());
        }
        map
    }
}

/// How fields of an edge record are separated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgeFileFormat {
    /// Any mix of whitespace and commas.
    #[default]
    Auto,
    Whitespace,
    Comma,
}

/// Parsed edge file.
#[derive(Debug, Clone)]
pub struct EdgeStream {
    pub edges: Vec<TemporalEdge>,
    pub nodes: NodeMap,
    pub self_loops_dropped: usize,
}

fn split_fields(line: &str, format: EdgeFileFormat) -> Vec<&str> {
    match format {
        EdgeFileFormat::Auto => line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect(),
        EdgeFileFormat::Whitespace => line.split_whitespace().collect(),
        EdgeFileFormat::Comma => line.split(',').map(str::trim).collect(),
    }
}

/// Parses `src dst timestamp [label]` records. `#` lines and blank lines are skipped.
pub fn parse_edge_stream<R: BufRead>(reader: R, format: EdgeFileFormat) -> Result<EdgeStream> {
    let mut nodes = NodeMap::new();
    let mut edges = Vec::new();
    let mut self_loops_dropped = 0;
    let mut records = 0usize;

    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields = split_fields(trimmed, format);
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected `src dst timestamp [label]`, got {} fields", fields.len()),
            });
        }
        if fields[..3].iter().any(|f| f.is_empty()) {
            return Err(Error::Parse { line: lineno, msg: "empty field".into() });
        }
        let time: i64 = fields[2].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("invalid timestamp `{}`", fields[2]),
        })?;
        if time < 0 {
            return Err(Error::Parse { line: lineno, msg: format!("negative timestamp {time}") });
        }
        let label = match fields.get(3) {
            None => EdgeLabel::Unlabeled,
            Some(&"0") => EdgeLabel::Normal,
            Some(&"1") => EdgeLabel::Anomalous,
            Some(other) => {
                return Err(Error::Parse { line: lineno, msg: format!("label must be 0 or 1, got `{other}`") })
            }
        };
        records += 1;
        if fields[0] == fields[1] {
            self_loops_dropped += 1;
            continue;
        }
        let src = nodes.intern(fields[0]);
        let dst = nodes.intern(fields[1]);
        edges.push(TemporalEdge { src, dst, time, label });
    }

    if records == 0 {
        return Err(Error::EmptyInput("edge file contains no records".into()));
    }
    Ok(EdgeStream { edges, nodes, self_loops_dropped })
}

pub fn ingest_edge_stream(path: impl AsRef<Path>, format: EdgeFileFormat) -> Result<EdgeStream> {
    let file = File::open(path.as_ref())?;
    parse_edge_stream(BufReader::new(file), format)
}

/// Writes edges in canonical form: one `src dst timestamp[ label]` record per line.
pub fn export_edges<W: Write>(mut out: W, edges: &[TemporalEdge], nodes: &NodeMap) -> Result<()> {
    for e in edges {
        write!(out, "{} {} {}", nodes.key(e.src), nodes.key(e.dst), e.time)?;
        match e.label {
            EdgeLabel::Normal => writeln!(out, " 0")?,
            EdgeLabel::Anomalous => writeln!(out, " 1")?,
            EdgeLabel::Unlabeled => writeln!(out)?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    #[default]
    EqualCount,
    EqualTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphMode {
    #[default]
    TimeEvolving,
    Accumulated,
}

/// One graph snapshot: symmetric, sorted neighbor lists plus an edge set.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub index: usize,
    adjacency: Vec<Vec<NodeId>>,
    edge_set: HashSet<(NodeId, NodeId)>,
    edge_list: Vec<(NodeId, NodeId)>,
}

impl Snapshot {
    pub fn from_edges(index: usize, num_nodes: usize, pairs: impl IntoIterator<Item = (NodeId, NodeId)>) -> Self {
        let mut edge_set = HashSet::new();
        for (a, b) in pairs {
            if a != b {
                edge_set.insert(edge_key(a, b));
            }
        }
        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(a, b) in &edge_set {
            adjacency[a.index()].push(b);
            adjacency[b.index()].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        let mut edge_list: Vec<_> = edge_set.iter().copied().collect();
        edge_list.sort_unstable();
        Self { index, adjacency, edge_set, edge_list }
    }

    #[inline]
    pub fn neighbors(&self, node: NodeId) -> &[NodeId] {
        self.adjacency.get(node.index()).map(Vec::as_slice).unwrap_or(&[])
    }

    #[inline]
    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.edge_set.contains(&edge_key(a, b))
    }

    pub fn num_edges(&self) -> usize {
        self.edge_set.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edge_set.is_empty()
    }

    /// Undirected edges in ascending order, smaller endpoint first.
    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edge_list
    }

    pub fn edge_set(&self) -> &HashSet<(NodeId, NodeId)> {
        &self.edge_set
    }
}

/// Immutable sequence of snapshots plus the time-ordered edges that produced them.
#[derive(Debug, Clone)]
pub struct DynamicGraph {
    pub num_nodes: usize,
    pub mode: GraphMode,
    pub partition: Partition,
    snapshots: Vec<Snapshot>,
    edges: Vec<TemporalEdge>,
    edge_snapshot: Vec<usize>,
    snapshot_start: Vec<i64>,
}

impl DynamicGraph {
    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn snapshot(&self, index: usize) -> &Snapshot {
        &self.snapshots[index]
    }

    pub fn num_snapshots(&self) -> usize {
        self.snapshots.len()
    }

    /// Input edges, stably sorted by time.
    pub fn edges(&self) -> &[TemporalEdge] {
        &self.edges
    }

    /// Snapshot index assigned to each entry of [`Self::edges`].
    pub fn edge_snapshots(&self) -> &[usize] {
        &self.edge_snapshot
    }

    /// Edges assigned to snapshot `index` (its own period only, regardless of mode).
    pub fn period_edges(&self, index: usize) -> impl Iterator<Item = &TemporalEdge> {
        self.edges
            .iter()
            .zip(&self.edge_snapshot)
            .filter(move |(_, &s)| s == index)
            .map(|(e, _)| e)
    }

    /// Earliest timestamp assigned to each snapshot; empty snapshots inherit
    /// the start of the previous one.
    pub fn snapshot_starts(&self) -> &[i64] {
        &self.snapshot_start
    }

    /// Latest snapshot whose start time is at or before `time`.
    pub fn snapshot_of_time(&self, time: i64) -> usize {
        match self.snapshot_start.partition_point(|&s| s <= time) {
            0 => 0,
            n => n - 1,
        }
    }

    pub fn time_range(&self) -> (i64, i64) {
        (
            self.edges.first().map(|e| e.time).unwrap_or(0),
            self.edges.last().map(|e| e.time).unwrap_or(0),
        )
    }

    /// True if the pair is an edge of any snapshot.
    pub fn ever_connected(&self, a: NodeId, b: NodeId) -> bool {
        match self.mode {
            GraphMode::Accumulated => self.snapshots.last().is_some_and(|s| s.has_edge(a, b)),
            GraphMode::TimeEvolving => self.snapshots.iter().any(|s| s.has_edge(a, b)),
        }
    }
}

/// Partitions edges into `num_snapshots` snapshots.
///
/// Equal-count splits the time-sorted edges into contiguous blocks whose sizes
/// differ by at most one, with the remainder going to the earliest blocks.
/// Equal-time splits `[min_time, max_time]` into intervals of equal width.
pub fn build_snapshots(
    edges: &[TemporalEdge],
    num_snapshots: usize,
    partition: Partition,
    mode: GraphMode,
) -> Result<DynamicGraph> {
    let num_nodes = edges
        .iter()
        .map(|e| e.src.index().max(e.dst.index()) + 1)
        .max()
        .unwrap_or(0);
    build_snapshots_with_nodes(edges, num_nodes, num_snapshots, partition, mode)
}

pub fn build_snapshots_with_nodes(
    edges: &[TemporalEdge],
    num_nodes: usize,
    num_snapshots: usize,
    partition: Partition,
    mode: GraphMode,
) -> Result<DynamicGraph> {
    if num_snapshots < 2 {
        return Err(Error::Config(format!("need at least 2 snapshots, got {num_snapshots}")));
    }
    if edges.is_empty() {
        return Err(Error::EmptyInput("no edges to partition".into()));
    }
    if let Some(e) = edges.iter().find(|e| e.src.index() >= num_nodes || e.dst.index() >= num_nodes) {
        return Err(Error::Config(format!(
            "edge ({}, {}) references a node outside 0..{num_nodes}",
            e.src, e.dst
        )));
    }

    let mut sorted = edges.to_vec();
    sorted.sort_by_key(|e| e.time);

    let assignment: Vec<usize> = match partition {
        Partition::EqualCount => {
            let n = sorted.len();
            if num_snapshots > n {
                return Err(Error::Config(format!(
                    "{num_snapshots} snapshots requested for only {n} edges"
                )));
            }
            let base = n / num_snapshots;
            let extra = n % num_snapshots;
            let mut out = Vec::with_capacity(n);
            for s in 0..num_snapshots {
                let size = base + usize::from(s < extra);
                out.extend(std::iter::repeat_n(s, size));
            }
            out
        }
        Partition::EqualTime => {
            let lo = sorted[0].time as i128;
            let width = sorted[sorted.len() - 1].time as i128 - lo + 1;
            sorted
                .iter()
                .map(|e| ((e.time as i128 - lo) * num_snapshots as i128 / width) as usize)
                .collect()
        }
    };

    let mut period: Vec<Vec<(NodeId, NodeId)>> = vec![Vec::new(); num_snapshots];
    let mut starts = vec![i64::MAX; num_snapshots];
    for (e, &s) in sorted.iter().zip(&assignment) {
        period[s].push((e.src, e.dst));
        starts[s] = starts[s].min(e.time);
    }
    let mut last = sorted[0].time;
    for start in &mut starts {
        if *start == i64::MAX {
            *start = last;
        }
        last = *start;
    }

    let snapshots = match mode {
        GraphMode::TimeEvolving => period
            .into_iter()
            .enumerate()
            .map(|(i, pairs)| Snapshot::from_edges(i, num_nodes, pairs))
            .collect(),
        GraphMode::Accumulated => {
            let mut acc: Vec<(NodeId, NodeId)> = Vec::new();
            let mut out = Vec::with_capacity(num_snapshots);
            for (i, pairs) in period.into_iter().enumerate() {
                acc.extend(pairs);
                out.push(Snapshot::from_edges(i, num_nodes, acc.iter().copied()));
            }
            out
        }
    };

    Ok(DynamicGraph {
        num_nodes,
        mode,
        partition,
        snapshots,
        edges: sorted,
        edge_snapshot: assignment,
        snapshot_start: starts,
    })
}

/// Unweighted shortest-path distances from `source`, capped at `max_depth`.
///
/// `excluded_edge` is treated as absent in both directions. Unreached nodes
/// are omitted.
pub fn bfs_distances(
    snapshot: &Snapshot,
    source: NodeId,
    max_depth: usize,
    excluded_edge: Option<(NodeId, NodeId)>,
) -> HashMap<NodeId, usize> {
    let excluded = excluded_edge.map(|(a, b)| edge_key(a, b));
    let mut dist = HashMap::new();
    dist.insert(source, 0);
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let d = dist[&u];
        if d == max_depth {
            continue;
        }
        for &v in snapshot.neighbors(u) {
            if excluded == Some(edge_key(u, v)) || dist.contains_key(&v) {
                continue;
            }
            dist.insert(v, d + 1);
            queue.push_back(v);
        }
    }
    dist
}
