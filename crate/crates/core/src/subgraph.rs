//! Enclosing subgraph extraction and structural node labeling.
//!
//! For a candidate edge `(x, y)` the h-hop enclosing subgraph of a snapshot
//! is the induced subgraph on every node within `h` hops of `x` or `y`. Each
//! node is then labeled from its distances to the two centers, and the
//! labels become one-hot node features.

use std::collections::{HashMap, VecDeque};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{bfs_distances, DynamicGraph, NodeId, Snapshot};
use crate::tensor::Tensor;

/// An edge to classify: `label` is 1 for anomalous, 0 for normal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct CandidateEdge {
    pub x: NodeId,
    pub y: NodeId,
    /// Snapshot index the edge is judged in.
    pub t: usize,
    pub label: u8,
}

impl CandidateEdge {
    pub fn new(x: NodeId, y: NodeId, t: usize, label: u8) -> Self {
        Self { x, y, t, label }
    }
}

/// Induced subgraph around one candidate in one snapshot.
///
/// Local index 0 is `x` and local index 1 is `y`; the remaining nodes follow
/// in ascending [`NodeId`] order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabeledSubgraph {
    pub nodes: Vec<NodeId>,
    /// Sorted local neighbor lists, symmetric.
    pub adjacency: Vec<Vec<usize>>,
    pub labels: Vec<u32>,
    pub center: (usize, usize),
}

impl LabeledSubgraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Undirected local edges `(i, j)` with `i < j`.
    pub fn edge_pairs(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }
}

/// The `w + 1` labeled subgraphs for snapshots `t - w ..= t`, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EnclosingSubgraphWindow {
    pub candidate: CandidateEdge,
    pub subgraphs: Vec<LabeledSubgraph>,
}

/// Nodes within `h` hops of `x` or `y`, with `x` and `y` first and the rest
/// in ascending order. Both centers are included even when isolated.
pub fn extract_enclosing_subgraph(snapshot: &Snapshot, x: NodeId, y: NodeId, h: usize) -> Vec<NodeId> {
    let mut rest: Vec<NodeId> = bfs_distances(snapshot, x, h, None)
        .into_keys()
        .chain(bfs_distances(snapshot, y, h, None).into_keys())
        .filter(|&n| n != x && n != y)
        .collect();
    rest.sort_unstable();
    rest.dedup();
    let mut nodes = Vec::with_capacity(rest.len() + 2);
    nodes.push(x);
    nodes.push(y);
    nodes.extend(rest);
    nodes
}

/// Local adjacency of the subgraph induced by `nodes`.
pub fn induced_adjacency(snapshot: &Snapshot, nodes: &[NodeId]) -> Vec<Vec<usize>> {
    let local: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    nodes
        .iter()
        .map(|&n| {
            let mut ns: Vec<usize> = snapshot.neighbors(n).iter().filter_map(|m| local.get(m).copied()).collect();
            ns.sort_unstable();
            ns
        })
        .collect()
}

/// BFS distances inside a local adjacency, ignoring the edge `(x, y)`.
fn local_distances(adjacency: &[Vec<usize>], source: usize, x: usize, y: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adjacency.len()];
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u].expect("queued nodes have a distance");
        for &v in &adjacency[u] {
            if (u == x && v == y) || (u == y && v == x) || dist[v].is_some() {
                continue;
            }
            dist[v] = Some(d + 1);
            queue.push_back(v);
        }
    }
    dist
}

/// Label for a node at distances `dx`, `dy` from the two centers.
///
/// Unreachable from either center gives 0; otherwise
/// `1 + min(dx, dy) + (s/2) * ((s/2) + (s%2) - 1)` with `s = dx + dy` and
/// integer division.
pub fn distance_label(dx: Option<usize>, dy: Option<usize>) -> u32 {
    let (Some(dx), Some(dy)) = (dx, dy) else { return 0 };
    let sum = (dx + dy) as i64;
    let half = sum / 2;
    (1 + dx.min(dy) as i64 + half * (half + sum % 2 - 1)) as u32
}

/// Labels every node of an induced subgraph from its distances to the
/// centers `x` and `y`, measured with the edge `(x, y)` removed.
///
/// Centers get 1 unless they cannot reach each other, in which case every
/// node (centers included) with an infinite distance gets 0.
pub fn label_nodes(adjacency: &[Vec<usize>], x: usize, y: usize) -> Vec<u32> {
    let dx = local_distances(adjacency, x, x, y);
    let dy = local_distances(adjacency, y, x, y);
    (0..adjacency.len())
        .map(|i| match (dx[i], dy[i]) {
            (Some(_), Some(_)) if i == x || i == y => 1,
            (a, b) => distance_label(a, b),
        })
        .collect()
}

/// One-hot encodes labels into an `n x width` matrix; labels at or above
/// `width - 1` share the last column.
pub fn encode_features(labels: &[u32], width: usize) -> Result<Tensor> {
    if width < 2 {
        return Err(Error::Config(format!("label vocabulary width must be >= 2, got {width}")));
    }
    let mut t = Tensor::zeros(&[labels.len(), width]);
    for (r, &l) in labels.iter().enumerate() {
        t.set(r, (l as usize).min(width - 1), 1.0);
    }
    Ok(t)
}

/// Extracts and labels the enclosing subgraph of `(x, y)` in one snapshot.
///
/// With `mask_target` the edge `(x, y)` is left out of the induced
/// adjacency, so the subgraph never reveals whether the candidate itself
/// is present.
pub fn extract_labeled_subgraph(
    snapshot: &Snapshot,
    x: NodeId,
    y: NodeId,
    h: usize,
    mask_target: bool,
) -> LabeledSubgraph {
    let nodes = extract_enclosing_subgraph(snapshot, x, y, h);
    let mut adjacency = induced_adjacency(snapshot, &nodes);
    if mask_target {
        adjacency[0].retain(|&j| j != 1);
        adjacency[1].retain(|&j| j != 0);
    }
    let labels = label_nodes(&adjacency, 0, 1);
    LabeledSubgraph { nodes, adjacency, labels, center: (0, 1) }
}

/// Builds the window of labeled subgraphs for snapshots `t - w ..= t`.
///
/// The candidate edge is never added to any snapshot, and it is masked out
/// of the subgraph at `t` so that observed and unobserved candidates look
/// alike in the snapshot being judged.
pub fn extract_window(graph: &DynamicGraph, candidate: CandidateEdge, h: usize, w: usize) -> Result<EnclosingSubgraphWindow> {
    let t = candidate.t;
    if t < w {
        return Err(Error::Window { t, w });
    }
    if t >= graph.num_snapshots() {
        return Err(Error::Config(format!(
            "candidate snapshot {t} outside 0..{}",
            graph.num_snapshots()
        )));
    }
    if candidate.x == candidate.y {
        return Err(Error::Contract(format!("candidate is a self-loop on {}", candidate.x)));
    }
    let subgraphs = (t - w..=t)
        .map(|i| extract_labeled_subgraph(graph.snapshot(i), candidate.x, candidate.y, h, i == t))
        .collect();
    Ok(EnclosingSubgraphWindow { candidate, subgraphs })
}

#[derive(Serialize)]
struct SubgraphDump<'a> {
    nodes: &'a [NodeId],
    edges: Vec<(usize, usize)>,
    labels: &'a [u32],
    center: (usize, usize),
}

#[derive(Serialize)]
struct WindowDump<'a> {
    candidate: &'a CandidateEdge,
    subgraphs: Vec<SubgraphDump<'a>>,
}

/// Debug dump of a window: nodes, local edge pairs, labels and centers per snapshot.
pub fn window_to_json(window: &EnclosingSubgraphWindow) -> Result<String> {
    let dump = WindowDump {
        candidate: &window.candidate,
        subgraphs: window
            .subgraphs
            .iter()
            .map(|s| SubgraphDump { nodes: &s.nodes, edges: s.edge_pairs(), labels: &s.labels, center: s.center })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&dump)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::graph::{build_snapshots, EdgeLabel, GraphMode, Partition, TemporalEdge};

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    fn snap(num: usize, edges: &[(u32, u32)]) -> Snapshot {
        Snapshot::from_edges(0, num, edges.iter().map(|&(a, b)| (n(a), n(b))))
    }

    fn sorted(mut v: Vec<NodeId>) -> Vec<NodeId> {
        v.sort();
        v
    }

    #[test]
    fn enclosing_subgraph_examples() {
        let path = snap(4, &[(0, 1), (1, 2), (2, 3)]);
        assert_eq!(sorted(extract_enclosing_subgraph(&path, n(1), n(2), 1)), vec![n(0), n(1), n(2), n(3)]);
        assert_eq!(sorted(extract_enclosing_subgraph(&path, n(0), n(1), 1)), vec![n(0), n(1), n(2)]);
        let sparse = snap(8, &[(0, 1)]);
        assert_eq!(extract_enclosing_subgraph(&sparse, n(4), n(7), 2), vec![n(4), n(7)]);
    }

    #[test]
    fn label_formula_examples() {
        assert_eq!(distance_label(Some(1), Some(1)), 2);
        assert_eq!(distance_label(Some(1), Some(2)), 3);
        assert_eq!(distance_label(Some(2), Some(1)), 3);
        assert_eq!(distance_label(Some(1), Some(3)), 4);
        assert_eq!(distance_label(Some(2), Some(2)), 5);
        assert_eq!(distance_label(Some(1), None), 0);
        assert_eq!(distance_label(None, None), 0);
    }

    #[test]
    fn centers_are_labeled_one() {
        // triangle 0-1-2 plus pendant 3 on 0; target (0, 1)
        let adj = vec![vec![1, 2, 3], vec![0, 2], vec![0, 1], vec![0]];
        let labels = label_nodes(&adj, 0, 1);
        assert_eq!(labels, vec![1, 1, 2, 4]);
    }

    #[test]
    fn one_sided_nodes_get_zero() {
        // 0-1 target, 2 hangs off 0 only and nothing links back to 1
        let adj = vec![vec![1, 2], vec![0], vec![0]];
        assert_eq!(label_nodes(&adj, 0, 1), vec![0, 0, 0]);
    }

    #[test]
    fn isolated_centers_get_zero() {
        let s = snap(8, &[(0, 1)]);
        let sub = extract_labeled_subgraph(&s, n(4), n(7), 1, false);
        assert_eq!(sub.nodes, vec![n(4), n(7)]);
        assert_eq!(sub.labels, vec![0, 0]);
    }

    #[test]
    fn one_hot_encoding() {
        let t = encode_features(&[1, 1, 2], 4).unwrap();
        assert_eq!(t.data(), &[0., 1., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0.]);
        let t = encode_features(&[9], 4).unwrap();
        assert_eq!(t.data(), &[0., 0., 0., 1.]);
        let t = encode_features(&[0], 4).unwrap();
        assert_eq!(t.data(), &[1., 0., 0., 0.]);
        assert!(encode_features(&[0], 1).is_err());
    }

    fn chain_graph(num_snapshots: usize) -> DynamicGraph {
        let edges: Vec<TemporalEdge> = (0..num_snapshots as i64)
            .flat_map(|t| {
                [(0, 1), (1, 2), (2, 3)].into_iter().map(move |(a, b)| TemporalEdge {
                    src: n(a),
                    dst: n(b),
                    time: t,
                    label: EdgeLabel::Unlabeled,
                })
            })
            .collect();
        build_snapshots(&edges, num_snapshots, Partition::EqualCount, GraphMode::TimeEvolving).unwrap()
    }

    #[test]
    fn window_sizes() {
        let g = chain_graph(6);
        let c = CandidateEdge::new(n(1), n(2), 5, 0);
        assert_eq!(extract_window(&g, c, 1, 0).unwrap().subgraphs.len(), 1);
        assert_eq!(extract_window(&g, c, 1, 5).unwrap().subgraphs.len(), 6);
        let early = CandidateEdge::new(n(1), n(2), 2, 0);
        assert!(matches!(extract_window(&g, early, 1, 5), Err(Error::Window { t: 2, w: 5 })));
    }

    #[test]
    fn target_is_masked_only_in_current_snapshot() {
        let g = chain_graph(3);
        let c = CandidateEdge::new(n(1), n(2), 2, 0);
        let win = extract_window(&g, c, 1, 2).unwrap();
        for (i, sub) in win.subgraphs.iter().enumerate() {
            let has_target = sub.adjacency[0].contains(&1);
            assert_eq!(has_target, i != 2, "snapshot {i}");
            // labels ignore the target edge everywhere
            assert_eq!(sub.labels, vec![0, 0, 0, 0]);
        }
    }

    #[test]
    fn dump_is_json() {
        let g = chain_graph(2);
        let win = extract_window(&g, CandidateEdge::new(n(0), n(1), 1, 0), 1, 1).unwrap();
        let v: serde_json::Value = serde_json::from_str(&window_to_json(&win).unwrap()).unwrap();
        assert_eq!(v["subgraphs"].as_array().unwrap().len(), 2);
        assert_eq!(v["subgraphs"][0]["edges"], serde_json::json!([[0, 1], [1, 2]]));
    }

    fn random_snapshot(n: usize) -> impl Strategy<Value = Snapshot> {
        prop::collection::vec((0..n as u32, 0..n as u32), 0..3 * n)
            .prop_map(move |pairs| Snapshot::from_edges(0, n, pairs.into_iter().map(|(a, b)| (NodeId(a), NodeId(b)))))
    }

    proptest! {
        #[test]
        fn labels_are_symmetric_in_the_centers(s in random_snapshot(14), x in 0u32..14, y in 0u32..14, h in 1usize..3) {
            prop_assume!(x != y);
            let a = extract_labeled_subgraph(&s, n(x), n(y), h, false);
            let b = extract_labeled_subgraph(&s, n(y), n(x), h, false);
            let by_node = |g: &LabeledSubgraph| {
                let mut v: Vec<(NodeId, u32)> = g.nodes.iter().copied().zip(g.labels.iter().copied()).collect();
                v.sort();
                v
            };
            prop_assert_eq!(by_node(&a), by_node(&b));
        }

        #[test]
        fn one_hop_labels_stay_in_the_reachable_set(s in random_snapshot(16), x in 0u32..16, y in 0u32..16) {
            prop_assume!(x != y);
            let g = extract_labeled_subgraph(&s, n(x), n(y), 1, false);
            for &l in &g.labels {
                prop_assert!([0, 1, 2, 3, 4, 6].contains(&l), "label {l}");
            }
        }

        #[test]
        fn induced_adjacency_is_symmetric_and_loop_free(s in random_snapshot(12), x in 0u32..12, y in 0u32..12) {
            prop_assume!(x != y);
            let g = extract_labeled_subgraph(&s, n(x), n(y), 2, false);
            for (i, row) in g.adjacency.iter().enumerate() {
                prop_assert!(!row.contains(&i));
                for &j in row {
                    prop_assert!(g.adjacency[j].contains(&i));
                    prop_assert!(s.has_edge(g.nodes[i], g.nodes[j]));
                }
            }
        }
    }
}
