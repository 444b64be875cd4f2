//! Generated community benchmark.
//!
//! A fixed latent graph is drawn once: inside each community the members sit
//! on a ring and every member is linked to its `ring_radius` nearest ring
//! neighbors on both sides, plus extra random pairs with probability
//! `p_intra`; pairs across communities are linked with the much smaller
//! `p_inter`. Every snapshot then activates each latent edge independently.
//! Normal interactions therefore recur over time and close triangles inside
//! a community, while injected cross-community pairs have neither history
//! nor shared context.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeLabel, NodeId, NodeMap, TemporalEdge};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityConfig {
    pub communities: usize,
    pub community_size: usize,
    pub snapshots: usize,
    /// Ring-lattice reach inside a community; 0 disables the lattice.
    pub ring_radius: usize,
    /// Probability that any other same-community pair is a latent edge.
    pub p_intra: f64,
    /// Probability that a cross-community pair is a latent edge.
    pub p_inter: f64,
    /// Probability that a latent edge is active in a given snapshot.
    pub activation: f64,
    pub seed: u64,
}

impl Default for CommunityConfig {
    fn default() -> Self {
        Self {
            communities: 2,
            community_size: 50,
            snapshots: 20,
            ring_radius: 2,
            p_intra: 0.02,
            p_inter: 0.004,
            activation: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CommunityGraph {
    /// Edges sorted by time; snapshot `s` uses timestamp `s`.
    pub edges: Vec<TemporalEdge>,
    pub community: Vec<usize>,
    pub nodes: NodeMap,
}

impl CommunityGraph {
    pub fn num_nodes(&self) -> usize {
        self.community.len()
    }

    pub fn same_community(&self, a: NodeId, b: NodeId) -> bool {
        self.community[a.index()] == self.community[b.index()]
    }
}

pub fn generate_communities(config: &CommunityConfig) -> Result<CommunityGraph> {
    if config.communities == 0 || config.community_size < 2 || config.snapshots < 2 {
        return Err(Error::Config("need >= 1 community of >= 2 nodes and >= 2 snapshots".into()));
    }
    for p in [config.p_intra, config.p_inter, config.activation] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("probability {p} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.communities * config.community_size;
    let community: Vec<usize> = (0..n).map(|i| i / config.community_size).collect();

    let size = config.community_size;
    let on_ring = |a: usize, b: usize| {
        let gap = (b - a) % size;
        gap.min(size - gap) <= config.ring_radius
    };
    let mut latent = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let linked = if community[a] != community[b] {
                rng.gen_bool(config.p_inter)
            } else {
                on_ring(a, b) || rng.gen_bool(config.p_intra)
            };
            if linked {
                latent.push((NodeId(a as u32), NodeId(b as u32)));
            }
        }
    }

    let mut edges = Vec::new();
    for s in 0..config.snapshots {
        for &(a, b) in &latent {
            if rng.gen_bool(config.activation) {
                let (src, dst) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
                edges.push(TemporalEdge { src, dst, time: s as i64, label: EdgeLabel::Unlabeled });
            }
        }
    }
    if edges.is_empty() {
        return Err(Error::Config("generated graph has no edges".into()));
    }
    Ok(CommunityGraph { edges, community, nodes: NodeMap::identity(n) })
}
