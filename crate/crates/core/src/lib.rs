//! Anomalous edge detection in dynamic graphs with structural temporal graph
//! neural networks.
//!
//! The pipeline extracts labeled h-hop enclosing subgraphs around a candidate
//! edge in every snapshot of a temporal window ([`subgraph`]), encodes each
//! snapshot with stacked graph convolutions and SortPooling ([`gsfe`]), and
//! runs a GRU over the window followed by a fully connected classifier
//! ([`tdn`]). [`trainer`] wires everything into an end-to-end training loop
//! driven by context-dependent negative sampling ([`sampling`]), and
//! [`eval`] scores the result.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod graph;
pub mod gsfe;
pub mod model;
pub mod sampling;
pub mod subgraph;
pub mod synthetic;
pub mod tdn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{DynamicGraph, EdgeLabel, GraphMode, NodeId, NodeMap, Partition, Snapshot, TemporalEdge};
pub use model::{Model, ModelConfig};
pub use subgraph::{CandidateEdge, EnclosingSubgraphWindow, LabeledSubgraph};
pub use trainer::{TrainConfig, TrainOutcome};
