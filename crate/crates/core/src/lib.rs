//! Sequenced continual learning over a network of data nodes.
//!
//! A single model travels between data nodes, training on one node per
//! visit. Before each visit every node is scored with a training-free
//! activation-kernel score (NWOT, optionally under activation interval
//! dropout), a sequencing policy picks the next node, and the harness tracks
//! global accuracy change and per-node forgetting. Elastic weight
//! consolidation can be switched on to damp forgetting.

// `!(x >= 0.0)` is used on purpose: it rejects NaN along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod neural;
pub mod numerics;
pub mod regularizers;
pub mod scoring;
pub mod sequencer;
pub mod tasks;

pub use error::{Error, Result};
pub use harness::{run_episode, sweep, RunConfig, RunLog, SweepConfig, SweepReport};
pub use neural::{Model, ModelConfig};
pub use numerics::{Matrix, RngStream};
pub use scoring::{ScoreSet, ScoreVariant};
pub use sequencer::{Policy, PolicyKind};
pub use tasks::{DataNode, LabeledDataset, NodeId, Partition, PartitionSpec};
