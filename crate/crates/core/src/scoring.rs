//! NWOT scores: binary activation codes from one forward pass, a Hamming
//! similarity kernel over the minibatch, and its log-determinant.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{forward_with, ActivationMode, ForwardTrace, Model};
use crate::numerics::{log_det_psd, Matrix, RngStream};
use crate::tasks::{sample_minibatch, DataNode, NodeId};

pub const DEFAULT_SCORE_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    #[default]
    Relu,
    Aid,
}

impl std::fmt::Display for ScoreVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreVariant::Relu => "relu",
            ScoreVariant::Aid => "aid",
        })
    }
}

/// Which hidden units fired (`> 0`) for one sample, across all hidden layers.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ActivationCode(pub Vec<bool>);

impl ActivationCode {
    pub fn from_bits(bits: &[u8]) -> Self {
        Self(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn hamming(&self, other: &ActivationCode) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

pub fn activation_codes(trace: &ForwardTrace) -> Result<Vec<ActivationCode>> {
    if !trace.captured {
        return Err(Error::State("forward trace was run without activation capture".into()));
    }
    let batch = trace.logits.rows();
    let mut codes = vec![Vec::new(); batch];
    for layer in &trace.post_activations {
        for (code, row) in codes.iter_mut().zip(layer.row_iter()) {
            code.extend(row.iter().map(|&v| v > 0.0));
        }
    }
    Ok(codes.into_iter().map(ActivationCode).collect())
}

/// `K[i][j] = N_A − hamming(c_i, c_j)`.
pub fn build_kernel(codes: &[ActivationCode]) -> Result<Matrix> {
    if codes.len() < 2 {
        return Err(Error::Shape(format!(
            "kernel needs at least 2 codes, got {}",
            codes.len()
        )));
    }
    let n_a = codes[0].len();
    if let Some(bad) = codes.iter().find(|c| c.len() != n_a) {
        return Err(Error::Shape(format!("code length {} differs from {n_a}", bad.len())));
    }
    let b = codes.len();
    let mut k = Matrix::zeros(b, b);
    for i in 0..b {
        k[(i, i)] = n_a as f64;
        for j in 0..i {
            let s = (n_a - codes[i].hamming(&codes[j])) as f64;
            k[(i, j)] = s;
            k[(j, i)] = s;
        }
    }
    Ok(k)
}

/// Log-determinant of the Hamming kernel of `codes`.
pub fn score_codes(codes: &[ActivationCode], jitter: f64) -> Result<f64> {
    log_det_psd(&build_kernel(codes)?, jitter)
}

/// NWOT score of `minibatch` under `model`. The AID variant swaps the hidden
/// ReLU for interval dropout with the model's AID parameters, drawing masks
/// from `stream`.
pub fn nwot_score(
    model: &Model,
    minibatch: &Matrix,
    variant: ScoreVariant,
    stream: &RngStream,
    jitter: f64,
) -> Result<f64> {
    if minibatch.rows() < 2 {
        return Err(Error::Domain("scoring needs at least 2 samples".into()));
    }
    let mode = match variant {
        ScoreVariant::Relu => ActivationMode::Relu,
        ScoreVariant::Aid => ActivationMode::Aid(
            model
                .config
                .aid
                .ok_or_else(|| Error::Config("aid scoring requires aid parameters in the model config".into()))?,
        ),
    };
    let trace = forward_with(model, minibatch, mode, true, Some(stream))?;
    score_codes(&activation_codes(&trace)?, jitter)
}

/// Per-node scores at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub step: usize,
    pub variant: ScoreVariant,
    pub scores: BTreeMap<NodeId, f64>,
    pub minibatch_size: usize,
    /// Nodes left out because they hold fewer than two training samples.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<NodeId>,
}

impl ScoreSet {
    pub fn from_scores(step: usize, variant: ScoreVariant, scores: impl IntoIterator<Item = (NodeId, f64)>) -> Self {
        Self {
            step,
            variant,
            scores: scores.into_iter().collect(),
            minibatch_size: 0,
            skipped: Vec::new(),
        }
    }

    pub fn get(&self, node: NodeId) -> Option<f64> {
        self.scores.get(&node).copied()
    }

    /// Highest-scoring node; ties go to the lowest id.
    pub fn argmax(&self) -> Option<NodeId> {
        argmax_over(self, self.scores.keys().copied())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Highest-scoring node among `nodes`; ties go to the lowest id. Nodes with no
/// score are ignored.
pub fn argmax_over(scores: &ScoreSet, nodes: impl IntoIterator<Item = NodeId>) -> Option<NodeId> {
    let mut best: Option<(NodeId, f64)> = None;
    for node in nodes {
        let Some(s) = scores.get(node) else { continue };
        best = match best {
            Some((b, bs)) if bs > s || (bs == s && b < node) => Some((b, bs)),
            _ => Some((node, s)),
        };
    }
    best.map(|(n, _)| n)
}

/// How [`score_all_nodes`] spreads the per-node work.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

/// Scoring knobs shared by a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    #[serde(default)]
    pub variant: ScoreVariant,
    #[serde(default = "default_batch")]
    pub minibatch_size: usize,
    #[serde(default)]
    pub jitter: f64,
}

fn default_batch() -> usize {
    DEFAULT_SCORE_BATCH
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            variant: ScoreVariant::Relu,
            minibatch_size: DEFAULT_SCORE_BATCH,
            jitter: 0.0,
        }
    }
}

/// Scores every node. Node `i` draws its minibatch from stream
/// `(step, i, "score-sample")` and its AID masks from `(step, i, "aid-mask")`,
/// so the result does not depend on evaluation order or threading.
pub fn score_all_nodes(
    model: &Model,
    nodes: &[DataNode],
    config: &ScoringConfig,
    step: usize,
    rng_root: u64,
    execution: Execution,
) -> Result<ScoreSet> {
    if config.minibatch_size < 2 {
        return Err(Error::Config("scoring minibatch size must be >= 2".into()));
    }
    let score_one = |node: &DataNode| -> Result<Option<(NodeId, f64)>> {
        if node.train_sub.len() < 2 {
            return Ok(None);
        }
        let sample_stream = RngStream::new(rng_root, step as u64, node.node_id as u64, "score-sample");
        let mask_stream = RngStream::new(rng_root, step as u64, node.node_id as u64, "aid-mask");
        let (batch, _) = sample_minibatch(node, config.minibatch_size, &sample_stream)?;
        let s = nwot_score(model, &batch, config.variant, &mask_stream, config.jitter)?;
        if !s.is_finite() {
            return Err(Error::Numeric(format!("node {} scored {s}", node.node_id)));
        }
        Ok(Some((node.node_id, s)))
    };
    let results: Vec<Result<Option<(NodeId, f64)>>> = match execution {
        Execution::Sequential => nodes.iter().map(score_one).collect(),
        Execution::Parallel => nodes.par_iter().map(score_one).collect(),
    };
    let mut set = ScoreSet {
        step,
        variant: config.variant,
        scores: BTreeMap::new(),
        minibatch_size: config.minibatch_size,
        skipped: Vec::new(),
    };
    for (node, r) in nodes.iter().zip(results) {
        match r? {
            Some((id, s)) => {
                set.scores.insert(id, s);
            }
            None => set.skipped.push(node.node_id),
        }
    }
    Ok(set)
}
