//! Elastic weight consolidation: diagonal Fisher estimates taken after each
//! node visit and a quadratic pull back toward the stored parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{loss_and_grads, predict_proba, Model};
use crate::numerics::RngStream;
use crate::tasks::{sample_minibatch, DataNode, NodeId};

/// Labels used when differentiating the log-likelihood for the Fisher.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    /// Labels sampled from the model's own predictive distribution.
    #[default]
    Sampled,
    /// Exact expectation over the predictive distribution (one backward
    /// pass per class).
    Expected,
    /// Dataset labels.
    Empirical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EwcConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_fisher_batches")]
    pub fisher_batches: usize,
    #[serde(default = "default_fisher_batch_size")]
    pub fisher_batch_size: usize,
    #[serde(default)]
    pub fisher_mode: FisherMode,
}

fn default_lambda() -> f64 {
    50.0
}

fn default_fisher_batches() -> usize {
    8
}

fn default_fisher_batch_size() -> usize {
    16
}

impl Default for EwcConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            fisher_batches: default_fisher_batches(),
            fisher_batch_size: default_fisher_batch_size(),
            fisher_mode: FisherMode::Sampled,
        }
    }
}

impl EwcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("ewc lambda must be >= 0, got {}", self.lambda)));
        }
        if self.fisher_batches == 0 || self.fisher_batch_size == 0 {
            return Err(Error::Config(
                "fisher_batches and fisher_batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub theta_star: Vec<f64>,
    pub fisher: Vec<f64>,
    pub source_node: NodeId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EwcState {
    pub anchors: Vec<Anchor>,
    pub config: EwcConfig,
}

impl EwcState {
    pub fn new(config: EwcConfig) -> Self {
        Self {
            anchors: Vec::new(),
            config,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.config.lambda
    }

    pub fn anchor_for(&self, node: NodeId) -> Option<&Anchor> {
        self.anchors.iter().find(|a| a.source_node == node)
    }
}

/// Diagonal Fisher: mean over `batches × fisher_batch_size` sampled inputs of
/// the squared gradient of `log p(y|x)`.
pub fn estimate_fisher(
    model: &Model,
    node: &DataNode,
    batches: usize,
    batch_size: usize,
    mode: FisherMode,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    if node.train_sub.is_empty() {
        return Err(Error::Domain(format!(
            "node {} has no training data for the Fisher",
            node.node_id
        )));
    }
    if batches == 0 || batch_size == 0 {
        return Err(Error::Domain("Fisher estimation needs at least one sample".into()));
    }
    let mut fisher = vec![0.0; model.param_count()];
    let mut label_rng = stream.child("labels").rng();
    let mut samples = 0usize;
    for b in 0..batches {
        let (x, y) = sample_minibatch(node, batch_size, &stream.child(format!("batch-{b}")))?;
        let probs = predict_proba(model, &x)?;
        for (r, &label) in y.iter().enumerate() {
            let row = x.select_rows(&[r]);
            let p = probs.row(r);
            let weighted: Vec<(usize, f64)> = match mode {
                FisherMode::Empirical => vec![(label, 1.0)],
                FisherMode::Sampled => vec![(sample_class(p, &mut label_rng), 1.0)],
                FisherMode::Expected => p.iter().copied().enumerate().filter(|(_, w)| *w > 0.0).collect(),
            };
            for (class, w) in weighted {
                let (_, g) = loss_and_grads(model, &row, &[class], None)?;
                for (f, gi) in fisher.iter_mut().zip(g) {
                    *f += w * gi * gi;
                }
            }
            samples += 1;
        }
    }
    let n = samples as f64;
    fisher.iter_mut().for_each(|f| *f /= n);
    Ok(fisher)
}

fn sample_class<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    probs.len() - 1
}

/// `(λ/2) Σ_anchors Σ_i F_i (θ_i − θ*_i)²` and its gradient.
pub fn ewc_penalty(model: &Model, state: &EwcState) -> Result<(f64, Vec<f64>)> {
    let theta = model.flat_params();
    let lambda = state.lambda();
    let mut penalty = 0.0;
    let mut grads = vec![0.0; theta.len()];
    for anchor in &state.anchors {
        if anchor.theta_star.len() != theta.len() || anchor.fisher.len() != theta.len() {
            return Err(Error::Shape(format!(
                "anchor for node {} has {} parameters, model has {}",
                anchor.source_node,
                anchor.theta_star.len(),
                theta.len()
            )));
        }
        for i in 0..theta.len() {
            let d = theta[i] - anchor.theta_star[i];
            penalty += anchor.fisher[i] * d * d;
            grads[i] += lambda * anchor.fisher[i] * d;
        }
    }
    Ok((0.5 * lambda * penalty, grads))
}

/// Stores the current parameters and a fresh Fisher estimate for `node`,
/// replacing any earlier anchor from the same node.
pub fn consolidate(state: &EwcState, model: &Model, node: &DataNode, stream: &RngStream) -> Result<EwcState> {
    let fisher = estimate_fisher(
        model,
        node,
        state.config.fisher_batches,
        state.config.fisher_batch_size,
        state.config.fisher_mode,
        stream,
    )?;
    let anchor = Anchor {
        theta_star: model.flat_params(),
        fisher,
        source_node: node.node_id,
    };
    let mut next = state.clone();
    match next.anchors.iter_mut().find(|a| a.source_node == node.node_id) {
        Some(slot) => *slot = anchor,
        None => next.anchors.push(anchor),
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Activation, AidParams, ModelConfig};
    use crate::numerics::Matrix;
    use crate::tasks::LabeledDataset;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            input_dim: 1,
            hidden_dims: vec![1],
            num_classes: 1,
            activation: Activation::Relu,
            aid: Some(AidParams::default()),
        };
        Model::zeros(cfg).unwrap()
    }

    fn node_from(features: Matrix, labels: Vec<usize>, classes: usize, id: NodeId) -> DataNode {
        let train = LabeledDataset::new(features, labels, classes).unwrap();
        DataNode {
            node_id: id,
            class_set: train.classes_present(),
            test_sub: train.subset(&[]),
            train_indices: (0..train.len()).collect(),
            train_sub: train,
            domain_tag: None,
            test_indices: vec![],
        }
    }

    #[test]
    fn penalty_arithmetic() {
        // flat layout: w1, b1, w2, b2
        let mut model = tiny_model();
        model.set_flat_params(&[1.0, 1.0, 0.0, 0.0]).unwrap();
        let state = EwcState {
            anchors: vec![Anchor {
                theta_star: vec![0.0, 0.0, 0.0, 0.0],
                fisher: vec![1.0, 2.0, 0.0, 0.0],
                source_node: 1,
            }],
            config: EwcConfig {
                lambda: 2.0,
                ..EwcConfig::default()
            },
        };
        let (p, g) = ewc_penalty(&model, &state).unwrap();
        assert_eq!(p, 3.0);
        assert_eq!(g, vec![2.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn penalty_zero_at_anchor() {
        let mut model = tiny_model();
        model.set_flat_params(&[0.3, -0.2, 1.1, 0.4]).unwrap();
        let state = EwcState {
            anchors: vec![Anchor {
                theta_star: model.flat_params(),
                fisher: vec![5.0; 4],
                source_node: 2,
            }],
            config: EwcConfig::default(),
        };
        let (p, g) = ewc_penalty(&model, &state).unwrap();
        assert_eq!(p, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn penalty_shape_mismatch() {
        let state = EwcState {
            anchors: vec![Anchor {
                theta_star: vec![0.0; 3],
                fisher: vec![0.0; 3],
                source_node: 1,
            }],
            config: EwcConfig::default(),
        };
        assert!(matches!(ewc_penalty(&tiny_model(), &state), Err(Error::Shape(_))));
    }

    #[test]
    fn consolidate_replaces_per_node() {
        let mut cfg = ModelConfig {
            input_dim: 2,
            hidden_dims: vec![3],
            num_classes: 2,
            ..ModelConfig::default()
        };
        cfg.aid = None;
        let model = Model::init(cfg, &RngStream::new(1, 0, 0, "init")).unwrap();
        let node3 = node_from(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(), vec![0, 1], 2, 3);
        let node5 = node_from(Matrix::from_rows(&[[1.0, 1.0], [0.5, 1.0]]).unwrap(), vec![1, 1], 2, 5);
        let s = RngStream::new(1, 0, 3, "fisher");
        let state = EwcState::new(EwcConfig::default());
        let one = consolidate(&state, &model, &node3, &s).unwrap();
        assert_eq!(one.anchors.len(), 1);
        let two = consolidate(&one, &model, &node5, &s).unwrap();
        assert_eq!(two.anchors.len(), 2);
        let moved = crate::neural::sgd_step(&model, &vec![1.0; model.param_count()], 0.1).unwrap();
        let again = consolidate(&two, &moved, &node3, &s).unwrap();
        assert_eq!(again.anchors.len(), 2);
        assert_eq!(again.anchor_for(3).unwrap().theta_star, moved.flat_params());
        assert!(again.anchors.iter().all(|a| a.fisher.iter().all(|&f| f >= 0.0)));
    }

    #[test]
    fn empty_node_fisher_is_an_error() {
        let node = node_from(Matrix::zeros(0, 1), vec![], 1, 1);
        let s = RngStream::new(0, 0, 1, "fisher");
        assert!(matches!(
            estimate_fisher(&tiny_model(), &node, 1, 1, FisherMode::Sampled, &s),
            Err(Error::Domain(_))
        ));
    }
}
