//! Micro feed-forward classifier: ReLU or AID hidden activations, activation
//! capture, cross-entropy backprop and plain SGD.
//!
//! Parameters are exchanged as one flat `Vec<f64>` whose layout is, for each
//! layer in order, the weight matrix (`fan_in × fan_out`, row-major) followed
//! by the bias vector (`fan_out`). Gradients, Fisher diagonals and EWC anchors
//! all share this layout.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, keep, matmul, Matrix, RngStream};
use crate::regularizers::EwcState;
use crate::tasks::LabeledDataset;

/// Hidden-unit nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Aid,
}

/// How AID turns the interval drop probabilities into keep probabilities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AidMaskRule {
    /// Every interval keeps its entries with probability `1 - p`.
    #[default]
    IntervalDrop,
    /// Non-negative entries keep with probability `p2`, negative entries
    /// with `1 - p1`. Kept only for comparison runs.
    Asymmetric,
}

/// Interval dropout probabilities for `(-inf, 0)` and `[0, inf)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AidParams {
    /// Drop probability for negative pre-activations.
    pub p1: f64,
    /// Drop probability for non-negative pre-activations.
    pub p2: f64,
    #[serde(default)]
    pub mask_rule: AidMaskRule,
}

impl Default for AidParams {
    fn default() -> Self {
        Self {
            p1: 0.5,
            p2: 0.2,
            mask_rule: AidMaskRule::IntervalDrop,
        }
    }
}

impl AidParams {
    pub fn new(p1: f64, p2: f64) -> Self {
        Self {
            p1,
            p2,
            mask_rule: AidMaskRule::IntervalDrop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p1", self.p1), ("p2", self.p2)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Domain(format!("AID {name} must lie in [0,1], got {p}")));
            }
        }
        Ok(())
    }

    fn keep_probability(&self, x: f64) -> f64 {
        match (self.mask_rule, x < 0.0) {
            (AidMaskRule::IntervalDrop, true) => 1.0 - self.p1,
            (AidMaskRule::IntervalDrop, false) => 1.0 - self.p2,
            (AidMaskRule::Asymmetric, true) => 1.0 - self.p1,
            (AidMaskRule::Asymmetric, false) => self.p2,
        }
    }
}

/// Architecture of the classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_aid")]
    pub aid: Option<AidParams>,
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_aid() -> Option<AidParams> {
    Some(AidParams::default())
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dims: vec![64, 64],
            num_classes: 20,
            activation: Activation::Relu,
            aid: Some(AidParams::default()),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("model needs at least one hidden layer".into()));
        }
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("all layer widths must be >= 1".into()));
        }
        if let Some(aid) = &self.aid {
            aid.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.activation == Activation::Aid && self.aid.is_none() {
            return Err(Error::Config("aid activation requires aid parameters".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn total_hidden_units(&self) -> usize {
        self.hidden_dims.iter().sum()
    }
}

/// One dense layer, `out = input · weight + bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    pub step_count: u64,
}

/// Hidden-layer nonlinearity actually applied during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActivationMode {
    Relu,
    Aid(AidParams),
}

/// Output of [`forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub logits: Matrix,
    /// Hidden pre-activations, one per hidden layer. Empty unless captured.
    pub pre_activations: Vec<Matrix>,
    /// Hidden values after the nonlinearity. Empty unless captured.
    pub post_activations: Vec<Matrix>,
    pub captured: bool,
}

impl Model {
    /// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases.
    pub fn init(config: ModelConfig, stream: &RngStream) -> Result<Model> {
        config.validate()?;
        let mut rng = stream.rng();
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let std = (2.0 / fan_in as f64).sqrt();
                Ok(Layer {
                    weight: numerics::normal_matrix(&mut rng, fan_in, fan_out, 0.0, std)?,
                    bias: vec![0.0; fan_out],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            config,
            layers,
            step_count: 0,
        })
    }

    /// All-zero parameters.
    pub fn zeros(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Layer {
                weight: Matrix::zeros(i, o),
                bias: vec![0.0; o],
            })
            .collect();
        Ok(Model {
            config,
            layers,
            step_count: 0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let w = layer.weight.as_mut_slice();
            w.copy_from_slice(&params[offset..offset + w.len()]);
            offset += w.len();
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }

    pub fn with_flat_params(config: ModelConfig, params: &[f64]) -> Result<Model> {
        let mut model = Model::zeros(config)?;
        model.set_flat_params(params)?;
        Ok(model)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

fn affine(input: &Matrix, layer: &Layer) -> Result<Matrix> {
    let mut z = matmul(input, &layer.weight)?;
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(z)
}

fn relu(pre: &Matrix) -> Matrix {
    pre.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn aid_with_rng<R: Rng + ?Sized>(pre: &Matrix, params: &AidParams, rng: &mut R) -> Matrix {
    let mut out = pre.clone();
    for v in out.as_mut_slice() {
        if !keep(rng, params.keep_probability(*v)) {
            *v = 0.0;
        }
    }
    out
}

/// Activation interval dropout: each entry is kept unscaled or set to zero,
/// with its keep probability chosen by the interval it falls in.
pub fn aid_activate(pre: &Matrix, p1: f64, p2: f64, stream: &RngStream) -> Result<Matrix> {
    let params = AidParams::new(p1, p2);
    params.validate()?;
    Ok(aid_with_rng(pre, &params, &mut stream.rng()))
}

/// Forward pass using the model's configured activation.
pub fn forward(
    model: &Model,
    batch_x: &Matrix,
    capture: bool,
    mask_stream: Option<&RngStream>,
) -> Result<ForwardTrace> {
    let mode = match model.config.activation {
        Activation::Relu => ActivationMode::Relu,
        Activation::Aid => ActivationMode::Aid(
            model
                .config
                .aid
                .ok_or_else(|| Error::Config("aid activation without aid parameters".into()))?,
        ),
    };
    forward_with(model, batch_x, mode, capture, mask_stream)
}

/// Forward pass with an explicit hidden activation. AID masks for all hidden
/// layers are drawn, layer by layer in row-major order, from one generator
/// seeded by `mask_stream`.
pub fn forward_with(
    model: &Model,
    batch_x: &Matrix,
    mode: ActivationMode,
    capture: bool,
    mask_stream: Option<&RngStream>,
) -> Result<ForwardTrace> {
    if batch_x.cols() != model.config.input_dim {
        return Err(Error::Shape(format!(
            "batch has {} features, model expects {}",
            batch_x.cols(),
            model.config.input_dim
        )));
    }
    let mut mask_rng = match mode {
        ActivationMode::Relu => None,
        ActivationMode::Aid(params) => {
            params.validate()?;
            let stream = mask_stream.ok_or_else(|| Error::Config("aid activation requires a mask stream".into()))?;
            Some(stream.rng())
        }
    };
    let hidden = model.layers.len() - 1;
    let mut pre_acts = Vec::new();
    let mut post_acts = Vec::new();
    let mut h = batch_x.clone();
    for layer in &model.layers[..hidden] {
        let z = affine(&h, layer)?;
        let a = match (mode, mask_rng.as_mut()) {
            (ActivationMode::Aid(params), Some(rng)) => aid_with_rng(&z, &params, rng),
            _ => relu(&z),
        };
        if capture {
            pre_acts.push(z);
            post_acts.push(a.clone());
        }
        h = a;
    }
    let logits = affine(&h, &model.layers[hidden])?;
    Ok(ForwardTrace {
        logits,
        pre_activations: pre_acts,
        post_activations: post_acts,
        captured: capture,
    })
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} samples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Domain(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Row-wise softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Class probabilities under the ReLU network.
pub fn predict_proba(model: &Model, x: &Matrix) -> Result<Matrix> {
    Ok(softmax(
        &forward_with(model, x, ActivationMode::Relu, false, None)?.logits,
    ))
}

/// Mean cross-entropy of a ReLU forward pass and its flat gradient, plus the
/// EWC penalty when a state is attached.
pub fn loss_and_grads(
    model: &Model,
    batch_x: &Matrix,
    batch_y: &[usize],
    regularizer: Option<&EwcState>,
) -> Result<(f64, Vec<f64>)> {
    check_labels(batch_y, batch_x.rows(), model.config.num_classes)?;
    if batch_x.rows() == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    let trace = forward_with(model, batch_x, ActivationMode::Relu, true, None)?;
    let n = batch_x.rows() as f64;

    // cross-entropy via log-sum-exp; dlogits = (softmax - onehot) / n
    let mut loss = 0.0;
    let mut delta = trace.logits.clone();
    for (r, &y) in batch_y.iter().enumerate() {
        let row = delta.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss -= row[y] - lse;
        for v in row.iter_mut() {
            *v = (*v - lse).exp() / n;
        }
        row[y] -= 1.0 / n;
    }
    loss /= n;

    let mut layer_grads: Vec<(Matrix, Vec<f64>)> = Vec::with_capacity(model.layers.len());
    for l in (0..model.layers.len()).rev() {
        let input = if l == 0 {
            batch_x
        } else {
            &trace.post_activations[l - 1]
        };
        let grad_w = matmul(&input.transpose(), &delta)?;
        let mut grad_b = vec![0.0; delta.cols()];
        for row in delta.row_iter() {
            for (g, d) in grad_b.iter_mut().zip(row) {
                *g += d;
            }
        }
        if l > 0 {
            let mut back = matmul(&delta, &model.layers[l].weight.transpose())?;
            let pre = &trace.pre_activations[l - 1];
            for (b, &z) in back.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                if z <= 0.0 {
                    *b = 0.0;
                }
            }
            delta = back;
        }
        layer_grads.push((grad_w, grad_b));
    }
    layer_grads.reverse();
    let mut grads = Vec::with_capacity(model.param_count());
    for (w, b) in layer_grads {
        grads.extend_from_slice(w.as_slice());
        grads.extend_from_slice(&b);
    }

    if let Some(state) = regularizer {
        let (penalty, penalty_grads) = crate::regularizers::ewc_penalty(model, state)?;
        loss += penalty;
        for (g, p) in grads.iter_mut().zip(penalty_grads) {
            *g += p;
        }
    }
    Ok((loss, grads))
}

/// `θ ← θ − lr·g` and `step_count += 1`.
pub fn sgd_step(model: &Model, grads: &[f64], learning_rate: f64) -> Result<Model> {
    if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
        return Err(Error::Domain(format!(
            "learning rate must be >= 0, got {learning_rate}"
        )));
    }
    if grads.len() != model.param_count() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, model has {} parameters",
            grads.len(),
            model.param_count()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at parameter {i}")));
    }
    let params: Vec<f64> = model
        .flat_params()
        .iter()
        .zip(grads)
        .map(|(p, g)| p - learning_rate * g)
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("parameters diverged".into()));
    }
    let mut next = model.clone();
    next.set_flat_params(&params)?;
    next.step_count += 1;
    Ok(next)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate(model: &Model, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Domain("cannot evaluate on an empty dataset".into()));
    }
    let logits = forward_with(model, &dataset.features, ActivationMode::Relu, false, None)?.logits;
    let correct = logits
        .row_iter()
        .zip(&dataset.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// One pass over `data` in shuffled minibatches. Returns the updated model and
/// the mean minibatch loss.
pub fn train_epoch(
    model: &Model,
    data: &LabeledDataset,
    batch_size: usize,
    learning_rate: f64,
    regularizer: Option<&EwcState>,
    stream: &RngStream,
) -> Result<(Model, f64)> {
    if data.is_empty() {
        return Err(Error::Domain("cannot train on an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("train batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut stream.rng());
    let mut current = model.clone();
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size) {
        let x = data.features.select_rows(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let (loss, grads) = loss_and_grads(&current, &x, &y, regularizer)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss}")));
        }
        current = sgd_step(&current, &grads, learning_rate)?;
        total += loss;
        batches += 1;
    }
    Ok((current, total / batches as f64))
}

const CHECKPOINT_FORMAT: &str = "nodeseq-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model record. Field order: `format`, `version`, `config`,
/// `step_count`, `params` (flat layout described in the module docs).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub step_count: u64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            step_count: model.step_count,
            params: model.flat_params(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = Model::with_flat_params(self.config, &self.params)?;
        model.step_count = self.step_count;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
