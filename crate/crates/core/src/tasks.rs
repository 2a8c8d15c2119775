//! Synthetic global dataset, its partition into data nodes and the
//! centralized test set assembled from every node's local test split.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, matmul, Matrix, RngStream};

/// Node identifiers run from 1 to N.
pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Domain(format!("label {bad} >= class count {class_count}")));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    pub fn classes_present(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    /// Row-wise concatenation. All parts must share input dim and class count.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<LabeledDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Domain("nothing to concatenate".into()))?;
        let cols = first.input_dim();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.input_dim() != cols || p.class_count != first.class_count {
                return Err(Error::Shape("datasets disagree on shape".into()));
            }
            data.extend_from_slice(p.features.as_slice());
            labels.extend_from_slice(&p.labels);
        }
        let rows = labels.len();
        LabeledDataset::new(Matrix::from_vec(rows, cols, data)?, labels, first.class_count)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            file,
            "# {DATASET_FORMAT} v{DATASET_VERSION} classes={}",
            self.class_count
        )?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.input_dim()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for (row, &y) in self.features.row_iter().zip(&self.labels) {
            let mut rec = vec![y.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.16e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let prefix = format!("# {DATASET_FORMAT} v{DATASET_VERSION} classes=");
        let class_count: usize = first
            .trim_end()
            .strip_prefix(&prefix)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config(format!("{} is not a v{DATASET_VERSION} dataset file", path.display())))?;
        let mut r = csv::Reader::from_reader(reader);
        let cols = r.headers()?.len().saturating_sub(1);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse_err = |s: &str| Error::Config(format!("bad number {s:?} in dataset"));
            labels.push(rec[0].parse::<usize>().map_err(|_| parse_err(&rec[0]))?);
            for field in rec.iter().skip(1) {
                data.push(field.parse::<f64>().map_err(|_| parse_err(field))?);
            }
        }
        LabeledDataset::new(Matrix::from_vec(labels.len(), cols, data)?, labels, class_count)
    }
}

const DATASET_FORMAT: &str = "nodeseq-dataset";
const DATASET_VERSION: u32 = 1;

/// Gaussian class blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "defaults::class_count")]
    pub class_count: usize,
    #[serde(default = "defaults::samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "defaults::input_dim")]
    pub input_dim: usize,
    /// Standard deviation of each class-mean coordinate.
    #[serde(default = "defaults::mean_scale")]
    pub mean_scale: f64,
    /// Within-class standard deviation (isotropic).
    #[serde(default = "defaults::noise_std")]
    pub noise_std: f64,
}

mod defaults {
    pub fn class_count() -> usize {
        20
    }
    pub fn samples_per_class() -> usize {
        200
    }
    pub fn input_dim() -> usize {
        16
    }
    pub fn mean_scale() -> f64 {
        1.0
    }
    pub fn noise_std() -> f64 {
        1.0
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            class_count: defaults::class_count(),
            samples_per_class: defaults::samples_per_class(),
            input_dim: defaults::input_dim(),
            mean_scale: defaults::mean_scale(),
            noise_std: defaults::noise_std(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.samples_per_class == 0 || self.input_dim == 0 {
            return Err(Error::Config("data counts must all be >= 1".into()));
        }
        if !(self.mean_scale >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("mean_scale and noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Balanced Gaussian blobs, rows grouped by class.
pub fn generate_global(config: &DataConfig, seed: u64) -> Result<LabeledDataset> {
    config.validate()?;
    let means = numerics::rand_normal(
        &RngStream::new(seed, 0, 0, "class-means"),
        config.class_count,
        config.input_dim,
        0.0,
        config.mean_scale,
    )?;
    let n = config.class_count * config.samples_per_class;
    let mut features = numerics::rand_normal(
        &RngStream::new(seed, 0, 0, "class-noise"),
        n,
        config.input_dim,
        0.0,
        config.noise_std,
    )?;
    let mut labels = Vec::with_capacity(n);
    for c in 0..config.class_count {
        for s in 0..config.samples_per_class {
            let r = c * config.samples_per_class + s;
            for (x, m) in features.row_mut(r).iter_mut().zip(means.row(c)) {
                *x += m;
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(features, labels, config.class_count)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    ClassNoniid,
    DomainNoniid,
}

/// Inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }
}

/// Feature-space shift applied to every sample of one node in domain mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainTransform {
    /// Apply a node-specific random orthogonal rotation.
    #[serde(default = "yes")]
    pub rotate: bool,
    /// Multiplier applied after rotation.
    #[serde(default = "one")]
    pub scale: f64,
    /// Standard deviation of the node-specific additive bias.
    #[serde(default = "one")]
    pub shift: f64,
    /// Fraction of coordinates forced to zero.
    #[serde(default)]
    pub sparsify: f64,
    #[serde(default)]
    pub tag: Option<String>,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

impl Default for DomainTransform {
    fn default() -> Self {
        Self {
            rotate: true,
            scale: 1.0,
            shift: 1.0,
            sparsify: 0.0,
            tag: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub n_nodes: usize,
    #[serde(default = "default_classes_per_node")]
    pub classes_per_node: CountRange,
    #[serde(default)]
    pub samples_per_node: Option<CountRange>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Per-node transforms for domain mode; nodes past the end of the list
    /// get [`DomainTransform::default`].
    #[serde(default)]
    pub domain_transforms: Vec<DomainTransform>,
    /// Partition seed. Left unset, the harness derives one from the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_classes_per_node() -> CountRange {
    CountRange::new(3, 6)
}

fn default_test_fraction() -> f64 {
    0.3
}

impl PartitionSpec {
    pub fn new(mode: PartitionMode, n_nodes: usize) -> Self {
        Self {
            mode,
            n_nodes,
            classes_per_node: default_classes_per_node(),
            samples_per_node: None,
            test_fraction: default_test_fraction(),
            domain_transforms: Vec::new(),
            seed: None,
        }
    }

    /// Checks feasibility against a dataset with `class_count` classes.
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(Error::Config("n_nodes must be >= 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie in (0,1), got {}",
                self.test_fraction
            )));
        }
        if let Some(r) = self.samples_per_node {
            if r.min > r.max {
                return Err(Error::Config(format!("samples_per_node min {} > max {}", r.min, r.max)));
            }
        }
        if self.mode == PartitionMode::ClassNoniid {
            let r = self.classes_per_node;
            if r.min == 0 || r.min > r.max {
                return Err(Error::Config(format!(
                    "classes_per_node must satisfy 1 <= min <= max, got [{}, {}]",
                    r.min, r.max
                )));
            }
            if self.n_nodes * r.min > class_count {
                return Err(Error::Config(format!(
                    "class_noniid needs n_nodes * classes_per_node.min <= class_count, got {} * {} > {}",
                    self.n_nodes, r.min, class_count
                )));
            }
        }
        for t in &self.domain_transforms {
            if !(0.0..=1.0).contains(&t.sparsify) || !t.scale.is_finite() || !(t.shift >= 0.0) {
                return Err(Error::Config("domain transform out of range".into()));
            }
        }
        Ok(())
    }

    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn transform_for(&self, node_id: NodeId) -> DomainTransform {
        self.domain_transforms.get(node_id - 1).cloned().unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataNode {
    pub node_id: NodeId,
    pub train_sub: LabeledDataset,
    pub test_sub: LabeledDataset,
    pub class_set: BTreeSet<usize>,
    pub domain_tag: Option<String>,
    /// Rows of the global dataset behind `train_sub`, in the same order.
    pub train_indices: Vec<usize>,
    /// Rows of the global dataset behind `test_sub`, in the same order.
    pub test_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub spec: PartitionSpec,
    pub nodes: Vec<DataNode>,
    pub global_test: LabeledDataset,
}

impl Partition {
    pub fn node(&self, id: NodeId) -> Option<&DataNode> {
        self.nodes.iter().find(|n| n.node_id == id)
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|n| n.node_id).collect()
    }

    pub fn manifest(&self) -> PartitionManifest {
        PartitionManifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            spec: self.spec.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeIndices {
                    node_id: n.node_id,
                    train_indices: n.train_indices.clone(),
                    test_indices: n.test_indices.clone(),
                })
                .collect(),
        }
    }
}

const MANIFEST_FORMAT: &str = "nodeseq-partition";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeIndices {
    pub node_id: NodeId,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// JSON partition file: the spec plus per-node index lists into the global
/// dataset file. Domain transforms are re-derived from `spec.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionManifest {
    pub format: String,
    pub version: u32,
    pub spec: PartitionSpec,
    pub nodes: Vec<NodeIndices>,
}

impl PartitionManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PartitionManifest> {
        let m: PartitionManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "unsupported partition file {} v{}",
                m.format, m.version
            )));
        }
        Ok(m)
    }

    /// Rebuilds the nodes and global test set against `global`.
    pub fn materialize(&self, global: &LabeledDataset) -> Result<Partition> {
        self.spec.validate(global.class_count)?;
        let n = global.len();
        let allocations = self
            .nodes
            .iter()
            .map(|ni| {
                if let Some(&bad) = ni.train_indices.iter().chain(&ni.test_indices).find(|&&i| i >= n) {
                    return Err(Error::Config(format!(
                        "node {} references row {bad} of {n}",
                        ni.node_id
                    )));
                }
                Ok((ni.node_id, ni.train_indices.clone(), ni.test_indices.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        build_partition(global, &self.spec, allocations)
    }
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian draw.
fn random_rotation(dim: usize, stream: &RngStream) -> Result<Matrix> {
    let g = numerics::rand_normal(stream, dim, dim, 0.0, 1.0)?;
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for i in 0..dim {
        let mut v = g.row(i).to_vec();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::Numeric("degenerate rotation draw".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    Matrix::from_rows(&q)
}

/// Applies the node's domain transform: `x ↦ mask ⊙ (scale · xR + b)`.
fn apply_transform(
    data: &LabeledDataset,
    transform: &DomainTransform,
    seed: u64,
    node_id: NodeId,
) -> Result<LabeledDataset> {
    let dim = data.input_dim();
    let stream = RngStream::new(seed, 0, node_id as u64, "domain-transform");
    let mut features = if transform.rotate {
        matmul(&data.features, &random_rotation(dim, &stream.child("rotation"))?)?
    } else {
        data.features.clone()
    };
    let bias = numerics::rand_normal(&stream.child("shift"), 1, dim, 0.0, transform.shift)?;
    let zeroed = (transform.sparsify * dim as f64).round() as usize;
    let mut coords: Vec<usize> = (0..dim).collect();
    coords.shuffle(&mut stream.child("sparsify").rng());
    let mut keep = vec![true; dim];
    for &c in &coords[..zeroed.min(dim)] {
        keep[c] = false;
    }
    for r in 0..features.rows() {
        for (j, x) in features.row_mut(r).iter_mut().enumerate() {
            *x = if keep[j] {
                transform.scale * *x + bias.as_slice()[j]
            } else {
                0.0
            };
        }
    }
    LabeledDataset::new(features, data.labels.clone(), data.class_count)
}

fn build_partition(
    global: &LabeledDataset,
    spec: &PartitionSpec,
    allocations: Vec<(NodeId, Vec<usize>, Vec<usize>)>,
) -> Result<Partition> {
    let mut nodes = Vec::with_capacity(allocations.len());
    for (node_id, train_idx, test_idx) in allocations {
        let mut train_sub = global.subset(&train_idx);
        let mut test_sub = global.subset(&test_idx);
        let mut domain_tag = None;
        if spec.mode == PartitionMode::DomainNoniid {
            let t = spec.transform_for(node_id);
            train_sub = apply_transform(&train_sub, &t, spec.effective_seed(), node_id)?;
            test_sub = apply_transform(&test_sub, &t, spec.effective_seed(), node_id)?;
            domain_tag = Some(t.tag.clone().unwrap_or_else(|| format!("domain-{node_id}")));
        }
        let class_set = train_sub
            .classes_present()
            .union(&test_sub.classes_present())
            .copied()
            .collect();
        nodes.push(DataNode {
            node_id,
            train_sub,
            test_sub,
            class_set,
            domain_tag,
            train_indices: train_idx,
            test_indices: test_idx,
        });
    }
    let parts: Vec<&LabeledDataset> = nodes.iter().map(|n| &n.test_sub).collect();
    let global_test = if parts.is_empty() {
        global.subset(&[])
    } else {
        LabeledDataset::concat(&parts)?
    };
    Ok(Partition {
        spec: spec.clone(),
        nodes,
        global_test,
    })
}

/// Splits `global` into `spec.n_nodes` data nodes plus the centralized test
/// set (the disjoint union of every node's test split).
pub fn partition(global: &LabeledDataset, spec: &PartitionSpec) -> Result<Partition> {
    spec.validate(global.class_count)?;
    let n = spec.n_nodes;
    let base = RngStream::new(spec.effective_seed(), 0, 0, "partition");
    let mut rng = base.child("assign").rng();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n];
    match spec.mode {
        PartitionMode::Iid | PartitionMode::DomainNoniid => {
            for i in 0..global.len() {
                pools[rng.random_range(0..n)].push(i);
            }
        }
        PartitionMode::ClassNoniid => {
            let mut classes: Vec<usize> = (0..global.class_count).collect();
            classes.shuffle(&mut rng);
            let r = spec.classes_per_node;
            let mut next = 0;
            let mut owner = vec![None; global.class_count];
            for (node, _) in pools.iter().enumerate() {
                let remaining_nodes = n - node - 1;
                let available = global.class_count - next;
                let hi = r.max.min(available - remaining_nodes * r.min);
                let k = rng.random_range(r.min..=hi);
                for &c in &classes[next..next + k] {
                    owner[c] = Some(node);
                }
                next += k;
            }
            for (i, &y) in global.labels.iter().enumerate() {
                if let Some(node) = owner[y] {
                    pools[node].push(i);
                }
            }
        }
    }

    let mut allocations = Vec::with_capacity(n);
    for (node, mut pool) in pools.into_iter().enumerate() {
        let node_id = node + 1;
        let mut node_rng = base.child(format!("split-{node_id}")).rng();
        pool.shuffle(&mut node_rng);
        if let Some(r) = spec.samples_per_node {
            let target = node_rng.random_range(r.min..=r.max);
            pool.truncate(target);
        }
        let n_test = if pool.len() >= 2 {
            ((spec.test_fraction * pool.len() as f64).round() as usize).clamp(1, pool.len() - 1)
        } else {
            0
        };
        let test: Vec<usize> = pool[..n_test].to_vec();
        let train: Vec<usize> = pool[n_test..].to_vec();
        allocations.push((node_id, train, test));
    }
    build_partition(global, spec, allocations)
}

/// Draws a minibatch from the node's training split: without replacement
/// when `size` fits, with replacement otherwise.
pub fn sample_minibatch(node: &DataNode, size: usize, stream: &RngStream) -> Result<(Matrix, Vec<usize>)> {
    let n = node.train_sub.len();
    if n == 0 {
        return Err(Error::Domain(format!("node {} has no training samples", node.node_id)));
    }
    let mut rng = stream.rng();
    let indices: Vec<usize> = if size <= n {
        rand::seq::index::sample(&mut rng, n, size).into_vec()
    } else {
        (0..size).map(|_| rng.random_range(0..n)).collect()
    };
    let batch = node.train_sub.subset(&indices);
    Ok((batch.features, batch.labels))
}
