use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::neural::{Activation, AidParams, ModelConfig};
use crate::regularizers::EwcConfig;
use crate::scoring::ScoringConfig;
use crate::sequencer::{Policy, PolicyKind, DEFAULT_ORACLE_CAP};
use crate::tasks::{DataConfig, PartitionMode, PartitionSpec};

/// Hidden architecture; input and output widths come from the data section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_aid")]
    pub aid: Option<AidParams>,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_aid() -> Option<AidParams> {
    Some(AidParams::default())
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dims: default_hidden(),
            activation: default_activation(),
            aid: default_aid(),
        }
    }
}

/// Everything one episode needs. Mirrors the TOML config file key for key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub label: Option<String>,
    pub seed: u64,
    /// Seed for the global dataset; defaults to `seed`.
    #[serde(default)]
    pub data_seed: Option<u64>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_partition")]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub model: ModelSection,
    pub horizon: usize,
    #[serde(default = "default_epochs")]
    pub epochs_per_visit: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_train_batch")]
    pub train_batch_size: usize,
    pub policy: Policy,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub ewc: Option<EwcConfig>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Evaluate every node's test split after each visit, not only visited ones.
    #[serde(default = "default_true")]
    pub full_eval: bool,
    #[serde(default = "default_cap")]
    pub oracle_cap: u128,
}

fn default_partition() -> PartitionSpec {
    PartitionSpec::new(PartitionMode::Iid, 4)
}

fn default_epochs() -> usize {
    1
}

fn default_lr() -> f64 {
    0.05
}

fn default_train_batch() -> usize {
    32
}

fn default_epsilon() -> f64 {
    -0.05
}

fn default_true() -> bool {
    true
}

fn default_cap() -> u128 {
    DEFAULT_ORACLE_CAP
}

/// Knobs of a single node visit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingParams {
    pub epochs_per_visit: usize,
    pub learning_rate: f64,
    pub train_batch_size: usize,
    pub ewc: Option<EwcConfig>,
}

impl RunConfig {
    pub fn new(policy: Policy, horizon: usize, seed: u64) -> Self {
        Self {
            label: None,
            seed,
            data_seed: None,
            data: DataConfig::default(),
            partition: default_partition(),
            model: ModelSection::default(),
            horizon,
            epochs_per_visit: default_epochs(),
            learning_rate: default_lr(),
            train_batch_size: default_train_batch(),
            policy,
            scoring: ScoringConfig::default(),
            ewc: None,
            epsilon: default_epsilon(),
            full_eval: true,
            oracle_cap: default_cap(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.policy.kind.name().to_string())
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    /// Partition spec with its seed filled in from the data seed when unset.
    pub fn effective_partition(&self) -> PartitionSpec {
        let mut spec = self.partition.clone();
        if spec.seed.is_none() {
            spec.seed = Some(self.data_seed() ^ 0x9e37_79b9_7f4a_7c15);
        }
        spec
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.data.input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            num_classes: self.data.class_count,
            activation: self.model.activation,
            aid: self.model.aid,
        }
    }

    pub fn training(&self) -> TrainingParams {
        TrainingParams {
            epochs_per_visit: self.epochs_per_visit,
            learning_rate: self.learning_rate,
            train_batch_size: self.train_batch_size,
            ewc: self.ewc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs_per_visit == 0 || self.train_batch_size == 0 {
            return Err(Error::Config(
                "epochs_per_visit and train_batch_size must be >= 1".into(),
            ));
        }
        if !(self.epsilon < 0.0) {
            return Err(Error::Config(format!("epsilon must be < 0, got {}", self.epsilon)));
        }
        if self.scoring.minibatch_size < 2 {
            return Err(Error::Config("scoring.minibatch_size must be >= 2".into()));
        }
        if !(self.scoring.jitter >= 0.0) {
            return Err(Error::Config("scoring.jitter must be >= 0".into()));
        }
        self.data.validate()?;
        self.partition.validate(self.data.class_count)?;
        self.model_config().validate()?;
        if self.scoring.variant == crate::scoring::ScoreVariant::Aid && self.model.aid.is_none() {
            return Err(Error::Config("aid scoring needs model.aid parameters".into()));
        }
        if let Some(ewc) = &self.ewc {
            ewc.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fields that must agree for two runs to be paired on one seed.
    pub(crate) fn pairing_key(&self) -> PairingKey {
        let mut model = self.model.clone();
        // training always uses ReLU; AID only enters through scoring
        model.activation = Activation::Relu;
        model.aid = None;
        PairingKey {
            data_seed: self.data_seed(),
            data: self.data.clone(),
            partition: self.effective_partition(),
            model,
            horizon: self.horizon,
            epochs_per_visit: self.epochs_per_visit,
            learning_rate: self.learning_rate,
            train_batch_size: self.train_batch_size,
            epsilon: self.epsilon,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct PairingKey {
    data_seed: u64,
    data: DataConfig,
    partition: PartitionSpec,
    model: ModelSection,
    horizon: usize,
    epochs_per_visit: usize,
    learning_rate: f64,
    train_batch_size: usize,
    epsilon: f64,
    seed: u64,
}

/// One arm of a sweep: a base config with policy-level overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub label: String,
    pub policy: Policy,
    #[serde(default)]
    pub scoring: Option<ScoringConfig>,
    #[serde(default)]
    pub ewc: Option<EwcConfig>,
    /// Turn off an EWC section inherited from the base config.
    #[serde(default)]
    pub disable_ewc: bool,
}

/// Sweep file: a base run config, a list of arms and a list of seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    pub base: RunConfig,
    pub arms: Vec<Arm>,
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SweepConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.seeds.is_empty() || cfg.arms.is_empty() {
            return Err(Error::Config("a sweep needs at least one seed and one arm".into()));
        }
        for cfg in cfg.arm_configs() {
            cfg.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn arm_configs(&self) -> Vec<RunConfig> {
        self.arms
            .iter()
            .map(|arm| {
                let mut c = self.base.clone();
                c.label = Some(arm.label.clone());
                c.policy = arm.policy;
                if let Some(s) = arm.scoring {
                    c.scoring = s;
                }
                if arm.ewc.is_some() {
                    c.ewc = arm.ewc;
                }
                if arm.disable_ewc {
                    c.ewc = None;
                }
                if arm.policy.kind == PolicyKind::Oracle {
                    c.oracle_cap = self.base.oracle_cap;
                }
                c
            })
            .collect()
    }
}
