use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::neural::{evaluate, train_epoch, Model};
use crate::numerics::RngStream;
use crate::regularizers::{consolidate, EwcState};
use crate::sequencer::{Evaluation, SequenceEnv};
use crate::tasks::{generate_global, partition, LabeledDataset, NodeId, Partition};

use super::config::{RunConfig, TrainingParams};

/// Data and starting point shared by every run on one seed.
#[derive(Clone, Debug)]
pub struct World {
    pub global: LabeledDataset,
    pub partition: Partition,
    pub initial_model: Model,
}

pub fn build_world(config: &RunConfig) -> Result<World> {
    config.validate()?;
    let global = generate_global(&config.data, config.data_seed())?;
    let partition = partition(&global, &config.effective_partition())?;
    let initial_model = Model::init(config.model_config(), &RngStream::new(config.seed, 0, 0, "init"))?;
    Ok(World {
        global,
        partition,
        initial_model,
    })
}

#[derive(Clone, Debug)]
pub struct EnvState {
    pub model: Model,
    pub ewc: Option<EwcState>,
    pub last_loss: f64,
}

/// Deterministic visit/evaluate environment over a [`World`].
#[derive(Clone, Debug)]
pub struct TrainingEnv {
    pub world: Arc<World>,
    pub params: TrainingParams,
    pub root_seed: u64,
}

impl TrainingEnv {
    pub fn new(world: Arc<World>, params: TrainingParams, root_seed: u64) -> Self {
        Self {
            world,
            params,
            root_seed,
        }
    }

    pub fn state_from(&self, model: Model) -> EnvState {
        EnvState {
            model,
            ewc: self.params.ewc.map(EwcState::new),
            last_loss: f64::NAN,
        }
    }
}

impl SequenceEnv for TrainingEnv {
    type State = EnvState;

    fn node_ids(&self) -> Vec<NodeId> {
        self.world.partition.node_ids()
    }

    fn initial_state(&self) -> Result<EnvState> {
        Ok(self.state_from(self.world.initial_model.clone()))
    }

    fn visit(&self, state: &EnvState, step: usize, node: NodeId) -> Result<EnvState> {
        let data = self
            .world
            .partition
            .node(node)
            .ok_or_else(|| Error::State(format!("unknown node {node}")))?;
        let stream = RngStream::new(self.root_seed, step as u64, node as u64, "train");
        let mut model = state.model.clone();
        let mut loss = f64::NAN;
        for e in 0..self.params.epochs_per_visit {
            let (next, l) = train_epoch(
                &model,
                &data.train_sub,
                self.params.train_batch_size,
                self.params.learning_rate,
                state.ewc.as_ref(),
                &stream.child(e),
            )?;
            model = next;
            loss = l;
        }
        if !model.is_finite() {
            return Err(Error::Numeric(format!(
                "parameters diverged while training on node {node}"
            )));
        }
        let ewc = match &state.ewc {
            Some(ewc) => Some(consolidate(
                ewc,
                &model,
                data,
                &RngStream::new(self.root_seed, step as u64, node as u64, "fisher"),
            )?),
            None => None,
        };
        Ok(EnvState {
            model,
            ewc,
            last_loss: loss,
        })
    }

    /// Global accuracy on the centralized test set plus every node's test
    /// accuracy (nodes with an empty test split are left out).
    fn evaluate(&self, state: &EnvState) -> Result<Evaluation> {
        let global_acc = evaluate(&state.model, &self.world.partition.global_test)?;
        let mut node_acc = BTreeMap::new();
        for node in &self.world.partition.nodes {
            if !node.test_sub.is_empty() {
                node_acc.insert(node.node_id, evaluate(&state.model, &node.test_sub)?);
            }
        }
        Ok(Evaluation { global_acc, node_acc })
    }
}
