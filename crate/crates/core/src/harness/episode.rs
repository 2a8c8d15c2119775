use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::neural::Model;
use crate::numerics::RngStream;
use crate::regularizers::EwcState;
use crate::scoring::{score_all_nodes, Execution, ScoreSet};
use crate::sequencer::{oracle_search, select_next, Objective, PolicyKind, SequenceEnv, SequenceState};
use crate::tasks::NodeId;

use super::compute_forgetting;
use super::config::RunConfig;
use super::env::{build_world, EnvState, TrainingEnv, World};

/// Telescoping tolerance on Σ ΔM.
const TELESCOPE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub selected_node: NodeId,
    pub scores: ScoreSet,
    pub train_loss: f64,
    pub global_acc: f64,
    pub per_node_acc: BTreeMap<NodeId, f64>,
    pub delta_m: f64,
    pub forgetting: BTreeMap<NodeId, f64>,
    pub min_forgetting: Option<f64>,
    pub constraint_ok: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunLog {
    pub label: String,
    pub policy: String,
    pub seed: u64,
    pub fingerprint: String,
    pub epsilon: f64,
    pub initial_global_acc: f64,
    pub node_ids: Vec<NodeId>,
    pub steps: Vec<StepRecord>,
    /// Set when the run stopped early on a numeric failure.
    pub failure: Option<String>,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub final_model: Model,
    #[serde(skip)]
    pub final_ewc: Option<EwcState>,
}

impl RunLog {
    pub fn final_global_acc(&self) -> f64 {
        self.steps.last().map_or(self.initial_global_acc, |s| s.global_acc)
    }

    /// Global accuracy after 0, 1, …, T visits.
    pub fn accuracy_curve(&self) -> Vec<f64> {
        std::iter::once(self.initial_global_acc)
            .chain(self.steps.iter().map(|s| s.global_acc))
            .collect()
    }

    pub fn sequence(&self) -> Vec<NodeId> {
        self.steps.iter().map(|s| s.selected_node).collect()
    }

    pub fn visit_histogram(&self) -> BTreeMap<NodeId, usize> {
        let mut h: BTreeMap<NodeId, usize> = self.node_ids.iter().map(|&n| (n, 0)).collect();
        for s in &self.steps {
            *h.entry(s.selected_node).or_insert(0) += 1;
        }
        h
    }

    /// `|Σ ΔM − (M_T − M_0)|`.
    pub fn telescoping_gap(&self) -> f64 {
        let sum: f64 = self.steps.iter().map(|s| s.delta_m).sum();
        (sum - (self.final_global_acc() - self.initial_global_acc)).abs()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Step table; floats are printed with 17 significant digits so parsing
    /// recovers them exactly.
    pub fn write_steps_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "step",
            "policy",
            "seed",
            "selected_node",
            "train_loss",
            "global_acc",
            "delta_m",
            "min_forgetting",
            "constraint_ok",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(self.node_ids.iter().map(|n| format!("acc_node_{n}")));
        header.extend(self.node_ids.iter().map(|n| format!("score_node_{n}")));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for s in &self.steps {
            let mut rec = vec![
                s.step.to_string(),
                self.policy.clone(),
                self.seed.to_string(),
                s.selected_node.to_string(),
                fmt_f64(s.train_loss),
                fmt_f64(s.global_acc),
                fmt_f64(s.delta_m),
                opt(s.min_forgetting),
                s.constraint_ok.to_string(),
            ];
            rec.extend(self.node_ids.iter().map(|n| opt(s.per_node_acc.get(n).copied())));
            rec.extend(self.node_ids.iter().map(|n| opt(s.scores.get(*n))));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn steps_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_steps_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::State(e.to_string()))
    }

    pub fn save_steps_csv(&self, path: &Path) -> Result<()> {
        self.write_steps_csv(std::fs::File::create(path)?)
    }

    /// The numeric content of the step table, as [`parse_steps_csv`] reads it.
    pub fn csv_steps(&self) -> Vec<CsvStep> {
        self.steps
            .iter()
            .map(|s| CsvStep {
                step: s.step,
                policy: self.policy.clone(),
                seed: self.seed,
                selected_node: s.selected_node,
                train_loss: s.train_loss,
                global_acc: s.global_acc,
                delta_m: s.delta_m,
                min_forgetting: s.min_forgetting,
                constraint_ok: s.constraint_ok,
                node_acc: s.per_node_acc.clone(),
                scores: s.scores.scores.clone(),
            })
            .collect()
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One parsed row of a step table.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvStep {
    pub step: usize,
    pub policy: String,
    pub seed: u64,
    pub selected_node: NodeId,
    pub train_loss: f64,
    pub global_acc: f64,
    pub delta_m: f64,
    pub min_forgetting: Option<f64>,
    pub constraint_ok: bool,
    pub node_acc: BTreeMap<NodeId, f64>,
    pub scores: BTreeMap<NodeId, f64>,
}

pub fn parse_steps_csv<R: Read>(input: R) -> Result<Vec<CsvStep>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let bad = |what: &str| Error::Config(format!("malformed step table: {what}"));
    let num = |s: &str| -> Result<f64> { s.parse::<f64>().map_err(|_| bad(s)) };
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| bad("short row"));
        let mut node_acc = BTreeMap::new();
        let mut scores = BTreeMap::new();
        for (i, name) in header.iter().enumerate().skip(9) {
            let (map, id) = if let Some(id) = name.strip_prefix("acc_node_") {
                (&mut node_acc, id)
            } else if let Some(id) = name.strip_prefix("score_node_") {
                (&mut scores, id)
            } else {
                return Err(bad(name));
            };
            let id: NodeId = id.parse().map_err(|_| bad(name))?;
            if let Some(v) = opt(field(i)?)? {
                map.insert(id, v);
            }
        }
        rows.push(CsvStep {
            step: field(0)?.parse().map_err(|_| bad("step"))?,
            policy: field(1)?.to_string(),
            seed: field(2)?.parse().map_err(|_| bad("seed"))?,
            selected_node: field(3)?.parse().map_err(|_| bad("selected_node"))?,
            train_loss: num(field(4)?)?,
            global_acc: num(field(5)?)?,
            delta_m: num(field(6)?)?,
            min_forgetting: opt(field(7)?)?,
            constraint_ok: field(8)?.parse().map_err(|_| bad("constraint_ok"))?,
            node_acc,
            scores,
        });
    }
    Ok(rows)
}

/// Builds the world for `config` and runs one episode on it.
pub fn run_episode(config: &RunConfig) -> Result<RunLog> {
    let world = Arc::new(build_world(config)?);
    run_on_world(config, world)
}

/// Runs one episode on a prebuilt world. The world's initial parameters are
/// used as-is; only the activation settings are taken from `config`.
pub fn run_on_world(config: &RunConfig, world: Arc<World>) -> Result<RunLog> {
    config.validate()?;
    let started = Instant::now();
    let env = TrainingEnv::new(world.clone(), config.training(), config.seed);
    let mut initial = world.initial_model.clone();
    let wanted = config.model_config();
    if initial.config.layer_shapes() != wanted.layer_shapes() {
        return Err(Error::Config("world model shape does not match the run config".into()));
    }
    initial.config = wanted;

    let plan = match config.policy.kind {
        PolicyKind::Oracle => {
            let table = oracle_search(
                &env,
                config.horizon,
                config.policy.candidate_rule,
                Objective::FinalGlobalAcc,
                config.epsilon,
                config.oracle_cap,
            )?;
            let best = table
                .best(Objective::FinalGlobalAcc, true)
                .or_else(|| table.best(Objective::FinalGlobalAcc, false))
                .ok_or_else(|| Error::State("oracle table is empty".into()))?;
            Some(best.sequence.clone())
        }
        _ => None,
    };

    let mut state = env.state_from(initial);
    let mut eval = env.evaluate(&state)?;
    let node_ids = env.node_ids();
    let mut log = RunLog {
        label: config.label(),
        policy: config.policy.kind.name().to_string(),
        seed: config.seed,
        fingerprint: config.fingerprint(),
        epsilon: config.epsilon,
        initial_global_acc: eval.global_acc,
        node_ids: node_ids.clone(),
        steps: Vec::with_capacity(config.horizon),
        failure: None,
        wall_clock_secs: 0.0,
        final_model: state.model.clone(),
        final_ewc: state.ewc.clone(),
    };
    let mut seq = SequenceState::new(node_ids, config.epsilon);

    for t in 1..=config.horizon {
        let outcome = step_once(config, &env, &state, &mut seq, plan.as_deref(), t);
        let (scores, node, next) = match outcome {
            Ok(v) => v,
            Err(e @ (Error::Numeric(_) | Error::Singular { .. })) => {
                log.failure = Some(format!("step {t}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let next_eval = env.evaluate(&next)?;
        let distinct: Vec<NodeId> = seq
            .visited
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|n| eval.node_acc.contains_key(n))
            .collect();
        let forgetting = compute_forgetting(&eval.node_acc, &next_eval.node_acc, &distinct, config.epsilon)?;
        let per_node_acc = if config.full_eval {
            next_eval.node_acc.clone()
        } else {
            next_eval
                .node_acc
                .iter()
                .filter(|(n, _)| distinct.contains(n) || **n == node)
                .map(|(&n, &a)| (n, a))
                .collect()
        };
        log.steps.push(StepRecord {
            step: t,
            selected_node: node,
            scores,
            train_loss: next.last_loss,
            global_acc: next_eval.global_acc,
            per_node_acc,
            delta_m: next_eval.global_acc - eval.global_acc,
            forgetting: forgetting.per_node.clone(),
            min_forgetting: forgetting.min,
            constraint_ok: forgetting.ok,
        });
        seq.record_visit(node, forgetting.per_node);
        state = next;
        eval = next_eval;
    }

    if log.telescoping_gap() > TELESCOPE_TOL {
        return Err(Error::State(format!(
            "ΔM does not telescope (gap {})",
            log.telescoping_gap()
        )));
    }
    log.final_model = state.model;
    log.final_ewc = state.ewc;
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

fn step_once(
    config: &RunConfig,
    env: &TrainingEnv,
    state: &EnvState,
    seq: &mut SequenceState,
    plan: Option<&[NodeId]>,
    t: usize,
) -> Result<(ScoreSet, NodeId, EnvState)> {
    let scores = score_all_nodes(
        &state.model,
        &env.world.partition.nodes,
        &config.scoring,
        t,
        config.seed,
        Execution::Parallel,
    )?;
    seq.push_scores(scores.clone());
    let node = match plan {
        Some(p) => p[t - 1],
        None => select_next(seq, &config.policy, &RngStream::new(config.seed, t as u64, 0, "select"))?,
    };
    let next = env.visit(state, t, node)?;
    Ok((scores, node, next))
}
