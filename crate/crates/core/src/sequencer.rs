//! Next-node selection: candidate sets, the sequencing policies and an
//! exhaustive oracle for tiny instances.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::compute_forgetting;
use crate::numerics::RngStream;
use crate::scoring::{argmax_over, ScoreSet};
use crate::tasks::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    GreedyNwot,
    Rotation,
    Scheduled,
    RoundRobin,
    Oracle,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::GreedyNwot => "greedy_nwot",
            PolicyKind::Rotation => "rotation",
            PolicyKind::Scheduled => "scheduled",
            PolicyKind::RoundRobin => "round_robin",
            PolicyKind::Oracle => "oracle",
        }
    }

    pub fn uses_scores(self) -> bool {
        matches!(
            self,
            PolicyKind::GreedyNwot | PolicyKind::Rotation | PolicyKind::Scheduled
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateRule {
    #[default]
    All,
    ExcludeCurrent,
    UnvisitedOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerParams {
    /// Visit deficit (max count − own count) that forces a node.
    #[serde(default = "default_quota")]
    pub quota: usize,
    /// Revisit the most-forgotten node once forgetting drops below ε.
    #[serde(default = "yes")]
    pub cf_trigger: bool,
}

fn default_quota() -> usize {
    3
}

fn yes() -> bool {
    true
}

impl Default for SchedulerParams {
    fn default() -> Self {
        Self {
            quota: default_quota(),
            cf_trigger: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub kind: PolicyKind,
    #[serde(default)]
    pub candidate_rule: CandidateRule,
    #[serde(default)]
    pub scheduler: SchedulerParams,
}

impl Policy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            candidate_rule: CandidateRule::All,
            scheduler: SchedulerParams::default(),
        }
    }

    pub fn scheduled(quota: usize, cf_trigger: bool) -> Self {
        Self {
            kind: PolicyKind::Scheduled,
            candidate_rule: CandidateRule::All,
            scheduler: SchedulerParams { quota, cf_trigger },
        }
    }

    pub fn with_rule(mut self, rule: CandidateRule) -> Self {
        self.candidate_rule = rule;
        self
    }
}

/// What the selector knows before choosing visit number `step()`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceState {
    pub node_ids: Vec<NodeId>,
    pub visited: Vec<NodeId>,
    pub visit_counts: BTreeMap<NodeId, usize>,
    /// R⁰, fixed after the first scoring round.
    pub initial_scores: Option<ScoreSet>,
    pub last_scores: Option<ScoreSet>,
    pub current_scores: Option<ScoreSet>,
    /// ΔW per previously visited node from the most recent step.
    pub last_forgetting: BTreeMap<NodeId, f64>,
    pub epsilon: f64,
}

impl SequenceState {
    pub fn new(mut node_ids: Vec<NodeId>, epsilon: f64) -> Self {
        node_ids.sort_unstable();
        node_ids.dedup();
        let visit_counts = node_ids.iter().map(|&n| (n, 0)).collect();
        Self {
            node_ids,
            visited: Vec::new(),
            visit_counts,
            initial_scores: None,
            last_scores: None,
            current_scores: None,
            last_forgetting: BTreeMap::new(),
            epsilon,
        }
    }

    /// 1-based index of the visit about to be chosen.
    pub fn step(&self) -> usize {
        self.visited.len() + 1
    }

    pub fn current(&self) -> Option<NodeId> {
        self.visited.last().copied()
    }

    /// Installs the score set for the upcoming selection.
    pub fn push_scores(&mut self, scores: ScoreSet) {
        if self.initial_scores.is_none() {
            self.initial_scores = Some(scores.clone());
        }
        self.last_scores = self.current_scores.replace(scores);
    }

    pub fn record_visit(&mut self, node: NodeId, forgetting: BTreeMap<NodeId, f64>) {
        self.visited.push(node);
        *self.visit_counts.entry(node).or_insert(0) += 1;
        self.last_forgetting = forgetting;
    }

    pub fn count(&self, node: NodeId) -> usize {
        self.visit_counts.get(&node).copied().unwrap_or(0)
    }
}

/// Nodes eligible at the next step. `unvisited_only` (and `exclude_current`
/// with a single node) fall back to every node once nothing would be left.
pub fn candidates(state: &SequenceState, rule: CandidateRule) -> BTreeSet<NodeId> {
    let all: BTreeSet<NodeId> = state.node_ids.iter().copied().collect();
    let narrowed: BTreeSet<NodeId> = match rule {
        CandidateRule::All => return all,
        CandidateRule::ExcludeCurrent => match state.current() {
            Some(cur) => all.iter().copied().filter(|&n| n != cur).collect(),
            None => all.clone(),
        },
        CandidateRule::UnvisitedOnly => {
            let seen: BTreeSet<NodeId> = state.visited.iter().copied().collect();
            all.difference(&seen).copied().collect()
        }
    };
    if narrowed.is_empty() {
        all
    } else {
        narrowed
    }
}

/// First member of `order`, scanning cyclically from `start`, that is a candidate.
fn cycle_pick(order: &[NodeId], start: usize, allowed: &BTreeSet<NodeId>) -> Option<NodeId> {
    (0..order.len())
        .map(|k| order[(start + k) % order.len()])
        .find(|n| allowed.contains(n))
}

fn require_scores(state: &SequenceState) -> Result<&ScoreSet> {
    state
        .current_scores
        .as_ref()
        .ok_or_else(|| Error::State("score-based policy called without current scores".into()))
}

fn greedy(state: &SequenceState, allowed: &BTreeSet<NodeId>) -> Result<NodeId> {
    let scores = require_scores(state)?;
    if let Some(missing) = allowed.iter().find(|&&n| scores.get(n).is_none()) {
        return Err(Error::State(format!("no score for candidate node {missing}")));
    }
    argmax_over(scores, allowed.iter().copied()).ok_or_else(|| Error::State("no candidates to select from".into()))
}

/// Descending R⁰ order, ties by lowest id.
pub fn rotation_order(initial: &ScoreSet, node_ids: &[NodeId]) -> Result<Vec<NodeId>> {
    let mut order = node_ids.to_vec();
    for &n in &order {
        if initial.get(n).is_none() {
            return Err(Error::State(format!("no initial score for node {n}")));
        }
    }
    order.sort_by(|&a, &b| {
        let (sa, sb) = (initial.get(a).unwrap(), initial.get(b).unwrap());
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    Ok(order)
}

/// Chooses the next node; the result is always a member of
/// `candidates(state, policy.candidate_rule)`.
pub fn select_next(state: &SequenceState, policy: &Policy, stream: &RngStream) -> Result<NodeId> {
    let allowed = candidates(state, policy.candidate_rule);
    if allowed.is_empty() {
        return Err(Error::State("no nodes to select from".into()));
    }
    let step = state.step();
    match policy.kind {
        PolicyKind::Random => {
            let list: Vec<NodeId> = allowed.into_iter().collect();
            let i = stream.rng().random_range(0..list.len());
            Ok(list[i])
        }
        PolicyKind::GreedyNwot => greedy(state, &allowed),
        PolicyKind::RoundRobin => cycle_pick(&state.node_ids, (step - 1) % state.node_ids.len(), &allowed)
            .ok_or_else(|| Error::State("round robin found no candidate".into())),
        PolicyKind::Rotation => {
            let initial = state
                .initial_scores
                .as_ref()
                .ok_or_else(|| Error::State("rotation needs the initial score set".into()))?;
            let order = rotation_order(initial, &state.node_ids)?;
            cycle_pick(&order, (step - 1) % order.len(), &allowed)
                .ok_or_else(|| Error::State("rotation found no candidate".into()))
        }
        PolicyKind::Scheduled => {
            let max_count = state.node_ids.iter().map(|&n| state.count(n)).max().unwrap_or(0);
            let quota = policy.scheduler.quota;
            // tier 1: visit deficit
            let deficient = allowed
                .iter()
                .map(|&n| (n, max_count - state.count(n)))
                .filter(|&(_, d)| d >= quota.max(1))
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((n, _)) = deficient {
                return Ok(n);
            }
            // tier 2: most-forgotten node once forgetting crosses ε
            if policy.scheduler.cf_trigger {
                let worst = state
                    .last_forgetting
                    .iter()
                    .filter(|(n, _)| allowed.contains(n))
                    .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(b.0)));
                if let Some((&n, &w)) = worst {
                    if w < state.epsilon {
                        return Ok(n);
                    }
                }
            }
            greedy(state, &allowed)
        }
        PolicyKind::Oracle => Err(Error::State(
            "the oracle policy is resolved by exhaustive search, not stepwise selection".into(),
        )),
    }
}

/// Accuracy snapshot after some number of visits.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub global_acc: f64,
    pub node_acc: BTreeMap<NodeId, f64>,
}

/// A deterministic training environment: visiting node `v` as visit number
/// `h` from a given state always produces the same next state.
pub trait SequenceEnv: Sync {
    type State: Send + Sync;

    fn node_ids(&self) -> Vec<NodeId>;
    fn initial_state(&self) -> Result<Self::State>;
    fn visit(&self, state: &Self::State, step: usize, node: NodeId) -> Result<Self::State>;
    fn evaluate(&self, state: &Self::State) -> Result<Evaluation>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Global accuracy after the last visit.
    #[default]
    FinalGlobalAcc,
    /// Sum of per-step global accuracy changes.
    SumDeltaM,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub sequence: Vec<NodeId>,
    pub feasible: bool,
    pub delta_m: Vec<f64>,
    /// Smallest ΔW over every step; `None` when no step had earlier nodes.
    pub min_forgetting: Option<f64>,
    pub final_global_acc: f64,
}

impl OracleRow {
    pub fn value(&self, objective: Objective) -> f64 {
        match objective {
            Objective::FinalGlobalAcc => self.final_global_acc,
            Objective::SumDeltaM => self.delta_m.iter().sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub horizon: usize,
    pub rule: CandidateRule,
    pub objective: Objective,
    pub epsilon: f64,
    pub initial_global_acc: f64,
    /// Every enumerated sequence, in lexicographic order.
    pub rows: Vec<OracleRow>,
    /// Best feasible sequence and its value; `None` if nothing is feasible.
    pub best_sequence: Option<Vec<NodeId>>,
    pub best_value: Option<f64>,
}

/// Values within this distance of the maximum count as tied.
const ORACLE_TIE_TOL: f64 = 1e-9;

impl OracleResult {
    /// Argmax row under `objective`; ties (within 1e-9) go to the
    /// lexicographically smallest sequence.
    pub fn best(&self, objective: Objective, feasible_only: bool) -> Option<&OracleRow> {
        let eligible = || self.rows.iter().filter(|r| !feasible_only || r.feasible);
        let max = eligible().map(|r| r.value(objective)).fold(f64::NEG_INFINITY, f64::max);
        eligible().find(|r| r.value(objective) >= max - ORACLE_TIE_TOL)
    }

    pub fn row(&self, sequence: &[NodeId]) -> Option<&OracleRow> {
        self.rows.iter().find(|r| r.sequence == sequence)
    }

    /// CSV columns: sequence, feasible, delta_m_1..delta_m_H, min_forgetting,
    /// final_global_acc. Sequences are dash-joined node ids.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["sequence".to_string(), "feasible".to_string()];
        header.extend((1..=self.horizon).map(|h| format!("delta_m_{h}")));
        header.push("min_forgetting".into());
        header.push("final_global_acc".into());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.sequence.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("-"),
                row.feasible.to_string(),
            ];
            rec.extend(row.delta_m.iter().map(|v| format!("{v:.16e}")));
            rec.push(row.min_forgetting.map(|v| format!("{v:.16e}")).unwrap_or_default());
            rec.push(format!("{:.16e}", row.final_global_acc));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

pub const DEFAULT_ORACLE_CAP: u128 = 2000;

/// Number of sequences of length `horizon` that honor `rule`.
pub fn sequence_count(node_ids: &[NodeId], horizon: usize, rule: CandidateRule) -> u128 {
    let mut state = SequenceState::new(node_ids.to_vec(), 0.0);
    let mut total: u128 = 1;
    for _ in 0..horizon {
        let c = candidates(&state, rule);
        total = total.saturating_mul(c.len() as u128);
        let Some(&first) = c.iter().next() else { return 0 };
        state.record_visit(first, BTreeMap::new());
    }
    total
}

struct Prefix<S> {
    state: S,
    eval: Evaluation,
    seq: SequenceState,
    delta_m: Vec<f64>,
    min_forgetting: Option<f64>,
    feasible: bool,
}

fn extend<E: SequenceEnv>(
    env: &E,
    prefix: &Prefix<E::State>,
    node: NodeId,
    horizon: usize,
    rule: CandidateRule,
    epsilon: f64,
) -> Result<Vec<OracleRow>> {
    let step = prefix.seq.step();
    let state = env.visit(&prefix.state, step, node)?;
    let eval = env.evaluate(&state)?;
    let distinct: Vec<NodeId> = prefix
        .seq
        .visited
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let forgetting = compute_forgetting(&prefix.eval.node_acc, &eval.node_acc, &distinct, epsilon)?;
    let mut delta_m = prefix.delta_m.clone();
    delta_m.push(eval.global_acc - prefix.eval.global_acc);
    let min_forgetting = match (prefix.min_forgetting, forgetting.min) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    let mut seq = prefix.seq.clone();
    seq.record_visit(node, forgetting.per_node.clone());
    let next = Prefix {
        state,
        eval,
        seq,
        delta_m,
        min_forgetting,
        feasible: prefix.feasible && forgetting.ok,
    };
    if step == horizon {
        return Ok(vec![OracleRow {
            sequence: next.seq.visited.clone(),
            feasible: next.feasible,
            delta_m: next.delta_m,
            min_forgetting: next.min_forgetting,
            final_global_acc: next.eval.global_acc,
        }]);
    }
    let mut rows = Vec::new();
    for n in candidates(&next.seq, rule) {
        rows.extend(extend(env, &next, n, horizon, rule, epsilon)?);
    }
    Ok(rows)
}

/// Trains and evaluates every sequence of length `horizon` that honors
/// `rule`. Sequences whose forgetting ever drops below `epsilon` are kept in
/// the table but marked infeasible. First-visit branches run in parallel; the
/// environment's per-visit determinism makes the table identical to a
/// sequential enumeration.
pub fn oracle_search<E: SequenceEnv>(
    env: &E,
    horizon: usize,
    rule: CandidateRule,
    objective: Objective,
    epsilon: f64,
    cap: u128,
) -> Result<OracleResult> {
    if horizon == 0 {
        return Err(Error::Config("oracle horizon must be >= 1".into()));
    }
    let node_ids = env.node_ids();
    let required = sequence_count(&node_ids, horizon, rule);
    if required > cap {
        return Err(Error::OracleCap { required, cap });
    }
    let state = env.initial_state()?;
    let eval = env.evaluate(&state)?;
    let initial_global_acc = eval.global_acc;
    let root = Prefix {
        state,
        eval,
        seq: SequenceState::new(node_ids, epsilon),
        delta_m: Vec::new(),
        min_forgetting: None,
        feasible: true,
    };
    let firsts: Vec<NodeId> = candidates(&root.seq, rule).into_iter().collect();
    let branches: Vec<Result<Vec<OracleRow>>> = firsts
        .par_iter()
        .map(|&n| extend(env, &root, n, horizon, rule, epsilon))
        .collect();
    let mut rows = Vec::with_capacity(required as usize);
    for b in branches {
        rows.extend(b?);
    }
    let mut result = OracleResult {
        horizon,
        rule,
        objective,
        epsilon,
        initial_global_acc,
        rows,
        best_sequence: None,
        best_value: None,
    };
    if let Some((seq, value)) = result
        .best(objective, true)
        .map(|b| (b.sequence.clone(), b.value(objective)))
    {
        result.best_sequence = Some(seq);
        result.best_value = Some(value);
    }
    Ok(result)
}
