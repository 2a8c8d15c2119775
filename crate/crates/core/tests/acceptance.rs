//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1–3 are exact or structural and make the process fail when they
//! do not hold. Criteria 4–8 are directional reproductions on synthetic data;
//! their failures are reported with the statistics behind them but only fail
//! the process when `NODESEQ_ACCEPTANCE_STRICT=1`.

use std::collections::BTreeSet;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nodeseq::harness::{build_world, parse_steps_csv, run_episode, sweep, RunConfig, RunLog, SweepReport, TrainingEnv};
use nodeseq::neural::{forward_with, loss_and_grads, ActivationMode, AidParams, Model, ModelConfig};
use nodeseq::numerics::{log_det_psd, matmul, rand_normal, Matrix, RngStream};
use nodeseq::regularizers::{ewc_penalty, Anchor, EwcConfig, EwcState};
use nodeseq::scoring::{activation_codes, build_kernel, nwot_score, score_codes, ActivationCode, ScoreVariant};
use nodeseq::sequencer::{oracle_search, CandidateRule, Objective, Policy, PolicyKind};
use nodeseq::tasks::{generate_global, partition, CountRange, DataConfig, PartitionMode, PartitionSpec};

const SEEDS: [u64; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

// Tolerances and thresholds.
const LOGDET_REL_TOL: f64 = 1e-9;
const WORKED_EXAMPLE_TOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-4;
const BACKPROP_REL_TOL: f64 = 1e-4;
const EWC_REL_TOL: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-6;
const ORDER_TOL: f64 = 1e-9;
const TELESCOPE_TOL: f64 = 1e-9;
const SIGN_TEST_ALPHA: f64 = 0.1;
const UNVISITED_SHARE: f64 = 0.5;
const ENTROPY_SHARE: f64 = 0.7;
const SCHEDULER_QUOTA: usize = 3;
const CLASS_QUOTA: usize = 2;
const EWC_LAMBDA: f64 = 50.0;
/// Drop probabilities of the AID arm in criterion 8.
const AID_ARM: (f64, f64) = (0.5, 0.8);

struct Outcome {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn timed(id: usize, title: &'static str, budget: Duration, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (pass, mut detail) = f();
    let elapsed = start.elapsed();
    let in_budget = elapsed <= budget;
    if !in_budget {
        detail.push_str(&format!("; over budget {:.0?}", budget));
    }
    Outcome {
        id,
        title,
        pass: pass && in_budget,
        detail,
        elapsed,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// One-sided sign test: P(X ≥ wins) for X ~ Binomial(wins + losses, 1/2).
fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut coeff = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k > 0 {
            coeff = coeff * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            tail += coeff;
        }
    }
    tail / 2f64.powi(n as i32)
}

fn cofactor_det(m: &[Vec<f64>]) -> f64 {
    if m.len() == 1 {
        return m[0][0];
    }
    (0..m.len())
        .map(|j| {
            let minor: Vec<Vec<f64>> = m[1..]
                .iter()
                .map(|r| r.iter().enumerate().filter(|&(c, _)| c != j).map(|(_, &v)| v).collect())
                .collect();
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sign * m[0][j] * cofactor_det(&minor)
        })
        .sum()
}

fn model_cfg(input: usize, hidden: &[usize], classes: usize, aid: AidParams) -> ModelConfig {
    ModelConfig {
        input_dim: input,
        hidden_dims: hidden.to_vec(),
        num_classes: classes,
        aid: Some(aid),
        ..ModelConfig::default()
    }
}

fn with_params(model: &Model, theta: &[f64]) -> Model {
    Model::with_flat_params(model.config.clone(), theta).unwrap()
}

fn central_difference(theta: &[f64], i: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut plus = theta.to_vec();
    plus[i] += FD_STEP;
    let mut minus = theta.to_vec();
    minus[i] -= FD_STEP;
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}

fn criterion_1() -> (bool, String) {
    let mut logdet_worst: f64 = 0.0;
    for seed in 0..120u64 {
        let n = 1 + seed as usize % 6;
        let a = rand_normal(&RngStream::new(seed, 0, 0, "psd"), n, n, 0.0, 1.0).unwrap();
        let mut k = matmul(&a, &a.transpose()).unwrap();
        for i in 0..n {
            k[(i, i)] += 0.2;
        }
        let rows: Vec<Vec<f64>> = k.row_iter().map(|r| r.to_vec()).collect();
        let oracle = cofactor_det(&rows).ln();
        let got = log_det_psd(&k, 0.0).unwrap();
        logdet_worst = logdet_worst.max((got - oracle).abs() / oracle.abs().max(1.0));
    }
    let logdet_ok = logdet_worst <= LOGDET_REL_TOL;

    let codes = [
        ActivationCode::from_bits(&[1, 0, 1]),
        ActivationCode::from_bits(&[1, 1, 0]),
    ];
    let kernel = build_kernel(&codes).unwrap();
    let worked = score_codes(&codes, 0.0).unwrap();
    let worked_ok = kernel == Matrix::from_rows(&[[3.0, 1.0], [1.0, 3.0]]).unwrap()
        && (worked - 8f64.ln()).abs() <= WORKED_EXAMPLE_TOL;

    let mut bp_worst: f64 = 0.0;
    let mut ewc_worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut model = Model::init(
            model_cfg(4, &[2], 3, AidParams::default()),
            &RngStream::new(seed, 0, 0, "init"),
        )
        .unwrap();
        let mut theta = model.flat_params();
        let jiggle = rand_normal(&RngStream::new(seed, 0, 0, "jiggle"), 1, theta.len(), 0.0, 0.1).unwrap();
        theta.iter_mut().zip(jiggle.as_slice()).for_each(|(t, j)| *t += j);
        model.set_flat_params(&theta).unwrap();
        let x = rand_normal(&RngStream::new(seed, 0, 0, "x"), 5, 4, 0.0, 1.0).unwrap();
        let y: Vec<usize> = (0..5).map(|i| (i + seed as usize) % 3).collect();
        let (_, g) = loss_and_grads(&model, &x, &y, None).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let fd = central_difference(&theta, i, |t| {
                loss_and_grads(&with_params(&model, t), &x, &y, None).unwrap().0
            });
            bp_worst = bp_worst.max(rel_err(gi, fd));
        }

        let mut state = EwcState::new(EwcConfig {
            lambda: 1.0 + seed as f64,
            ..EwcConfig::default()
        });
        for a in 0..2u64 {
            let s = RngStream::new(seed, a, 0, "anchor");
            state.anchors.push(Anchor {
                theta_star: rand_normal(&s.child("theta"), 1, theta.len(), 0.0, 1.0)
                    .unwrap()
                    .into_vec(),
                fisher: rand_normal(&s.child("fisher"), 1, theta.len(), 0.0, 1.0)
                    .unwrap()
                    .into_vec()
                    .iter()
                    .map(|v| v * v)
                    .collect(),
                source_node: a as usize + 1,
            });
        }
        let (_, g) = ewc_penalty(&model, &state).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let fd = central_difference(&theta, i, |t| ewc_penalty(&with_params(&model, t), &state).unwrap().0);
            ewc_worst = ewc_worst.max(rel_err(gi, fd));
        }
    }
    let grads_ok = bp_worst < BACKPROP_REL_TOL && ewc_worst < EWC_REL_TOL;

    let mut aid_identical = 0;
    for seed in 0..50u64 {
        let m = Model::init(
            model_cfg(16, &[64, 64], 20, AidParams::new(1.0, 0.0)),
            &RngStream::new(seed, 0, 0, "init"),
        )
        .unwrap();
        let x = rand_normal(&RngStream::new(seed, 0, 0, "batch"), 32, 16, 0.0, 1.0).unwrap();
        let s = RngStream::new(seed, 1, 1, "aid-mask");
        let relu = nwot_score(&m, &x, ScoreVariant::Relu, &s, 0.0).unwrap();
        let aid = nwot_score(&m, &x, ScoreVariant::Aid, &s, 0.0).unwrap();
        aid_identical += usize::from(relu.to_bits() == aid.to_bits());
    }
    let aid_ok = aid_identical == 50;

    (
        logdet_ok && worked_ok && grads_ok && aid_ok,
        format!(
            "log-det worst rel err {logdet_worst:.1e} over 120; worked example {worked:.15}; backprop worst {bp_worst:.1e}, EWC worst {ewc_worst:.1e} over 20; AID degenerate identical {aid_identical}/50"
        ),
    )
}

fn random_spec(i: u64) -> (PartitionSpec, usize) {
    let mode = [
        PartitionMode::Iid,
        PartitionMode::ClassNoniid,
        PartitionMode::DomainNoniid,
    ][i as usize % 3];
    let n_nodes = 1 + (i as usize / 3) % 6;
    let cmin = 1 + (i as usize / 7) % 3;
    let cspan = (i as usize / 11) % 3;
    let mut spec = PartitionSpec::new(mode, n_nodes);
    spec.classes_per_node = CountRange::new(cmin, cmin + cspan);
    spec.test_fraction = 0.1 + 0.05 * (i % 9) as f64;
    spec.seed = Some(i.wrapping_mul(0x9e3779b97f4a7c15));
    if i.is_multiple_of(4) {
        spec.samples_per_node = Some(CountRange::new(10, 40));
    }
    (spec, (n_nodes * cmin).max(4) + cspan)
}

fn partition_invariants() -> Result<(), String> {
    for i in 0..100u64 {
        let (spec, classes) = random_spec(i);
        let cfg = DataConfig {
            class_count: classes,
            samples_per_class: 12,
            input_dim: 6,
            ..DataConfig::default()
        };
        let g = generate_global(&cfg, i).unwrap();
        let p = partition(&g, &spec).map_err(|e| format!("spec {i}: {e}"))?;
        let mut used = BTreeSet::new();
        for node in &p.nodes {
            let train: BTreeSet<usize> = node.train_indices.iter().copied().collect();
            let test: BTreeSet<usize> = node.test_indices.iter().copied().collect();
            if !train.is_disjoint(&test) {
                return Err(format!("spec {i}: node {} train/test overlap", node.node_id));
            }
            if !train.iter().chain(&test).all(|&r| used.insert(r)) {
                return Err(format!("spec {i}: a global row is shared by two nodes"));
            }
        }
        if spec.mode == PartitionMode::ClassNoniid {
            for (a, na) in p.nodes.iter().enumerate() {
                if p.nodes[a + 1..]
                    .iter()
                    .any(|nb| !na.class_set.is_disjoint(&nb.class_set))
                {
                    return Err(format!("spec {i}: class sets overlap"));
                }
            }
        }
        let mut union = Vec::new();
        for node in &p.nodes {
            union.extend(node.test_sub.labels.iter().copied());
        }
        let rows: usize = p.nodes.iter().map(|n| n.test_sub.len()).sum();
        if p.global_test.labels != union || p.global_test.len() != rows {
            return Err(format!("spec {i}: global test is not the union of node test splits"));
        }
    }
    Ok(())
}

fn kernel_properties() -> Result<(), String> {
    for seed in 0..50u64 {
        let m = Model::init(
            model_cfg(16, &[64, 64], 20, AidParams::default()),
            &RngStream::new(seed, 0, 0, "init"),
        )
        .unwrap();
        let x = rand_normal(&RngStream::new(seed, 0, 0, "batch"), 24, 16, 0.0, 1.0).unwrap();
        let trace = forward_with(&m, &x, ActivationMode::Relu, true, None).unwrap();
        let k = build_kernel(&activation_codes(&trace).unwrap()).unwrap();
        let n_a = m.config.total_hidden_units() as f64;
        for i in 0..k.rows() {
            if k[(i, i)] != n_a || (0..k.cols()).any(|j| k[(i, j)] != k[(j, i)]) {
                return Err(format!("batch {seed}: kernel not symmetric with diagonal N_A"));
            }
        }
        let s = RngStream::new(0, 0, 0, "aid-mask");
        let score = |b: &Matrix| nwot_score(&m, b, ScoreVariant::Relu, &s, 0.0).unwrap();
        let base = score(&x);
        let mut order: Vec<usize> = (0..24).rev().collect();
        order.rotate_left(seed as usize % 24);
        if (score(&x.select_rows(&order)) - base).abs() >= ORDER_TOL {
            return Err(format!("batch {seed}: score depends on row order"));
        }
        let mut dup: Vec<usize> = (0..24).collect();
        dup.push(seed as usize % 24);
        if score(&x.select_rows(&dup)) > base {
            return Err(format!("batch {seed}: a duplicate raised the score"));
        }
    }
    Ok(())
}

fn run_checks(runs: &[&RunLog]) -> Result<(), String> {
    for run in runs {
        if run.telescoping_gap() > TELESCOPE_TOL {
            return Err(format!(
                "{} seed {}: telescoping gap {:e}",
                run.label,
                run.seed,
                run.telescoping_gap()
            ));
        }
        let csv = run.steps_csv_string().map_err(|e| e.to_string())?;
        let parsed = parse_steps_csv(csv.as_bytes()).map_err(|e| e.to_string())?;
        if parsed != run.csv_steps() {
            return Err(format!("{} seed {}: CSV round trip differs", run.label, run.seed));
        }
    }
    Ok(())
}

fn cli_determinism() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, toy_toml(7, "scheduled")).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_nodeseq"))
            .args([
                "simulate",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ])
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        outputs.push(std::fs::read(out.join("steps.csv")).map_err(|e| e.to_string())?);
    }
    if outputs[0] != outputs[1] {
        return Err("two simulate runs wrote different steps.csv".into());
    }
    Ok(())
}

fn criterion_2(emitted: &[&RunLog]) -> (bool, String) {
    let results = [
        ("partitions", partition_invariants()),
        ("kernel", kernel_properties()),
        ("runs", run_checks(emitted)),
        ("determinism", cli_determinism()),
    ];
    let failures: Vec<String> = results
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    (
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "100 partition specs, 50 kernel batches, {} runs telescoped and round-tripped, simulate byte-identical",
                emitted.len()
            )
        } else {
            failures.join("; ")
        },
    )
}

/// Three class-disjoint nodes over a small blob dataset, horizon 4.
fn toy_toml(seed: u64, policy: &str) -> String {
    format!(
        r#"
seed = {seed}
horizon = 4
train_batch_size = 16
[data]
class_count = 9
samples_per_class = 30
input_dim = 8
[partition]
mode = "class_noniid"
n_nodes = 3
classes_per_node = {{ min = 2, max = 3 }}
[model]
hidden_dims = [16, 16]
[policy]
kind = "{policy}"
[scoring]
minibatch_size = 16
"#
    )
}

fn criterion_3() -> (bool, String, Vec<RunLog>) {
    let policies = [
        "random",
        "greedy_nwot",
        "rotation",
        "scheduled",
        "round_robin",
        "oracle",
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    let mut runs = Vec::new();
    let mut worst_margin = f64::INFINITY;
    for env_seed in 1..=5u64 {
        let base = RunConfig::from_toml_str(&toy_toml(env_seed, "random")).unwrap();
        let world = Arc::new(build_world(&base).unwrap());
        let env = TrainingEnv::new(world, base.training(), base.seed);
        let table = oracle_search(
            &env,
            4,
            CandidateRule::All,
            Objective::FinalGlobalAcc,
            base.epsilon,
            2000,
        )
        .unwrap();
        if table.rows.len() != 81 {
            ok = false;
            notes.push(format!("env {env_seed}: {} rows", table.rows.len()));
        }
        for feasible_only in [true, false] {
            let a = table
                .best(Objective::FinalGlobalAcc, feasible_only)
                .map(|r| &r.sequence);
            let b = table.best(Objective::SumDeltaM, feasible_only).map(|r| &r.sequence);
            if a != b {
                ok = false;
                notes.push(format!("env {env_seed}: objectives pick {a:?} vs {b:?}"));
            }
        }
        let best_feasible = table.best(Objective::FinalGlobalAcc, true).map(|r| r.final_global_acc);
        let best_any = table.best(Objective::FinalGlobalAcc, false).unwrap().final_global_acc;
        for policy in policies {
            let log = run_episode(&RunConfig::from_toml_str(&toy_toml(env_seed, policy)).unwrap()).unwrap();
            let value = log.final_global_acc();
            let feasible = log.steps.iter().all(|s| s.constraint_ok);
            // A feasible run competes with the best feasible sequence; an
            // infeasible one can only be compared with the unconstrained best.
            let bound = if feasible {
                best_feasible.unwrap_or(f64::NEG_INFINITY)
            } else {
                best_any
            };
            worst_margin = worst_margin.min(bound - value);
            if value > bound {
                ok = false;
                notes.push(format!(
                    "env {env_seed}: {policy} reached {value:.4} above oracle {bound:.4}"
                ));
            }
            match table.row(&log.sequence()) {
                Some(row) if row.final_global_acc.to_bits() == value.to_bits() => {}
                _ => {
                    ok = false;
                    notes.push(format!("env {env_seed}: {policy} run does not match its oracle row"));
                }
            }
            runs.push(log);
        }
    }
    let detail = if ok {
        format!("5 environments × 81 sequences; smallest oracle margin {worst_margin:.4}; both objectives agree on every table")
    } else {
        notes.join("; ")
    };
    (ok, detail, runs)
}

fn base_toml(horizon: usize, partition: &str, extra: &str) -> String {
    format!("seed = 0\nhorizon = {horizon}\n{extra}\n[policy]\nkind = \"random\"\n[partition]\n{partition}\n")
}

fn arm(base: &str, label: &str, policy: Policy) -> RunConfig {
    let mut c = RunConfig::from_toml_str(base).unwrap();
    c.label = Some(label.into());
    c.policy = policy;
    c
}

fn domain_partition() -> &'static str {
    "mode = \"domain_noniid\"\nn_nodes = 4\ndomain_transforms = [{ shift = 2.0 }, { shift = 2.0 }, { shift = 2.0 }, { sparsify = 0.5, shift = 0.0 }]"
}

fn failures(report: &SweepReport) -> usize {
    report
        .arms
        .iter()
        .flat_map(|a| &a.failures)
        .filter(|f| f.is_some())
        .count()
}

fn paired(report: &SweepReport, a: &str, b: &str) -> Vec<f64> {
    let x = &report.arm(a).unwrap().final_acc;
    let y = &report.arm(b).unwrap().final_acc;
    x.iter().zip(y).map(|(p, q)| p - q).collect()
}

fn criterion_4() -> (bool, String, SweepReport) {
    let base = base_toml(20, "mode = \"iid\"\nn_nodes = 4", "");
    let arms = [
        arm(&base, "random", Policy::new(PolicyKind::Random)),
        arm(&base, "greedy", Policy::new(PolicyKind::GreedyNwot)),
    ];
    let report = sweep(&arms, &SEEDS).unwrap();
    let diffs = paired(&report, "greedy", "random");
    let wins = diffs.iter().filter(|&&d| d > 0.0).count();
    let losses = diffs.iter().filter(|&&d| d < 0.0).count();
    let p = sign_test_p(wins, losses);
    let (mg, mr) = (
        mean(&report.arm("greedy").unwrap().final_acc),
        mean(&report.arm("random").unwrap().final_acc),
    );
    let pass = failures(&report) == 0 && mg >= mr && mean(&diffs) >= 0.0 && p <= SIGN_TEST_ALPHA;
    (
        pass,
        format!(
            "greedy {mg:.4} vs random {mr:.4}; paired mean {:+.4}; {wins} wins / {losses} losses; sign test p = {p:.3}",
            mean(&diffs)
        ),
        report,
    )
}

fn criterion_5() -> (bool, String, SweepReport) {
    let base = base_toml(20, domain_partition(), "");
    let arms = [
        arm(&base, "greedy", Policy::new(PolicyKind::GreedyNwot)),
        arm(&base, "scheduled", Policy::scheduled(SCHEDULER_QUOTA, true)),
    ];
    let report = sweep(&arms, &SEEDS).unwrap();
    let greedy = report.arm("greedy").unwrap();
    let ignored = greedy.unvisited.iter().filter(|&&u| u > 0).count();
    let floor = (20 / 4usize).saturating_sub(SCHEDULER_QUOTA);
    let sched = report.arm("scheduled").unwrap();
    let covered = sched
        .visit_histograms
        .iter()
        .filter(|h| h.len() == 4 && h.values().all(|&c| c >= floor))
        .count();
    let min_visits = sched
        .visit_histograms
        .iter()
        .flat_map(|h| h.values())
        .min()
        .copied()
        .unwrap_or(0);
    let pass =
        failures(&report) == 0 && ignored as f64 >= UNVISITED_SHARE * SEEDS.len() as f64 && covered == SEEDS.len();
    (
        pass,
        format!(
            "greedy left a node unvisited in {ignored}/10 seeds; scheduled (Q={SCHEDULER_QUOTA}) gave every node ≥ {floor} visits in {covered}/10 seeds (fewest visits {min_visits})"
        ),
        report,
    )
}

fn criteria_6_7() -> ((bool, String), (bool, String), SweepReport) {
    let base = base_toml(
        24,
        "mode = \"class_noniid\"\nn_nodes = 4",
        "learning_rate = 0.005\ntrain_batch_size = 8",
    );
    let ewc = EwcConfig {
        lambda: EWC_LAMBDA,
        ..EwcConfig::default()
    };
    let with_ewc = |mut c: RunConfig| {
        c.ewc = Some(ewc);
        c
    };
    let sched = Policy::scheduled(CLASS_QUOTA, true);
    let arms = [
        arm(&base, "random", Policy::new(PolicyKind::Random)),
        arm(&base, "scheduled", sched),
        with_ewc(arm(&base, "random+ewc", Policy::new(PolicyKind::Random))),
        with_ewc(arm(&base, "scheduled+ewc", sched)),
    ];
    let report = sweep(&arms, &SEEDS).unwrap();
    let ok_runs = failures(&report) == 0;

    let d6 = paired(&report, "scheduled", "random");
    let wins6 = d6.iter().filter(|&&d| d > 0.0).count();
    let c6 = (
        ok_runs && mean(&d6) >= 0.0,
        format!(
            "scheduled (Q={CLASS_QUOTA}) − random paired mean {:+.4} ({wins6}/10 seeds ahead)",
            mean(&d6)
        ),
    );

    let d7 = paired(&report, "scheduled+ewc", "random+ewc");
    let forgetting = |label: &str| {
        let v: Vec<f64> = report
            .arm(label)
            .unwrap()
            .mean_min_forgetting
            .iter()
            .flatten()
            .copied()
            .collect();
        mean(&v)
    };
    let (fe, fp) = (forgetting("scheduled+ewc"), forgetting("scheduled"));
    let c7 = (
        ok_runs && mean(&d7) >= 0.0 && fe >= fp,
        format!(
            "scheduled+EWC − random+EWC paired mean {:+.4}; scheduled mean min ΔW {fe:.4} with EWC vs {fp:.4} without (λ={EWC_LAMBDA})",
            mean(&d7)
        ),
    );
    (c6, c7, report)
}

fn visit_entropy_wins(report: &SweepReport, a: &str, b: &str) -> usize {
    let x = &report.arm(a).unwrap().visit_entropy;
    let y = &report.arm(b).unwrap().visit_entropy;
    x.iter().zip(y).filter(|(p, q)| p >= q).count()
}

fn criterion_8() -> (bool, String, SweepReport) {
    let base = base_toml(20, domain_partition(), "");
    let greedy = Policy::new(PolicyKind::GreedyNwot);
    let aid_arm = |label: &str, (p1, p2): (f64, f64)| {
        let mut c = arm(&base, label, greedy);
        c.scoring.variant = ScoreVariant::Aid;
        c.model.aid = Some(AidParams::new(p1, p2));
        c
    };
    let defaults = AidParams::default();
    let arms = [
        arm(&base, "greedy", greedy),
        aid_arm("aid", AID_ARM),
        aid_arm("aid-default", (defaults.p1, defaults.p2)),
    ];
    let report = sweep(&arms, &SEEDS).unwrap();
    let entropy_wins = visit_entropy_wins(&report, "aid", "greedy");
    let d = paired(&report, "aid", "greedy");
    let pass = failures(&report) == 0 && entropy_wins as f64 >= ENTROPY_SHARE * SEEDS.len() as f64 && mean(&d) >= 0.0;
    let default_wins = visit_entropy_wins(&report, "aid-default", "greedy");
    let default_d = paired(&report, "aid-default", "greedy");
    (
        pass,
        format!(
            "AID (p1={}, p2={}) entropy ≥ greedy in {entropy_wins}/10 seeds, paired accuracy mean {:+.4} [default p1={}, p2={}: {default_wins}/10, {:+.4}]",
            AID_ARM.0,
            AID_ARM.1,
            mean(&d),
            defaults.p1,
            defaults.p2,
            mean(&default_d)
        ),
        report,
    )
}

fn main() -> ExitCode {
    let minutes = |m: u64| Duration::from_secs(60 * m);
    let mut outcomes = vec![timed(1, "numerical exactness", Duration::from_secs(10), criterion_1)];

    let mut emitted: Vec<RunLog> = Vec::new();
    let mut reports: Vec<SweepReport> = Vec::new();
    let mut keep = |o: &mut Vec<Outcome>, id, title, budget, f: &mut dyn FnMut() -> (bool, String, Vec<RunLog>)| {
        let mut runs = Vec::new();
        o.push(timed(id, title, budget, || {
            let (p, d, r) = f();
            runs = r;
            (p, d)
        }));
        emitted.extend(runs);
    };
    keep(&mut outcomes, 3, "oracle dominance", minutes(5), &mut criterion_3);
    let mut sweep_runs = |r: SweepReport| {
        let runs: Vec<RunLog> = r.arms.iter().flat_map(|a| a.runs.clone()).collect();
        reports.push(r);
        runs
    };
    keep(&mut outcomes, 4, "IID greedy vs random", minutes(10), &mut || {
        let (p, d, r) = criterion_4();
        (p, d, sweep_runs(r))
    });
    keep(
        &mut outcomes,
        5,
        "non-IID pathology and scheduler coverage",
        minutes(10),
        &mut || {
            let (p, d, r) = criterion_5();
            (p, d, sweep_runs(r))
        },
    );
    let mut c7 = None;
    keep(
        &mut outcomes,
        6,
        "scheduler benefit on class non-IID",
        minutes(25),
        &mut || {
            let (c6, seven, r) = criteria_6_7();
            c7 = Some(seven);
            (c6.0, c6.1, sweep_runs(r))
        },
    );
    let (p7, d7) = c7.unwrap();
    outcomes.push(Outcome {
        id: 7,
        title: "EWC coupling",
        pass: p7,
        detail: format!("{d7} (shares the criterion 6 sweep)"),
        elapsed: Duration::ZERO,
    });
    keep(&mut outcomes, 8, "AID rebalancing", minutes(10), &mut || {
        let (p, d, r) = criterion_8();
        (p, d, sweep_runs(r))
    });
    let all: Vec<&RunLog> = emitted.iter().collect();
    outcomes.push(timed(2, "structural invariants", Duration::from_secs(30), || {
        criterion_2(&all)
    }));
    outcomes.sort_by_key(|o| o.id);

    for o in &outcomes {
        println!(
            "{} criterion {} ({}) [{:.1}s]: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.title,
            o.elapsed.as_secs_f64(),
            o.detail
        );
    }
    let strict = std::env::var("NODESEQ_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let blocking = outcomes.iter().filter(|o| !o.pass && (o.id <= 3 || strict)).count();
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if blocking > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
