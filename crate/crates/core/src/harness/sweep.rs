use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tasks::NodeId;

use super::config::RunConfig;
use super::env::{build_world, World};
use super::episode::{run_on_world, RunLog};

#[derive(Clone, Debug, Serialize)]
pub struct ArmReport {
    pub label: String,
    pub policy: String,
    /// Mean and sample std of global accuracy after 0..=T visits, across seeds.
    pub mean_acc_by_step: Vec<f64>,
    pub std_acc_by_step: Vec<f64>,
    /// One entry per seed, in seed order.
    pub final_acc: Vec<f64>,
    pub visit_histograms: Vec<BTreeMap<NodeId, usize>>,
    /// Shannon entropy (nats) of each seed's visit frequencies.
    pub visit_entropy: Vec<f64>,
    /// Count of nodes never visited, per seed.
    pub unvisited: Vec<usize>,
    /// Mean over steps of min ΔW, per seed (`None` if no step had earlier nodes).
    pub mean_min_forgetting: Vec<Option<f64>>,
    pub failures: Vec<Option<String>>,
    #[serde(skip)]
    pub runs: Vec<RunLog>,
}

/// Per-seed `final_acc[arm] − final_acc[baseline]`.
#[derive(Clone, Debug, Serialize)]
pub struct PairedDifference {
    pub label: String,
    pub baseline: String,
    pub diffs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmReport>,
    /// Every arm against arm 0.
    pub paired: Vec<PairedDifference>,
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn entropy(hist: &BTreeMap<NodeId, usize>) -> f64 {
    let total: usize = hist.values().sum();
    if total == 0 {
        return 0.0;
    }
    hist.values()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// The config `arm` runs with on repetition `seed`: the seed drives data,
/// partition, initialization and every run stream.
fn for_seed(arm: &RunConfig, seed: u64) -> RunConfig {
    let mut c = arm.clone();
    c.seed = seed;
    c.data_seed = None;
    c.partition.seed = None;
    c
}

/// Runs every arm on every seed. Within a seed all arms share one dataset,
/// partition and initial model, so final accuracies are paired.
pub fn sweep(arms: &[RunConfig], seeds: &[u64]) -> Result<SweepReport> {
    if arms.is_empty() || seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one arm and one seed".into()));
    }
    for arm in arms {
        arm.validate()?;
    }
    let worlds: Vec<Arc<World>> = seeds
        .par_iter()
        .map(|&seed| {
            let configs: Vec<RunConfig> = arms.iter().map(|a| for_seed(a, seed)).collect();
            let key = configs[0].pairing_key();
            if let Some(bad) = configs.iter().find(|c| c.pairing_key() != key) {
                return Err(Error::Config(format!(
                    "arm '{}' differs from '{}' outside policy-level settings; runs would not be paired",
                    bad.label(),
                    configs[0].label()
                )));
            }
            build_world(&configs[0]).map(Arc::new)
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..arms.len())
        .flat_map(|a| (0..seeds.len()).map(move |s| (a, s)))
        .collect();
    let logs: Vec<RunLog> = jobs
        .par_iter()
        .map(|&(a, s)| run_on_world(&for_seed(&arms[a], seeds[s]), worlds[s].clone()))
        .collect::<Result<_>>()?;

    let mut reports = Vec::with_capacity(arms.len());
    for (a, arm) in arms.iter().enumerate() {
        let runs: Vec<RunLog> = logs[a * seeds.len()..(a + 1) * seeds.len()].to_vec();
        let curves: Vec<Vec<f64>> = runs.iter().map(|r| r.accuracy_curve()).collect();
        let len = curves.iter().map(|c| c.len()).min().unwrap_or(0);
        let by_step: Vec<Vec<f64>> = (0..len).map(|h| curves.iter().map(|c| c[h]).collect()).collect();
        let histograms: Vec<_> = runs.iter().map(|r| r.visit_histogram()).collect();
        reports.push(ArmReport {
            label: arm.label(),
            policy: arm.policy.kind.name().to_string(),
            mean_acc_by_step: by_step.iter().map(|v| mean(v)).collect(),
            std_acc_by_step: by_step.iter().map(|v| sample_std(v)).collect(),
            final_acc: runs.iter().map(|r| r.final_global_acc()).collect(),
            visit_entropy: histograms.iter().map(entropy).collect(),
            unvisited: histograms
                .iter()
                .map(|h| h.values().filter(|&&c| c == 0).count())
                .collect(),
            visit_histograms: histograms,
            mean_min_forgetting: runs
                .iter()
                .map(|r| {
                    let v: Vec<f64> = r.steps.iter().filter_map(|s| s.min_forgetting).collect();
                    (!v.is_empty()).then(|| mean(&v))
                })
                .collect(),
            failures: runs.iter().map(|r| r.failure.clone()).collect(),
            runs,
        });
    }

    let base = &reports[0];
    let paired = reports
        .iter()
        .map(|r| {
            let diffs: Vec<f64> = r.final_acc.iter().zip(&base.final_acc).map(|(a, b)| a - b).collect();
            PairedDifference {
                label: r.label.clone(),
                baseline: base.label.clone(),
                mean: mean(&diffs),
                std: sample_std(&diffs),
                wins: diffs.iter().filter(|&&d| d > 0.0).count(),
                losses: diffs.iter().filter(|&&d| d < 0.0).count(),
                ties: diffs.iter().filter(|&&d| d == 0.0).count(),
                diffs,
            }
        })
        .collect();

    Ok(SweepReport {
        seeds: seeds.to_vec(),
        arms: reports,
        paired,
    })
}

impl SweepReport {
    pub fn arm(&self, label: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.label == label)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Columns: arm, step, mean_global_acc, std_global_acc.
    pub fn write_curves_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["arm", "step", "mean_global_acc", "std_global_acc"])?;
        for arm in &self.arms {
            for (h, (m, s)) in arm.mean_acc_by_step.iter().zip(&arm.std_acc_by_step).enumerate() {
                w.write_record([
                    arm.label.clone(),
                    h.to_string(),
                    format!("{m:.16e}"),
                    format!("{s:.16e}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.json"), self.to_json()?)?;
        self.write_curves_csv(std::fs::File::create(dir.join("curves.csv"))?)
    }
}
