//! The route controller: runs score → select → train → evaluate episodes,
//! computes the accuracy-change and forgetting metrics, and sweeps policies
//! over paired seeds.

mod config;
mod env;
mod episode;
mod sweep;

use std::collections::BTreeMap;

pub use config::{Arm, RunConfig, SweepConfig, TrainingParams};
pub use env::{build_world, EnvState, TrainingEnv, World};
pub use episode::{parse_steps_csv, run_episode, run_on_world, CsvStep, RunLog, StepRecord};
pub use sweep::{sweep, ArmReport, PairedDifference, SweepReport};

use crate::error::{Error, Result};
use crate::tasks::NodeId;

/// One-step forgetting on previously visited nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Forgetting {
    /// `ΔW_j = curr_j − prev_j` for each distinct previously visited node.
    pub per_node: BTreeMap<NodeId, f64>,
    /// Smallest ΔW, `None` when nothing had been visited.
    pub min: Option<f64>,
    /// `min ≥ ε`, vacuously true with no earlier nodes.
    pub ok: bool,
    pub epsilon: f64,
}

pub fn compute_forgetting(
    prev_acc: &BTreeMap<NodeId, f64>,
    curr_acc: &BTreeMap<NodeId, f64>,
    visited: &[NodeId],
    epsilon: f64,
) -> Result<Forgetting> {
    let mut per_node = BTreeMap::new();
    for &node in visited {
        let prev = prev_acc
            .get(&node)
            .ok_or_else(|| Error::State(format!("no previous accuracy for node {node}")))?;
        let curr = curr_acc
            .get(&node)
            .ok_or_else(|| Error::State(format!("no current accuracy for node {node}")))?;
        per_node.insert(node, curr - prev);
    }
    let min = per_node.values().copied().reduce(f64::min);
    Ok(Forgetting {
        ok: min.is_none_or(|m| m >= epsilon),
        per_node,
        min,
        epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acc(pairs: &[(NodeId, f64)]) -> BTreeMap<NodeId, f64> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn forgetting_examples() {
        let f = compute_forgetting(&acc(&[(1, 0.80)]), &acc(&[(1, 0.72)]), &[1], -0.05).unwrap();
        assert!((f.per_node[&1] + 0.08).abs() < 1e-12);
        assert!((f.min.unwrap() + 0.08).abs() < 1e-12);
        assert!(!f.ok);

        let same = acc(&[(1, 0.5), (2, 0.4)]);
        for eps in [-0.5, -0.05, -1e-9] {
            let f = compute_forgetting(&same, &same, &[1, 2], eps).unwrap();
            assert_eq!(f.min, Some(0.0));
            assert!(f.ok);
        }

        let f = compute_forgetting(
            &acc(&[(1, 0.6), (2, 0.5)]),
            &acc(&[(1, 0.65), (2, 0.48)]),
            &[1, 2],
            -0.05,
        )
        .unwrap();
        assert!((f.min.unwrap() + 0.02).abs() < 1e-12);
        assert!(f.ok);
    }

    #[test]
    fn forgetting_empty_and_missing() {
        let f = compute_forgetting(&acc(&[]), &acc(&[(1, 0.3)]), &[], -0.05).unwrap();
        assert!(f.per_node.is_empty() && f.min.is_none() && f.ok);
        let err = compute_forgetting(&acc(&[(1, 0.3)]), &acc(&[]), &[1], -0.05).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }
}
