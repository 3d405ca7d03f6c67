//! Three-arm ablation: A only, C only, and both.

use serde::{Deserialize, Serialize};

use crate::config::{Arm, RunConfig};
use crate::error::Result;
use crate::synth::Dataset;
use crate::train::{run_on, RunOutcome, RunReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub both_ge_a_only: bool,
    pub both_ge_c_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<RunReport>,
    pub seeds: Vec<SeedComparison>,
    /// Seeds where both-matrix accuracy is at least that of each single arm.
    pub seeds_both_best: usize,
}

impl AblationReport {
    pub fn run(&self, seed: u64, arm: Arm) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.seed == seed && r.arm == arm)
    }

    /// Answer-level scores per arm, one row per arm and seed.
    pub fn table(&self) -> String {
        let mut out = String::from(
            "seed  arm      EM      F1-token  boundary F1  answer acc  epochs\n",
        );
        for r in &self.runs {
            out.push_str(&format!(
                "{:<5} {:<7} {:>7.4} {:>9.4} {:>12.4} {:>11.4} {:>7}\n",
                r.seed,
                r.arm.label(),
                r.em,
                r.f1_token,
                r.boundary_f1,
                r.answer_acc,
                r.epochs
            ));
        }
        out
    }
}

pub fn seeds(cfg: &RunConfig) -> Vec<u64> {
    if cfg.ablation_seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.ablation_seeds.clone()
    }
}

/// Runs every arm for every seed. `splits` supplies the data for a seed; all
/// arms of one seed see the same datasets and the same initial weights.
/// `on_run` sees each finished run.
pub fn run_ablation(
    cfg: &RunConfig,
    mut splits: impl FnMut(&RunConfig) -> Result<[Dataset; 3]>,
    mut on_run: impl FnMut(&RunOutcome) -> Result<()>,
) -> Result<AblationReport> {
    let mut runs = Vec::new();
    let mut comparisons = Vec::new();
    for seed in seeds(cfg) {
        let seeded = cfg.with_seed(seed);
        let [train, val, test] = splits(&seeded)?;
        let mut acc = [0.0; 3];
        for (i, arm) in Arm::ALL.into_iter().enumerate() {
            let outcome = run_on(&seeded.with_arm(arm), &train, &val, &test)?;
            on_run(&outcome)?;
            acc[i] = outcome.report.answer_acc;
            runs.push(outcome.report);
        }
        comparisons.push(SeedComparison {
            seed,
            both_ge_a_only: acc[2] >= acc[0],
            both_ge_c_only: acc[2] >= acc[1],
        });
    }
    let seeds_both_best = comparisons
        .iter()
        .filter(|c| c.both_ge_a_only && c.both_ge_c_only)
        .count();
    Ok(AblationReport {
        runs,
        seeds: comparisons,
        seeds_both_best,
    })
}
