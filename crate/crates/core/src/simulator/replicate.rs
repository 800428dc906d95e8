//! Independent replications and confidence intervals.

use serde::{Deserialize, Serialize};

use super::metrics::SimulationMetrics;
use super::{run, Result, Scenario};
use crate::exec::Execution;

/// Sample mean with a 95% normal-approximation half width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                half_width: f64::NAN,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self { mean, half_width: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            half_width: 1.96 * var.sqrt() / (n as f64).sqrt(),
        }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }

    pub fn overlaps(&self, other: &Estimate) -> bool {
        self.lower() <= other.upper() && other.lower() <= self.upper()
    }

    /// True when this interval lies entirely below `other`.
    pub fn below(&self, other: &Estimate) -> bool {
        self.upper() < other.lower()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub name: String,
    pub priority: u32,
    pub mean_response_s: Estimate,
    pub p95_response_s: Estimate,
    pub mean_queueing_s: Estimate,
    pub mean_execution_s: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicatedMetrics {
    pub runs: usize,
    pub classes: Vec<ClassSummary>,
    pub resource_waste: Estimate,
    pub energy_j: Estimate,
    pub sprint_time_s: Estimate,
}

impl ReplicatedMetrics {
    pub fn from_runs(runs: &[SimulationMetrics]) -> Self {
        let est = |f: &dyn Fn(&SimulationMetrics) -> f64| Estimate::from_samples(&runs.iter().map(f).collect::<Vec<_>>());
        let classes = match runs.first() {
            None => Vec::new(),
            Some(first) => (0..first.classes.len())
                .map(|k| ClassSummary {
                    name: first.classes[k].name.clone(),
                    priority: first.classes[k].priority,
                    mean_response_s: est(&|m| m.classes[k].mean_response_s),
                    p95_response_s: est(&|m| m.classes[k].p95_response_s),
                    mean_queueing_s: est(&|m| m.classes[k].mean_queueing_s),
                    mean_execution_s: est(&|m| m.classes[k].mean_execution_s),
                })
                .collect(),
        };
        Self {
            runs: runs.len(),
            classes,
            resource_waste: est(&|m| m.resource_waste),
            energy_j: est(&|m| m.energy_j),
            sprint_time_s: est(&|m| m.sprint_time_s),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Replication {
    pub runs: Vec<SimulationMetrics>,
    pub summary: ReplicatedMetrics,
}

/// Runs `n` replications with seeds `seed, seed+1, ...`.
pub fn replicate(scenario: &Scenario, n: usize) -> Result<Replication> {
    replicate_with(scenario, n, Execution::default())
}

pub fn replicate_with(scenario: &Scenario, n: usize, exec: Execution) -> Result<Replication> {
    scenario.validate()?;
    let seeds: Vec<u64> = (0..n as u64).map(|i| scenario.seed.wrapping_add(i)).collect();
    let runs = exec
        .map(seeds, |s| run(&scenario.with_seed(s)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let summary = ReplicatedMetrics::from_runs(&runs);
    Ok(Replication { runs, summary })
}
