use serde::{Deserialize, Serialize};

/// One execution attempt of a job on the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub dispatch: f64,
    pub end: f64,
    pub evicted: bool,
}

/// Lifecycle of one job. Serialized one record per line by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: u64,
    pub class: usize,
    pub arrival: f64,
    pub attempts: Vec<Attempt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sprint_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sprint_end: Option<f64>,
    pub completion: Option<f64>,
    /// Raw task counts per task stage, before dropping.
    pub task_counts: Vec<usize>,
    /// Counted in class metrics (arrived after warmup).
    pub measured: bool,
}

impl JobRecord {
    pub fn response(&self) -> Option<f64> {
        self.completion.map(|c| c - self.arrival)
    }

    /// Time between arrival and the start of the completed attempt.
    pub fn queueing(&self) -> Option<f64> {
        let last = self.attempts.last()?;
        self.completion.map(|_| last.dispatch - self.arrival)
    }

    /// Duration of the completed attempt.
    pub fn execution(&self) -> Option<f64> {
        let last = self.attempts.last()?;
        self.completion.map(|c| c - last.dispatch)
    }

    pub fn evictions(&self) -> usize {
        self.attempts.iter().filter(|a| a.evicted).count()
    }

    pub fn sprint_duration(&self) -> f64 {
        match (self.sprint_start, self.sprint_end) {
            (Some(s), Some(e)) => e - s,
            _ => 0.0,
        }
    }
}

pub type EventLog = Vec<JobRecord>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub priority: u32,
    pub jobs: usize,
    pub mean_response_s: f64,
    pub p95_response_s: f64,
    pub mean_queueing_s: f64,
    pub mean_execution_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationMetrics {
    pub classes: Vec<ClassMetrics>,
    /// Machine time on evicted attempts over total machine time.
    pub resource_waste: f64,
    pub energy_j: f64,
    pub busy_time_s: f64,
    pub sprint_time_s: f64,
    pub wasted_time_s: f64,
    pub idle_time_s: f64,
    /// Time of the last event (end of drain).
    pub makespan_s: f64,
    pub evictions: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub log: EventLog,
}

/// Nearest-rank percentile of an ascending slice.
pub(crate) fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}
