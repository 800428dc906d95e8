//! Discrete-event simulation of a single-engine priority cluster.
//!
//! One job at a time seizes all `C` slots. Arriving jobs wait in FCFS
//! buffers, one per class; the engine always takes the head of the highest
//! non-empty buffer. Depending on the policy, higher-priority arrivals
//! evict the running job (which restarts from scratch later), tasks are
//! dropped before execution, and a per-class timer may sprint the running
//! job under a replenishing energy budget.

mod audit;
mod engine;
mod metrics;
mod plan;
mod replicate;

pub use audit::{audit_run, energy_from_log, AuditError};
pub use engine::run;
pub use metrics::{Attempt, ClassMetrics, EventLog, JobRecord, SimulationMetrics};
pub use replicate::{replicate, replicate_with, ClassSummary, Estimate, Replication, ReplicatedMetrics};

use thiserror::Error;

use crate::arrivals::{ArrivalError, MarkedArrivalProcess};
use crate::job_model::{
    build_stage_ph, build_task_level_ph, build_wave_level_ph, check_theta, effective_tasks, overhead_mean,
    wave_count, wave_probabilities, ClusterSpec, JobClassSpec, JobModelError, TaskCountPmf, WaveProfile,
};
use crate::phase_type::{PhaseTypeDist, PhaseTypeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("no job completed after warmup")]
    HorizonTooShort,
    #[error(transparent)]
    JobModel(#[from] JobModelError),
    #[error(transparent)]
    Arrival(#[from] ArrivalError),
    #[error(transparent)]
    PhaseType(#[from] PhaseTypeError),
}

pub type Result<T> = std::result::Result<T, SimError>;

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidScenario(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Preemptive,
    NonPreemptive,
    DifferentialApprox,
    DiasFull,
}

impl PolicyKind {
    pub fn evicts(self) -> bool {
        self == PolicyKind::Preemptive
    }

    pub fn drops(self) -> bool {
        matches!(self, PolicyKind::DifferentialApprox | PolicyKind::DiasFull)
    }
}

/// Map and reduce drop ratios for one class.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DropRatios {
    pub map: f64,
    pub reduce: f64,
}

impl DropRatios {
    pub const NONE: DropRatios = DropRatios { map: 0.0, reduce: 0.0 };

    pub fn map_only(map: f64) -> Self {
        Self { map, reduce: 0.0 }
    }

    pub fn is_zero(&self) -> bool {
        self.map == 0.0 && self.reduce == 0.0
    }
}

/// Sprint timers and energy budget.
#[derive(Debug, Clone, PartialEq)]
pub struct SprintConfig {
    /// Per class delay after dispatch before sprinting; `None` never sprints.
    pub timeouts: Vec<Option<f64>>,
    /// Execution-rate multiplier while sprinting.
    pub speed_factor: f64,
    /// Joules available at time zero.
    pub budget: f64,
    /// Joules per second regained while not sprinting.
    pub replenish_rate: f64,
    pub budget_cap: f64,
}

impl SprintConfig {
    fn validate(&self, classes: usize, power: &PowerModel) -> Result<()> {
        if self.timeouts.len() != classes {
            return Err(invalid(format!(
                "sprint timeouts cover {} classes, scenario has {classes}",
                self.timeouts.len()
            )));
        }
        if self.timeouts.iter().flatten().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(invalid("sprint timeouts must be finite and nonnegative"));
        }
        if !(self.speed_factor > 1.0) || !self.speed_factor.is_finite() {
            return Err(invalid("speed_factor must exceed 1"));
        }
        if !(power.sprint_w > power.base_w) {
            return Err(invalid("sprint power must exceed base power"));
        }
        if !(self.budget >= 0.0) || !(self.replenish_rate >= 0.0) || !(self.budget_cap >= 0.0) {
            return Err(invalid("sprint budget, replenish rate and cap must be nonnegative"));
        }
        Ok(())
    }
}

/// Cluster power draw in watts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerModel {
    pub idle_w: f64,
    pub base_w: f64,
    pub sprint_w: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        Self {
            idle_w: 0.0,
            base_w: 180.0,
            sprint_w: 270.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulingPolicy {
    pub kind: PolicyKind,
    pub drop_ratios: Vec<DropRatios>,
    pub sprint: Option<SprintConfig>,
}

impl SchedulingPolicy {
    pub fn preemptive(classes: usize) -> Self {
        Self {
            kind: PolicyKind::Preemptive,
            drop_ratios: vec![DropRatios::NONE; classes],
            sprint: None,
        }
    }

    pub fn non_preemptive(classes: usize) -> Self {
        Self {
            kind: PolicyKind::NonPreemptive,
            drop_ratios: vec![DropRatios::NONE; classes],
            sprint: None,
        }
    }

    pub fn differential_approx(drop_ratios: Vec<DropRatios>) -> Self {
        Self {
            kind: PolicyKind::DifferentialApprox,
            drop_ratios,
            sprint: None,
        }
    }

    pub fn dias_full(drop_ratios: Vec<DropRatios>, sprint: SprintConfig) -> Self {
        Self {
            kind: PolicyKind::DiasFull,
            drop_ratios,
            sprint: Some(sprint),
        }
    }

    pub fn validate(&self, classes: usize, power: &PowerModel) -> Result<()> {
        if self.drop_ratios.len() != classes {
            return Err(invalid(format!(
                "policy has drop ratios for {} classes, scenario has {classes}",
                self.drop_ratios.len()
            )));
        }
        for r in &self.drop_ratios {
            check_theta(r.map)?;
            check_theta(r.reduce)?;
        }
        if !self.kind.drops() && self.drop_ratios.iter().any(|r| !r.is_zero()) {
            return Err(invalid("P and NP policies cannot drop tasks"));
        }
        match (self.kind, &self.sprint) {
            (PolicyKind::DiasFull, Some(s)) => s.validate(classes, power)?,
            (PolicyKind::DiasFull, None) => return Err(invalid("DiasFull requires a sprint configuration")),
            (_, Some(_)) => return Err(invalid("only DiasFull may sprint")),
            (_, None) => {}
        }
        Ok(())
    }
}

/// How task and stage durations are drawn.
#[derive(Debug, Clone)]
// one per class, so the size of the wave variant does not matter
#[allow(clippy::large_enum_variant)]
pub enum TaskTiming {
    /// i.i.d. exponential per task, rates from the class description.
    Exponential,
    /// Every task and stage takes exactly its mean `1/rate`.
    Deterministic,
    /// Wave-level draws: every task in a wave shares the wave's duration.
    Waves(WaveProfile),
}

/// Which drop ratio applies to a task stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropTarget {
    Map,
    Reduce,
    Never,
}

/// One step of a job's execution chain.
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    /// Setup or shuffle: a single serial piece of work.
    Serial { rate: f64 },
    /// A stage of parallel tasks executed over the cluster slots.
    Tasks {
        count: TaskCountPmf,
        rate: f64,
        drop: DropTarget,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum JobShape {
    /// Setup, map, shuffle and reduce.
    MapReduce(JobClassSpec),
    /// Arbitrary series of serial and task steps. The first serial step,
    /// if any, is treated as setup for overhead interpolation.
    Chain(Vec<Step>),
}

/// Mean setup times at 0% and 90% drop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadInterpolation {
    pub at_0: f64,
    pub at_90: f64,
}

#[derive(Debug, Clone)]
pub struct ClassWorkload {
    pub name: String,
    /// Higher is more important; must be distinct across classes.
    pub priority: u32,
    pub shape: JobShape,
    pub timing: TaskTiming,
    pub overhead: Option<OverheadInterpolation>,
}

impl ClassWorkload {
    /// Execution chain for this class.
    pub fn steps(&self) -> Vec<Step> {
        match &self.shape {
            JobShape::MapReduce(spec) => vec![
                Step::Serial {
                    rate: spec.mu_overhead,
                },
                Step::Tasks {
                    count: spec.map_count.clone(),
                    rate: spec.mu_map,
                    drop: DropTarget::Map,
                },
                Step::Serial {
                    rate: spec.mu_shuffle,
                },
                Step::Tasks {
                    count: spec.reduce_count.clone(),
                    rate: spec.mu_reduce,
                    drop: DropTarget::Reduce,
                },
            ],
            JobShape::Chain(steps) => steps.clone(),
        }
    }

    fn validate(&self, cluster: &ClusterSpec) -> Result<()> {
        let steps = self.steps();
        if steps.is_empty() {
            return Err(invalid(format!("class {} has no execution steps", self.name)));
        }
        if let JobShape::MapReduce(spec) = &self.shape {
            spec.validate()?;
        }
        for s in &steps {
            let rate = match s {
                Step::Serial { rate } | Step::Tasks { rate, .. } => *rate,
            };
            if !(rate > 0.0) || !rate.is_finite() {
                return Err(JobModelError::NonPositiveRate {
                    name: "step rate",
                    value: rate,
                }
                .into());
            }
        }
        if let Some(o) = &self.overhead {
            overhead_mean(0.0, o.at_0, o.at_90)?;
        }
        if let TaskTiming::Waves(profile) = &self.timing {
            let JobShape::MapReduce(spec) = &self.shape else {
                return Err(invalid("wave timing needs a map-reduce class"));
            };
            // worst case is no dropping
            let dm = wave_count(spec.map_count.max_support(), cluster);
            let dr = wave_count(spec.reduce_count.max_support(), cluster);
            if profile.map_waves.len() < dm || profile.reduce_waves.len() < dr {
                return Err(JobModelError::ProfileTooShort {
                    stage: if profile.map_waves.len() < dm { "map" } else { "reduce" },
                    needed: if profile.map_waves.len() < dm { dm } else { dr },
                    available: if profile.map_waves.len() < dm {
                        profile.map_waves.len()
                    } else {
                        profile.reduce_waves.len()
                    },
                }
                .into());
            }
        }
        Ok(())
    }

    /// Mean setup time after interpolation at `theta_map`, if configured.
    pub fn setup_mean(&self, theta_map: f64) -> Result<Option<f64>> {
        match &self.overhead {
            Some(o) => Ok(Some(overhead_mean(theta_map, o.at_0, o.at_90)?)),
            None => Ok(None),
        }
    }

    /// Analytic description with the given drop ratios and the overhead
    /// interpolation folded into `mu_overhead`.
    pub fn analytic_spec(&self, drops: DropRatios) -> Result<Option<JobClassSpec>> {
        let JobShape::MapReduce(spec) = &self.shape else {
            return Ok(None);
        };
        let mut spec = JobClassSpec {
            priority: self.priority,
            theta_map: drops.map,
            theta_reduce: drops.reduce,
            ..spec.clone()
        };
        if let Some(m) = self.setup_mean(drops.map)? {
            spec.mu_overhead = 1.0 / m;
        }
        Ok(Some(spec))
    }

    /// Phase-type processing time under the class timing model, when one
    /// exists (deterministic timing has none).
    pub fn processing_ph(&self, cluster: &ClusterSpec, drops: DropRatios) -> Result<Option<PhaseTypeDist>> {
        match &self.timing {
            TaskTiming::Deterministic => Ok(None),
            TaskTiming::Waves(profile) => {
                let spec = self.analytic_spec(drops)?.ok_or_else(|| invalid("wave timing needs a map-reduce class"))?;
                let mut profile = profile.clone();
                if let Some(m) = self.setup_mean(drops.map)? {
                    profile.setup = profile.setup.with_mean(m)?;
                }
                let qm = wave_probabilities(&spec.map_count, drops.map, cluster)?;
                let qr = wave_probabilities(&spec.reduce_count, drops.reduce, cluster)?;
                Ok(Some(build_wave_level_ph(&profile, &qm, &qr)?))
            }
            TaskTiming::Exponential => {
                if let Some(spec) = self.analytic_spec(drops)? {
                    return Ok(Some(build_task_level_ph(&spec, cluster)?));
                }
                let setup_mean = self.setup_mean(drops.map)?;
                let mut acc: Option<PhaseTypeDist> = None;
                let mut first_serial = true;
                for step in self.steps() {
                    let ph = match step {
                        Step::Serial { rate } => {
                            let rate = match (first_serial, setup_mean) {
                                (true, Some(m)) => 1.0 / m,
                                _ => rate,
                            };
                            first_serial = false;
                            PhaseTypeDist::exponential(rate)?
                        }
                        Step::Tasks { count, rate, drop } => {
                            build_stage_ph(&count, rate, drops.theta_for(drop), cluster)?
                        }
                    };
                    acc = Some(match acc {
                        None => ph,
                        Some(a) => a.convolve(&ph),
                    });
                }
                Ok(acc)
            }
        }
    }

    /// Mean processing time under the class timing model.
    pub fn mean_service(&self, cluster: &ClusterSpec, drops: DropRatios) -> Result<f64> {
        if let TaskTiming::Waves(_) = self.timing {
            let ph = self.processing_ph(cluster, drops)?.ok_or_else(|| invalid("wave timing needs a map-reduce class"))?;
            return Ok(ph.mean()?);
        }
        let exponential = matches!(self.timing, TaskTiming::Exponential);
        let setup_mean = self.setup_mean(drops.map)?;
        let mut first_serial = true;
        let mut total = 0.0;
        for step in self.steps() {
            match step {
                Step::Serial { rate } => {
                    total += match (first_serial, setup_mean) {
                        (true, Some(m)) => m,
                        _ => 1.0 / rate,
                    };
                    first_serial = false;
                }
                Step::Tasks { count, rate, drop } => {
                    let theta = drops.theta_for(drop);
                    for (n, p) in count.iter() {
                        let n = effective_tasks(n, theta)?;
                        total += p * if exponential {
                            // k tasks left complete at rate min(k, C) * rate
                            (1..=n).map(|k| 1.0 / (k.min(cluster.slots) as f64 * rate)).sum::<f64>()
                        } else {
                            // equal tasks run in full waves
                            wave_count(n, cluster) as f64 / rate
                        };
                    }
                }
            }
        }
        Ok(total)
    }
}

impl DropRatios {
    pub fn theta_for(&self, target: DropTarget) -> f64 {
        match target {
            DropTarget::Map => self.map,
            DropTarget::Reduce => self.reduce,
            DropTarget::Never => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum ArrivalSource {
    Mmap(MarkedArrivalProcess),
    /// Explicit `(time, class index)` pairs in nondecreasing time order.
    Trace(Vec<(f64, usize)>),
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub cluster: ClusterSpec,
    pub classes: Vec<ClassWorkload>,
    pub arrivals: ArrivalSource,
    pub policy: SchedulingPolicy,
    pub power: PowerModel,
    /// Arrivals stop at the horizon; the system then drains.
    pub horizon: f64,
    /// Jobs arriving before this time are excluded from class metrics.
    pub warmup: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.cluster.slots == 0 {
            return Err(JobModelError::ZeroSlots.into());
        }
        if self.classes.is_empty() {
            return Err(invalid("scenario has no job classes"));
        }
        for c in &self.classes {
            c.validate(&self.cluster)?;
        }
        let mut prios: Vec<u32> = self.classes.iter().map(|c| c.priority).collect();
        prios.sort_unstable();
        if prios.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("class priorities must be distinct"));
        }
        match &self.arrivals {
            ArrivalSource::Mmap(p) => {
                if p.num_classes() != self.classes.len() {
                    return Err(invalid(format!(
                        "arrival process marks {} classes, scenario has {}",
                        p.num_classes(),
                        self.classes.len()
                    )));
                }
            }
            ArrivalSource::Trace(t) => {
                if t.iter().any(|&(time, c)| c >= self.classes.len() || !(time >= 0.0)) {
                    return Err(invalid("trace arrival has an unknown class or negative time"));
                }
                if t.windows(2).any(|w| w[1].0 < w[0].0) {
                    return Err(invalid("trace arrivals must be in time order"));
                }
            }
        }
        if !(self.horizon > self.warmup) || !(self.warmup >= 0.0) || !self.horizon.is_finite() {
            return Err(invalid("need horizon > warmup >= 0"));
        }
        if !(self.power.idle_w >= 0.0) || !(self.power.base_w >= 0.0) || !(self.power.sprint_w >= 0.0) {
            return Err(invalid("power draws must be nonnegative"));
        }
        self.policy.validate(self.classes.len(), &self.power)?;
        Ok(())
    }

    /// Mean processing time per class under this scenario's policy.
    pub fn mean_service(&self) -> Result<Vec<f64>> {
        self.classes
            .iter()
            .zip(&self.policy.drop_ratios)
            .map(|(c, d)| c.mean_service(&self.cluster, *d))
            .collect()
    }

    /// Mean processing time per class with no dropping.
    pub fn baseline_mean_service(&self) -> Result<Vec<f64>> {
        self.classes
            .iter()
            .map(|c| c.mean_service(&self.cluster, DropRatios::NONE))
            .collect()
    }

    /// Offered load of this policy's deflated workload.
    pub fn offered_load(&self) -> Result<f64> {
        match &self.arrivals {
            ArrivalSource::Mmap(p) => Ok(p.offered_load(&self.mean_service()?)?),
            ArrivalSource::Trace(_) => Err(invalid("offered load needs a stochastic arrival process")),
        }
    }

    /// Rescales the arrival process so the undeflated workload offers
    /// `target_rho`.
    pub fn calibrated(mut self, target_rho: f64) -> Result<Self> {
        let ArrivalSource::Mmap(p) = &self.arrivals else {
            return Err(invalid("only stochastic arrivals can be calibrated"));
        };
        let calibrated = p.calibrate_for_utilization(&self.baseline_mean_service()?, target_rho)?;
        self.arrivals = ArrivalSource::Mmap(calibrated);
        Ok(self)
    }

    /// Same workload and arrivals under another policy.
    pub fn with_policy(&self, policy: SchedulingPolicy) -> Self {
        Self {
            policy,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Class indices from highest to lowest priority.
    pub fn priority_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.classes.len()).collect();
        idx.sort_by(|&a, &b| self.classes[b].priority.cmp(&self.classes[a].priority));
        idx
    }
}
