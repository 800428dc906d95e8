//! JSON scenario and metrics documents. Every time, rate, power and energy
//! key carries its unit as a suffix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arrivals::{ArrivalError, MarkedArrivalProcess};
use crate::job_model::{ClusterSpec, JobClassSpec, JobModelError, TaskCountPmf, WaveProfile};
use crate::phase_type::PhaseTypeDist;
use crate::simulator::{
    ArrivalSource, ClassWorkload, DropRatios, DropTarget, JobShape, OverheadInterpolation, PowerModel,
    ReplicatedMetrics, Scenario, SchedulingPolicy, SimError, SimulationMetrics, SprintConfig, Step, TaskTiming,
};

#[derive(Debug, Error)]
pub enum DocumentError {
    #[error("{0}")]
    Parse(#[from] serde_json::Error),
    #[error("{field} must be positive, got {value}")]
    RateNonPositive { field: String, value: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Scenario(SimError),
}

impl DocumentError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            DocumentError::Parse(_) => "SCHEMA_PARSE",
            DocumentError::RateNonPositive { .. } => "SCHEMA_RATE_NONPOSITIVE",
            DocumentError::Scenario(SimError::JobModel(JobModelError::NonPositiveRate { .. }))
            | DocumentError::Scenario(SimError::Arrival(ArrivalError::InvalidRate(_))) => "SCHEMA_RATE_NONPOSITIVE",
            DocumentError::Scenario(SimError::JobModel(JobModelError::DropRatioOutOfRange(_))) => {
                "SCHEMA_DROP_RATIO_RANGE"
            }
            DocumentError::Invalid(_) | DocumentError::Scenario(_) => "SCHEMA_INVALID",
        }
    }
}

impl From<SimError> for DocumentError {
    fn from(e: SimError) -> Self {
        DocumentError::Scenario(e)
    }
}

impl From<JobModelError> for DocumentError {
    fn from(e: JobModelError) -> Self {
        DocumentError::Scenario(e.into())
    }
}

impl From<ArrivalError> for DocumentError {
    fn from(e: ArrivalError) -> Self {
        DocumentError::Scenario(e.into())
    }
}

impl From<crate::phase_type::PhaseTypeError> for DocumentError {
    fn from(e: crate::phase_type::PhaseTypeError) -> Self {
        DocumentError::Scenario(e.into())
    }
}

pub type Result<T> = std::result::Result<T, DocumentError>;

fn positive(field: impl Into<String>, value: f64) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(DocumentError::RateNonPositive {
            field: field.into(),
            value,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PhDoc {
    Exponential {
        mean_s: f64,
    },
    Erlang {
        phases: usize,
        mean_s: f64,
    },
    General {
        initial: Vec<f64>,
        subgenerator_per_s: Vec<Vec<f64>>,
    },
}

impl PhDoc {
    fn build(&self, field: &str) -> Result<PhaseTypeDist> {
        Ok(match self {
            PhDoc::Exponential { mean_s } => PhaseTypeDist::exponential(1.0 / positive(field, *mean_s)?)?,
            PhDoc::Erlang { phases, mean_s } => {
                let m = positive(field, *mean_s)?;
                PhaseTypeDist::erlang(*phases, *phases as f64 / m)?
            }
            PhDoc::General {
                initial,
                subgenerator_per_s,
            } => PhaseTypeDist::from_rows(initial, subgenerator_per_s)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CountDoc {
    Point(usize),
    /// Inclusive range.
    Uniform([usize; 2]),
    /// Entry `i` is the probability of `i + 1` tasks.
    Pmf(Vec<f64>),
}

impl CountDoc {
    fn build(&self) -> Result<TaskCountPmf> {
        Ok(match self {
            CountDoc::Point(n) => TaskCountPmf::point(*n)?,
            CountDoc::Uniform([lo, hi]) => TaskCountPmf::uniform(*lo, *hi)?,
            CountDoc::Pmf(p) => TaskCountPmf::new(p.clone())?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropDoc {
    Map,
    Reduce,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StepDoc {
    Serial { rate_per_s: f64 },
    Tasks { count: CountDoc, rate_per_s: f64, drop: DropDoc },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JobDoc {
    MapReduce {
        map_tasks: CountDoc,
        reduce_tasks: CountDoc,
        setup_rate_per_s: f64,
        map_rate_per_s: f64,
        shuffle_rate_per_s: f64,
        reduce_rate_per_s: f64,
    },
    Chain {
        steps: Vec<StepDoc>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimingDoc {
    Exponential,
    Deterministic,
    Waves {
        setup: PhDoc,
        map_waves: Vec<PhDoc>,
        shuffle: PhDoc,
        reduce_waves: Vec<PhDoc>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverheadDoc {
    pub at_0_s: f64,
    pub at_90_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDoc {
    pub name: String,
    /// Higher is more important.
    pub priority: u32,
    pub job: JobDoc,
    pub timing: TimingDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overhead: Option<OverheadDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceJob {
    pub time_s: f64,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalsDoc {
    MarkedPoisson {
        rates_per_s: Vec<f64>,
    },
    Mmap {
        d0_per_s: Vec<Vec<f64>>,
        marked_per_s: Vec<Vec<Vec<f64>>>,
    },
    Trace {
        jobs: Vec<TraceJob>,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropRatiosDoc {
    #[serde(default)]
    pub map: f64,
    #[serde(default)]
    pub reduce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SprintDoc {
    /// `null` disables sprinting for that class.
    pub timeouts_s: Vec<Option<f64>>,
    pub speed_factor: f64,
    pub budget_j: f64,
    pub replenish_rate_j_per_s: f64,
    pub budget_cap_j: f64,
}

impl SprintDoc {
    fn build(&self) -> SprintConfig {
        SprintConfig {
            timeouts: self.timeouts_s.clone(),
            speed_factor: self.speed_factor,
            budget: self.budget_j,
            replenish_rate: self.replenish_rate_j_per_s,
            budget_cap: self.budget_cap_j,
        }
    }

    fn from_config(s: &SprintConfig) -> Self {
        Self {
            timeouts_s: s.timeouts.clone(),
            speed_factor: s.speed_factor,
            budget_j: s.budget,
            replenish_rate_j_per_s: s.replenish_rate,
            budget_cap_j: s.budget_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyDoc {
    Preemptive,
    NonPreemptive,
    DifferentialApprox { drop_ratios: Vec<DropRatiosDoc> },
    DiasFull { drop_ratios: Vec<DropRatiosDoc>, sprint: SprintDoc },
}

impl PolicyDoc {
    fn build(&self, classes: usize) -> SchedulingPolicy {
        let drops = |d: &[DropRatiosDoc]| {
            d.iter()
                .map(|r| DropRatios {
                    map: r.map,
                    reduce: r.reduce,
                })
                .collect()
        };
        match self {
            PolicyDoc::Preemptive => SchedulingPolicy::preemptive(classes),
            PolicyDoc::NonPreemptive => SchedulingPolicy::non_preemptive(classes),
            PolicyDoc::DifferentialApprox { drop_ratios } => SchedulingPolicy::differential_approx(drops(drop_ratios)),
            PolicyDoc::DiasFull { drop_ratios, sprint } => SchedulingPolicy::dias_full(drops(drop_ratios), sprint.build()),
        }
    }

    pub fn from_policy(p: &SchedulingPolicy) -> Self {
        use crate::simulator::PolicyKind;
        let drops = p
            .drop_ratios
            .iter()
            .map(|d| DropRatiosDoc {
                map: d.map,
                reduce: d.reduce,
            })
            .collect();
        match (p.kind, &p.sprint) {
            (PolicyKind::Preemptive, _) => PolicyDoc::Preemptive,
            (PolicyKind::NonPreemptive, _) => PolicyDoc::NonPreemptive,
            (PolicyKind::DiasFull, Some(s)) => PolicyDoc::DiasFull {
                drop_ratios: drops,
                sprint: SprintDoc::from_config(s),
            },
            _ => PolicyDoc::DifferentialApprox { drop_ratios: drops },
        }
    }

    /// Short label such as `DA(0,0.2)`.
    pub fn label(&self) -> String {
        let ratios = |d: &[DropRatiosDoc]| {
            d.iter()
                .map(|r| {
                    if r.reduce == 0.0 {
                        format!("{}", r.map)
                    } else {
                        format!("{}/{}", r.map, r.reduce)
                    }
                })
                .collect::<Vec<_>>()
                .join(",")
        };
        match self {
            PolicyDoc::Preemptive => "P".into(),
            PolicyDoc::NonPreemptive => "NP".into(),
            PolicyDoc::DifferentialApprox { drop_ratios } => format!("DA({})", ratios(drop_ratios)),
            PolicyDoc::DiasFull { drop_ratios, .. } => format!("DiAS({})", ratios(drop_ratios)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerDoc {
    #[serde(default)]
    pub idle_w: f64,
    pub base_w: f64,
    pub sprint_w: f64,
}

impl Default for PowerDoc {
    fn default() -> Self {
        let p = PowerModel::default();
        Self {
            idle_w: p.idle_w,
            base_w: p.base_w,
            sprint_w: p.sprint_w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    #[serde(default)]
    pub name: String,
    pub slots: usize,
    pub classes: Vec<ClassDoc>,
    pub arrivals: ArrivalsDoc,
    /// When set, arrivals are rescaled so the undeflated workload offers
    /// this load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_utilization: Option<f64>,
    pub policy: PolicyDoc,
    #[serde(default)]
    pub power: PowerDoc,
    pub horizon_s: f64,
    /// Defaults to 10% of the horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_s: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn build_class(doc: &ClassDoc) -> Result<ClassWorkload> {
    let field = |f: &str| format!("classes[{}].{f}", doc.name);
    let shape = match &doc.job {
        JobDoc::MapReduce {
            map_tasks,
            reduce_tasks,
            setup_rate_per_s,
            map_rate_per_s,
            shuffle_rate_per_s,
            reduce_rate_per_s,
        } => JobShape::MapReduce(JobClassSpec {
            priority: doc.priority,
            map_count: map_tasks.build()?,
            reduce_count: reduce_tasks.build()?,
            mu_map: positive(field("map_rate_per_s"), *map_rate_per_s)?,
            mu_reduce: positive(field("reduce_rate_per_s"), *reduce_rate_per_s)?,
            mu_overhead: positive(field("setup_rate_per_s"), *setup_rate_per_s)?,
            mu_shuffle: positive(field("shuffle_rate_per_s"), *shuffle_rate_per_s)?,
            theta_map: 0.0,
            theta_reduce: 0.0,
        }),
        JobDoc::Chain { steps } => JobShape::Chain(
            steps
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    Ok(match s {
                        StepDoc::Serial { rate_per_s } => Step::Serial {
                            rate: positive(field(&format!("steps[{i}].rate_per_s")), *rate_per_s)?,
                        },
                        StepDoc::Tasks {
                            count,
                            rate_per_s,
                            drop,
                        } => Step::Tasks {
                            count: count.build()?,
                            rate: positive(field(&format!("steps[{i}].rate_per_s")), *rate_per_s)?,
                            drop: match drop {
                                DropDoc::Map => DropTarget::Map,
                                DropDoc::Reduce => DropTarget::Reduce,
                                DropDoc::Never => DropTarget::Never,
                            },
                        },
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let timing = match &doc.timing {
        TimingDoc::Exponential => TaskTiming::Exponential,
        TimingDoc::Deterministic => TaskTiming::Deterministic,
        TimingDoc::Waves {
            setup,
            map_waves,
            shuffle,
            reduce_waves,
        } => TaskTiming::Waves(WaveProfile {
            setup: setup.build(&field("timing.setup"))?,
            map_waves: map_waves
                .iter()
                .map(|w| w.build(&field("timing.map_waves")))
                .collect::<Result<_>>()?,
            shuffle: shuffle.build(&field("timing.shuffle"))?,
            reduce_waves: reduce_waves
                .iter()
                .map(|w| w.build(&field("timing.reduce_waves")))
                .collect::<Result<_>>()?,
        }),
    };
    Ok(ClassWorkload {
        name: doc.name.clone(),
        priority: doc.priority,
        shape,
        timing,
        overhead: doc.overhead.as_ref().map(|o| OverheadInterpolation {
            at_0: o.at_0_s,
            at_90: o.at_90_s,
        }),
    })
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(DocumentError::Invalid(format!("{what} must be a nonempty square matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl ScenarioDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("documents serialize")
    }

    /// Hex SHA-256 of the canonical (compact) serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("documents serialize");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Builds and validates the scenario, applying the utilization target.
    pub fn to_scenario(&self) -> Result<Scenario> {
        let cluster = ClusterSpec::new(self.slots)?;
        let classes = self
            .classes
            .iter()
            .map(build_class)
            .collect::<Result<Vec<_>>>()?;
        let arrivals = match &self.arrivals {
            ArrivalsDoc::MarkedPoisson { rates_per_s } => {
                for (k, r) in rates_per_s.iter().enumerate() {
                    if !(*r >= 0.0) || !r.is_finite() {
                        return Err(DocumentError::RateNonPositive {
                            field: format!("arrivals.rates_per_s[{k}]"),
                            value: *r,
                        });
                    }
                }
                ArrivalSource::Mmap(MarkedArrivalProcess::marked_poisson(rates_per_s)?)
            }
            ArrivalsDoc::Mmap { d0_per_s, marked_per_s } => {
                let d0 = matrix(d0_per_s, "arrivals.d0_per_s")?;
                let marked = marked_per_s
                    .iter()
                    .map(|m| matrix(m, "arrivals.marked_per_s"))
                    .collect::<Result<Vec<_>>>()?;
                ArrivalSource::Mmap(MarkedArrivalProcess::new(d0, marked)?)
            }
            ArrivalsDoc::Trace { jobs } => ArrivalSource::Trace(jobs.iter().map(|j| (j.time_s, j.class)).collect()),
        };
        let power = PowerModel {
            idle_w: self.power.idle_w,
            base_w: self.power.base_w,
            sprint_w: self.power.sprint_w,
        };
        let mut scenario = Scenario {
            cluster,
            classes,
            arrivals,
            policy: self.policy.build(self.classes.len()),
            power,
            horizon: self.horizon_s,
            warmup: self.warmup_s.unwrap_or(0.1 * self.horizon_s),
            seed: self.seed,
        };
        scenario.validate()?;
        if let Some(rho) = self.target_utilization {
            scenario = scenario.calibrated(rho)?;
        }
        Ok(scenario)
    }
}

/// Single-run metrics without the event log.
fn strip(mut m: SimulationMetrics) -> SimulationMetrics {
    m.log.clear();
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsDocument {
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub policy: String,
    pub runs: usize,
    pub summary: ReplicatedMetrics,
    pub per_run: Vec<SimulationMetrics>,
}

impl MetricsDocument {
    pub fn new(doc: &ScenarioDocument, runs: Vec<SimulationMetrics>) -> Self {
        let per_run: Vec<SimulationMetrics> = runs.into_iter().map(strip).collect();
        Self {
            scenario: doc.name.clone(),
            scenario_hash: doc.hash(),
            seed: doc.seed,
            policy: doc.policy.label(),
            runs: per_run.len(),
            summary: ReplicatedMetrics::from_runs(&per_run),
            per_run,
        }
    }
}

/// Plain-text summary recomputed from the per-run metrics.
pub fn summary_table(doc: &MetricsDocument) -> String {
    let s = ReplicatedMetrics::from_runs(&doc.per_run);
    let mut out = format!(
        "scenario {} ({}) seed {} runs {} policy {}\n",
        doc.scenario,
        &doc.scenario_hash[..doc.scenario_hash.len().min(12)],
        doc.seed,
        s.runs,
        doc.policy
    );
    out.push_str(&format!(
        "{:<10} {:>9} {:>22} {:>22} {:>22} {:>22}\n",
        "class", "priority", "mean_response_s", "p95_response_s", "mean_queueing_s", "mean_execution_s"
    ));
    let e = |x: &crate::simulator::Estimate| format!("{:.4} ± {:.4}", x.mean, x.half_width);
    for c in &s.classes {
        out.push_str(&format!(
            "{:<10} {:>9} {:>22} {:>22} {:>22} {:>22}\n",
            c.name,
            c.priority,
            e(&c.mean_response_s),
            e(&c.p95_response_s),
            e(&c.mean_queueing_s),
            e(&c.mean_execution_s)
        ));
    }
    out.push_str(&format!(
        "resource_waste {}  energy_j {}  sprint_time_s {}\n",
        e(&s.resource_waste),
        e(&s.energy_j),
        e(&s.sprint_time_s)
    ));
    out
}

/// Mean processing time per class of a wave profile block, for reports.
pub fn ph_summary(ph: &PhaseTypeDist) -> Result<(f64, f64)> {
    Ok((ph.mean()?, ph.scv()?))
}
