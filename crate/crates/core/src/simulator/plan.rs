//! Per-job work plans: drawn on arrival, deflated on dispatch.

use rand::Rng;
use rand_distr::Exp1;

use super::{ClassWorkload, DropRatios, DropTarget, Result, Step, TaskTiming};
use crate::job_model::{effective_tasks, wave_count, ClusterSpec, TaskCountPmf};
use crate::phase_type::PhaseTypeDist;

#[derive(Debug, Clone)]
enum RawStep {
    Serial(f64),
    Tasks(Vec<f64>),
    /// One draw per profile wave `0..max_waves`, plus the raw task count.
    Waves { draws: Vec<f64>, count: usize },
}

/// Raw structure of one job: task counts and base-speed durations.
#[derive(Debug, Clone)]
pub(crate) struct RawPlan {
    steps: Vec<RawStep>,
    counts: Vec<usize>,
}

impl RawPlan {
    /// Raw task counts of the task steps, in chain order.
    pub(crate) fn counts(&self) -> &[usize] {
        &self.counts
    }
}

/// Executable plan: each segment is a list of task works run over the
/// slots; serial steps are single-task segments.
pub(crate) type Segments = Vec<Vec<f64>>;

enum StepSampler {
    Serial {
        rate: f64,
        scale: f64,
        ph: Option<PhaseTypeDist>,
    },
    Tasks {
        count: CountSampler,
        rate: f64,
        theta: f64,
        waves: Option<(Vec<PhaseTypeDist>, usize)>,
    },
}

struct CountSampler {
    cum: Vec<(usize, f64)>,
}

impl CountSampler {
    fn new(pmf: &TaskCountPmf) -> Self {
        let mut acc = 0.0;
        let cum = pmf
            .iter()
            .map(|(n, p)| {
                acc += p;
                (n, acc)
            })
            .collect();
        Self { cum }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.cum.len() == 1 {
            return self.cum[0].0;
        }
        let u: f64 = rng.random::<f64>() * self.cum.last().map_or(1.0, |c| c.1);
        self.cum
            .iter()
            .find(|(_, c)| u < *c)
            .or(self.cum.last())
            .map_or(1, |(n, _)| *n)
    }
}

/// Draws and deflates plans for one class under a fixed policy.
pub(crate) struct ClassSampler {
    steps: Vec<StepSampler>,
    deterministic: bool,
    slots: usize,
}

impl ClassSampler {
    pub(crate) fn new(class: &ClassWorkload, drops: DropRatios, cluster: &ClusterSpec) -> Result<Self> {
        let deterministic = matches!(class.timing, TaskTiming::Deterministic);
        let profile = match &class.timing {
            TaskTiming::Waves(p) => Some(p),
            _ => None,
        };
        let setup_mean = class.setup_mean(drops.map)?;
        let mut serial_seen = 0;
        let mut steps = Vec::new();
        for step in class.steps() {
            match step {
                Step::Serial { rate } => {
                    let is_setup = serial_seen == 0;
                    let ph = profile.map(|p| if is_setup { p.setup.clone() } else { p.shuffle.clone() });
                    // scale maps the step's natural mean onto the interpolated setup mean
                    let natural = match &ph {
                        Some(ph) => ph.mean()?,
                        None => 1.0 / rate,
                    };
                    let scale = match (is_setup, setup_mean) {
                        (true, Some(m)) => m / natural,
                        _ => 1.0,
                    };
                    serial_seen += 1;
                    steps.push(StepSampler::Serial { rate, scale, ph });
                }
                Step::Tasks { count, rate, drop } => {
                    let theta = drops.theta_for(drop);
                    let waves = match profile {
                        Some(p) => {
                            let list = if drop == DropTarget::Reduce {
                                &p.reduce_waves
                            } else {
                                &p.map_waves
                            };
                            let max = wave_count(effective_tasks(count.max_support(), theta)?, cluster);
                            Some((list[..max].to_vec(), max))
                        }
                        None => None,
                    };
                    steps.push(StepSampler::Tasks {
                        count: CountSampler::new(&count),
                        rate,
                        theta,
                        waves,
                    });
                }
            }
        }
        Ok(Self {
            steps,
            deterministic,
            slots: cluster.slots,
        })
    }

    /// Draws task counts and durations for a newly arrived job.
    pub(crate) fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> RawPlan {
        let counts = self
            .steps
            .iter()
            .filter_map(|s| match s {
                StepSampler::Tasks { count, .. } => Some(count.sample(rng)),
                StepSampler::Serial { .. } => None,
            })
            .collect();
        self.redraw(counts, rng)
    }

    /// Fresh durations for an existing job structure.
    pub(crate) fn redraw<R: Rng + ?Sized>(&self, counts: Vec<usize>, rng: &mut R) -> RawPlan {
        let mut next_count = counts.iter();
        let steps = self
            .steps
            .iter()
            .map(|s| match s {
                StepSampler::Serial { rate, scale, ph } => {
                    let base = match ph {
                        Some(ph) => ph.sample(rng),
                        None if self.deterministic => 1.0 / rate,
                        None => rng.sample::<f64, _>(Exp1) / rate,
                    };
                    RawStep::Serial(base * scale)
                }
                StepSampler::Tasks { rate, waves, .. } => {
                    let n = *next_count.next().expect("one count per task step");
                    match waves {
                        Some((list, _)) => RawStep::Waves {
                            draws: list.iter().map(|w| w.sample(rng)).collect(),
                            count: n,
                        },
                        None if self.deterministic => RawStep::Tasks(vec![1.0 / rate; n]),
                        None => RawStep::Tasks((0..n).map(|_| rng.sample::<f64, _>(Exp1) / rate).collect()),
                    }
                }
            })
            .collect();
        RawPlan { steps, counts }
    }

    /// Applies the drop ratios and lays out the segments to execute.
    pub(crate) fn deflate(&self, plan: &RawPlan) -> Segments {
        let mut out = Vec::with_capacity(plan.steps.len());
        for (raw, sampler) in plan.steps.iter().zip(&self.steps) {
            match (raw, sampler) {
                (RawStep::Serial(x), _) => out.push(vec![*x]),
                (RawStep::Tasks(times), StepSampler::Tasks { theta, .. }) => {
                    let n = effective_tasks(times.len(), *theta).expect("validated drop ratio");
                    out.push(times[..n].to_vec());
                }
                (RawStep::Waves { draws, count }, StepSampler::Tasks { theta, waves, .. }) => {
                    let max = waves.as_ref().map_or(draws.len(), |w| w.1);
                    let n = effective_tasks(*count, *theta).expect("validated drop ratio");
                    let w = n.div_ceil(self.slots);
                    for &d in &draws[max - w..max] {
                        out.push(vec![d]);
                    }
                }
                _ => unreachable!("plan and sampler steps are built together"),
            }
        }
        out
    }
}
