//! Named default scenarios.

use crate::document::{
    ArrivalsDoc, ClassDoc, CountDoc, DropDoc, DropRatiosDoc, JobDoc, PhDoc, PolicyDoc, PowerDoc, ScenarioDocument,
    SprintDoc, StepDoc, TimingDoc,
};
use crate::job_model::ClusterSpec;
use crate::simulator::DropRatios;

pub const BASE_POWER_W: f64 = 180.0;
pub const SPRINT_POWER_W: f64 = 270.0;
/// Execution-time reduction of 60% while sprinting.
pub const SPEED_FACTOR: f64 = 2.5;
pub const SPRINT_BUDGET_J: f64 = 22_000.0;
pub const SPRINT_TIMEOUT_S: f64 = 65.0;
/// Six sprinting minutes per hour at the 90 W premium.
pub const REPLENISH_J_PER_S: f64 = 6.0 * 60.0 * (SPRINT_POWER_W - BASE_POWER_W) / 3600.0;

/// Low- to high-priority job size ratio (1117 MB vs 473 MB).
pub const SIZE_RATIO: f64 = 1117.0 / 473.0;
/// Mean execution time of a high-priority job in seconds.
pub const HIGH_EXEC_S: f64 = 100.0;
pub const PARTITIONS: usize = 50;
pub const SLOTS: usize = 20;
pub const REDUCE_TASKS: usize = 20;
pub const TARGET_LOAD: f64 = 0.8;

const WAVE_PHASES: usize = 4;
// shares of the mean execution time
const SETUP_SHARE: f64 = 0.10;
const MAP_SHARE: f64 = 0.70;
const SHUFFLE_SHARE: f64 = 0.05;
const REDUCE_SHARE: f64 = 0.15;

fn erlang(mean_s: f64) -> PhDoc {
    PhDoc::Erlang {
        phases: WAVE_PHASES,
        mean_s,
    }
}

/// Text-analysis job of mean `mean_s` seconds: 50 map partitions in three
/// waves, one reduce wave.
pub fn text_analysis_class(name: &str, priority: u32, mean_s: f64) -> ClassDoc {
    let map_waves = PARTITIONS.div_ceil(SLOTS);
    let reduce_waves = REDUCE_TASKS.div_ceil(SLOTS);
    let map_wave = MAP_SHARE * mean_s / map_waves as f64;
    let reduce_wave = REDUCE_SHARE * mean_s / reduce_waves as f64;
    ClassDoc {
        name: name.into(),
        priority,
        job: JobDoc::MapReduce {
            map_tasks: CountDoc::Point(PARTITIONS),
            reduce_tasks: CountDoc::Point(REDUCE_TASKS),
            setup_rate_per_s: 1.0 / (SETUP_SHARE * mean_s),
            map_rate_per_s: 1.0 / map_wave,
            shuffle_rate_per_s: 1.0 / (SHUFFLE_SHARE * mean_s),
            reduce_rate_per_s: 1.0 / reduce_wave,
        },
        timing: TimingDoc::Waves {
            setup: erlang(SETUP_SHARE * mean_s),
            map_waves: vec![erlang(map_wave); map_waves],
            shuffle: erlang(SHUFFLE_SHARE * mean_s),
            reduce_waves: vec![erlang(reduce_wave); reduce_waves],
        },
        overhead: None,
    }
}

fn drops(d: &[f64]) -> Vec<DropRatiosDoc> {
    d.iter().map(|&map| DropRatiosDoc { map, reduce: 0.0 }).collect()
}

/// Two priorities, 9 low per high job, low jobs 2.36 times larger, 80% load.
pub fn reference() -> ScenarioDocument {
    ScenarioDocument {
        name: "reference".into(),
        slots: SLOTS,
        classes: vec![
            text_analysis_class("high", 2, HIGH_EXEC_S),
            text_analysis_class("low", 1, SIZE_RATIO * HIGH_EXEC_S),
        ],
        arrivals: ArrivalsDoc::MarkedPoisson {
            rates_per_s: vec![1.0, 9.0],
        },
        target_utilization: Some(TARGET_LOAD),
        policy: PolicyDoc::Preemptive,
        power: PowerDoc::default(),
        horizon_s: 2.0e6,
        warmup_s: Some(2.0e5),
        seed: 1,
    }
}

/// Three priorities at 2.3 jobs per minute in a 1-4-5 mix, 80% load.
pub fn three_priority() -> ScenarioDocument {
    let rate = 2.3 / 60.0;
    let mix = [0.1, 0.4, 0.5];
    // high jobs are small, medium and low jobs large; sizes follow from the load
    let high = TARGET_LOAD / rate / (mix[0] + (mix[1] + mix[2]) * SIZE_RATIO);
    ScenarioDocument {
        name: "three-priority".into(),
        slots: SLOTS,
        classes: vec![
            text_analysis_class("high", 3, high),
            text_analysis_class("medium", 2, SIZE_RATIO * high),
            text_analysis_class("low", 1, SIZE_RATIO * high),
        ],
        arrivals: ArrivalsDoc::MarkedPoisson {
            rates_per_s: mix.iter().map(|m| m * rate).collect(),
        },
        target_utilization: Some(TARGET_LOAD),
        policy: PolicyDoc::Preemptive,
        power: PowerDoc::default(),
        horizon_s: 4.0e5,
        warmup_s: Some(4.0e4),
        seed: 1,
    }
}

/// Sprint settings: 22 kJ budget, sprint after 65 s for high jobs only.
pub fn limited_sprint(classes: usize) -> SprintDoc {
    let mut timeouts_s = vec![None; classes];
    timeouts_s[0] = Some(SPRINT_TIMEOUT_S);
    SprintDoc {
        timeouts_s,
        speed_factor: SPEED_FACTOR,
        budget_j: SPRINT_BUDGET_J,
        replenish_rate_j_per_s: REPLENISH_J_PER_S,
        budget_cap_j: SPRINT_BUDGET_J,
    }
}

/// Graph job of mean `mean_s`: setup, six dropped shuffle-map stages with
/// shuffles in between, and an undropped result stage.
pub fn triangle_count_class(name: &str, priority: u32, mean_s: f64) -> ClassDoc {
    let mut steps = vec![StepDoc::Serial { rate_per_s: 1.0 }];
    for _ in 0..6 {
        steps.push(StepDoc::Tasks {
            count: CountDoc::Point(PARTITIONS),
            rate_per_s: 1.0,
            drop: DropDoc::Map,
        });
        steps.push(StepDoc::Serial { rate_per_s: 4.0 });
    }
    steps.push(StepDoc::Tasks {
        count: CountDoc::Point(REDUCE_TASKS),
        rate_per_s: 1.0,
        drop: DropDoc::Never,
    });
    let mut class = ClassDoc {
        name: name.into(),
        priority,
        job: JobDoc::Chain { steps },
        timing: TimingDoc::Exponential,
        overhead: None,
    };
    // rescale every rate so the mean processing time is `mean_s`
    let probe = ScenarioDocument {
        name: String::new(),
        slots: SLOTS,
        classes: vec![class.clone()],
        arrivals: ArrivalsDoc::MarkedPoisson { rates_per_s: vec![1.0] },
        target_utilization: None,
        policy: PolicyDoc::NonPreemptive,
        power: PowerDoc::default(),
        horizon_s: 1.0,
        warmup_s: None,
        seed: 0,
    };
    let cluster = ClusterSpec::new(SLOTS).expect("slots");
    let natural = probe.to_scenario().expect("valid probe").classes[0]
        .mean_service(&cluster, DropRatios::NONE)
        .expect("mean");
    let factor = natural / mean_s;
    if let JobDoc::Chain { steps } = &mut class.job {
        for s in steps {
            match s {
                StepDoc::Serial { rate_per_s } | StepDoc::Tasks { rate_per_s, .. } => *rate_per_s *= factor,
            }
        }
    }
    class
}

/// Graph analytics with limited sprinting on high jobs and 20% dropping on
/// low jobs; 3 high per 7 low jobs of equal size.
pub fn sprinting() -> ScenarioDocument {
    ScenarioDocument {
        name: "sprinting".into(),
        slots: SLOTS,
        classes: vec![
            triangle_count_class("high", 2, 150.0),
            triangle_count_class("low", 1, 150.0),
        ],
        arrivals: ArrivalsDoc::MarkedPoisson {
            rates_per_s: vec![3.0, 7.0],
        },
        target_utilization: Some(TARGET_LOAD),
        policy: PolicyDoc::DiasFull {
            drop_ratios: drops(&[0.0, 0.2]),
            sprint: limited_sprint(2),
        },
        power: PowerDoc {
            idle_w: 0.0,
            base_w: BASE_POWER_W,
            sprint_w: SPRINT_POWER_W,
        },
        horizon_s: 1.0e6,
        warmup_s: Some(1.0e5),
        seed: 1,
    }
}

pub fn by_name(name: &str) -> Option<ScenarioDocument> {
    match name {
        "reference" => Some(reference()),
        "three-priority" => Some(three_priority()),
        "sprinting" => Some(sprinting()),
        _ => None,
    }
}

pub const NAMES: [&str; 3] = ["reference", "three-priority", "sprinting"];
