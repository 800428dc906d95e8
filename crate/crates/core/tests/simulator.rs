use dias::arrivals::MarkedArrivalProcess;
use dias::job_model::{ClusterSpec, TaskCountPmf};
use dias::simulator::{
    audit_run, replicate, run, ArrivalSource, ClassWorkload, DropRatios, DropTarget, JobShape, PowerModel,
    Scenario, SchedulingPolicy, SprintConfig, Step, TaskTiming,
};

fn serial(name: &str, priority: u32, secs: f64, timing: TaskTiming) -> ClassWorkload {
    ClassWorkload {
        name: name.into(),
        priority,
        shape: JobShape::Chain(vec![Step::Serial { rate: 1.0 / secs }]),
        timing,
        overhead: None,
    }
}

fn tasks(name: &str, priority: u32, n: usize, secs: f64) -> ClassWorkload {
    ClassWorkload {
        name: name.into(),
        priority,
        shape: JobShape::Chain(vec![Step::Tasks {
            count: TaskCountPmf::point(n).unwrap(),
            rate: 1.0 / secs,
            drop: DropTarget::Map,
        }]),
        timing: TaskTiming::Deterministic,
        overhead: None,
    }
}

fn traced(classes: Vec<ClassWorkload>, trace: Vec<(f64, usize)>, policy: SchedulingPolicy) -> Scenario {
    Scenario {
        cluster: ClusterSpec::new(1).unwrap(),
        classes,
        arrivals: ArrivalSource::Trace(trace),
        policy,
        power: PowerModel::default(),
        horizon: 100.0,
        warmup: 0.0,
        seed: 1,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

// low job of 10 s arrives at 0, high job of 5 s at 2
fn two_jobs(policy: SchedulingPolicy, low: ClassWorkload) -> Scenario {
    traced(
        vec![serial("high", 2, 5.0, TaskTiming::Deterministic), low],
        vec![(0.0, 1), (2.0, 0)],
        policy,
    )
}

#[test]
fn non_preemptive_trace() {
    let s = two_jobs(
        SchedulingPolicy::non_preemptive(2),
        serial("low", 1, 10.0, TaskTiming::Deterministic),
    );
    let m = run(&s).unwrap();
    audit_run(&s, &m).unwrap();
    assert!(close(m.classes[0].mean_response_s, 13.0));
    assert!(close(m.classes[0].mean_queueing_s, 8.0));
    assert!(close(m.classes[1].mean_response_s, 10.0));
    assert_eq!(m.resource_waste, 0.0);
    assert!(close(m.energy_j, 180.0 * 15.0));
}

#[test]
fn preemptive_trace() {
    let s = two_jobs(
        SchedulingPolicy::preemptive(2),
        serial("low", 1, 10.0, TaskTiming::Deterministic),
    );
    let m = run(&s).unwrap();
    audit_run(&s, &m).unwrap();
    assert!(close(m.classes[0].mean_response_s, 5.0));
    // evicted after 2 s, restarted from scratch at 7
    assert!(close(m.classes[1].mean_response_s, 17.0));
    assert!(close(m.classes[1].mean_execution_s, 10.0));
    assert_eq!(m.evictions, 1);
    assert!(close(m.resource_waste, 2.0 / 17.0));
    assert!(close(m.makespan_s, 17.0));
}

#[test]
fn differential_approximation_trace() {
    let s = two_jobs(
        SchedulingPolicy::differential_approx(vec![DropRatios::NONE, DropRatios::map_only(0.2)]),
        tasks("low", 1, 10, 1.0),
    );
    let m = run(&s).unwrap();
    audit_run(&s, &m).unwrap();
    assert!(close(m.classes[1].mean_response_s, 8.0));
    assert!(close(m.classes[0].mean_response_s, 11.0));
    assert_eq!(m.log[0].task_counts, vec![10]);
}

fn sprint(timeouts: Vec<Option<f64>>, budget: f64) -> SprintConfig {
    SprintConfig {
        timeouts,
        speed_factor: 2.5,
        budget,
        replenish_rate: 0.0,
        budget_cap: budget,
    }
}

#[test]
fn sprint_from_dispatch() {
    let s = traced(
        vec![serial("only", 1, 5.0, TaskTiming::Deterministic)],
        vec![(0.0, 0)],
        SchedulingPolicy::dias_full(vec![DropRatios::NONE], sprint(vec![Some(0.0)], 1e6)),
    );
    let m = run(&s).unwrap();
    audit_run(&s, &m).unwrap();
    assert!(close(m.classes[0].mean_execution_s, 2.0));
    assert!(close(m.sprint_time_s, 2.0));
    assert!(close(m.energy_j, 270.0 * 2.0));
}

#[test]
fn sprint_stops_when_budget_runs_out() {
    // 90 J at a 90 W premium buys one second of sprinting
    let s = traced(
        vec![serial("only", 1, 5.0, TaskTiming::Deterministic)],
        vec![(0.0, 0)],
        SchedulingPolicy::dias_full(vec![DropRatios::NONE], sprint(vec![Some(0.0)], 90.0)),
    );
    let m = run(&s).unwrap();
    audit_run(&s, &m).unwrap();
    assert!(close(m.classes[0].mean_execution_s, 3.5));
    assert!(close(m.sprint_time_s, 1.0));
    assert!(close(m.energy_j, 270.0 + 180.0 * 2.5));
}

#[test]
fn sprint_timer_delays_the_boost() {
    let s = traced(
        vec![serial("only", 1, 5.0, TaskTiming::Deterministic)],
        vec![(0.0, 0)],
        SchedulingPolicy::dias_full(vec![DropRatios::NONE], sprint(vec![Some(2.5)], 1e6)),
    );
    let m = run(&s).unwrap();
    // 2.5 s at base speed, the remaining 2.5 s of work at 2.5x
    assert!(close(m.classes[0].mean_execution_s, 3.5));
    assert_eq!(m.log[0].sprint_start, Some(2.5));
}

#[test]
fn job_finishing_before_timeout_never_sprints() {
    let s = traced(
        vec![serial("only", 1, 5.0, TaskTiming::Deterministic)],
        vec![(0.0, 0)],
        SchedulingPolicy::dias_full(vec![DropRatios::NONE], sprint(vec![Some(6.0)], 1e6)),
    );
    let m = run(&s).unwrap();
    assert_eq!(m.sprint_time_s, 0.0);
    assert!(close(m.classes[0].mean_execution_s, 5.0));
}

fn poisson(classes: Vec<ClassWorkload>, rates: &[f64], policy: SchedulingPolicy) -> Scenario {
    Scenario {
        cluster: ClusterSpec::new(1).unwrap(),
        classes,
        arrivals: ArrivalSource::Mmap(MarkedArrivalProcess::marked_poisson(rates).unwrap()),
        policy,
        power: PowerModel::default(),
        horizon: 20_000.0,
        warmup: 500.0,
        seed: 11,
    }
}

#[test]
fn mm1_mean_response() {
    let s = poisson(
        vec![serial("only", 1, 1.0, TaskTiming::Exponential)],
        &[0.5],
        SchedulingPolicy::non_preemptive(1),
    );
    let rep = replicate(&s, 8).unwrap();
    let r = rep.summary.classes[0].mean_response_s;
    assert!((r.mean - 2.0).abs() < 0.1, "{r:?}");
}

#[test]
fn two_class_priority_queues_match_theory() {
    let classes = vec![
        serial("high", 2, 1.0, TaskTiming::Exponential),
        serial("low", 1, 1.0, TaskTiming::Exponential),
    ];
    let (lh, ll) = (0.3, 0.3);
    // preemptive-resume with exponential service equals preemptive-repeat
    // with fresh draws; high class sees an M/M/1 with its own load
    let p = replicate(&poisson(classes.clone(), &[lh, ll], SchedulingPolicy::preemptive(2)), 8).unwrap();
    let want_h = 1.0 / (1.0 - lh);
    assert!((p.summary.classes[0].mean_response_s.mean - want_h).abs() < 0.05 * want_h);
    // non-preemptive: W_k = W0 / ((1 - s_{k-1})(1 - s_k)), W0 = sum lambda E[S^2] / 2
    let np = replicate(&poisson(classes, &[lh, ll], SchedulingPolicy::non_preemptive(2)), 8).unwrap();
    let w0 = (lh + ll) * 2.0 / 2.0;
    let wh = w0 / (1.0 - lh);
    let wl = w0 / ((1.0 - lh) * (1.0 - lh - ll));
    let got_h = np.summary.classes[0].mean_response_s.mean;
    let got_l = np.summary.classes[1].mean_response_s.mean;
    assert!((got_h - (wh + 1.0)).abs() < 0.05 * (wh + 1.0), "{got_h}");
    assert!((got_l - (wl + 1.0)).abs() < 0.07 * (wl + 1.0), "{got_l}");
}

#[test]
fn stochastic_runs_pass_the_audit() {
    let classes = vec![
        tasks("high", 3, 4, 0.5),
        serial("mid", 2, 1.5, TaskTiming::Exponential),
        ClassWorkload {
            timing: TaskTiming::Exponential,
            ..tasks("low", 1, 12, 0.4)
        },
    ];
    let mut s = poisson(classes, &[0.1, 0.1, 0.1], SchedulingPolicy::preemptive(3));
    s.cluster = ClusterSpec::new(3).unwrap();
    s.horizon = 3_000.0;
    for policy in [
        SchedulingPolicy::preemptive(3),
        SchedulingPolicy::non_preemptive(3),
        SchedulingPolicy::differential_approx(vec![DropRatios::NONE, DropRatios::NONE, DropRatios::map_only(0.3)]),
        SchedulingPolicy::dias_full(
            vec![DropRatios::NONE, DropRatios::NONE, DropRatios::map_only(0.3)],
            SprintConfig {
                timeouts: vec![None, Some(1.0), Some(0.5)],
                speed_factor: 2.0,
                budget: 500.0,
                replenish_rate: 20.0,
                budget_cap: 1000.0,
            },
        ),
    ] {
        let sc = s.with_policy(policy);
        let m = run(&sc).unwrap();
        audit_run(&sc, &m).unwrap_or_else(|e| panic!("{:?}: {e}", sc.policy.kind));
    }
}

#[test]
fn zero_drop_approximation_matches_non_preemptive() {
    let classes = vec![
        serial("high", 2, 1.0, TaskTiming::Exponential),
        tasks("low", 1, 6, 0.5),
    ];
    let s = poisson(classes, &[0.2, 0.2], SchedulingPolicy::non_preemptive(2));
    let a = run(&s).unwrap();
    let b = run(&s.with_policy(SchedulingPolicy::differential_approx(vec![DropRatios::NONE; 2]))).unwrap();
    assert_eq!(a, b);
}

#[test]
fn same_seed_same_result() {
    let s = poisson(
        vec![serial("only", 1, 1.0, TaskTiming::Exponential)],
        &[0.5],
        SchedulingPolicy::non_preemptive(1),
    );
    assert_eq!(run(&s).unwrap(), run(&s).unwrap());
    assert_ne!(run(&s).unwrap(), run(&s.with_seed(12)).unwrap());
}

#[test]
fn short_horizon_is_an_error() {
    let mut s = traced(
        vec![serial("only", 1, 1.0, TaskTiming::Deterministic)],
        vec![(50.0, 0)],
        SchedulingPolicy::non_preemptive(1),
    );
    s.horizon = 10.0;
    assert!(run(&s).is_err());
}
