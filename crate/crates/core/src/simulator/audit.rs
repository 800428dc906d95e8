//! Consistency checks over a run's event log.

use std::collections::HashSet;

use thiserror::Error;

use super::metrics::{EventLog, SimulationMetrics};
use super::{PowerModel, Scenario};

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuditError {
    #[error("attempts overlap on the engine at t={0}")]
    OverlappingAttempts(f64),
    #[error("job {job} waited at t={time} while the engine was idle")]
    IdleWhileWaiting { job: u64, time: f64 },
    #[error("class {dispatched} dispatched at t={time} while class {waiting} (higher priority) was waiting")]
    PriorityInversion {
        dispatched: usize,
        waiting: usize,
        time: f64,
    },
    #[error("class {0} jobs were first dispatched out of arrival order")]
    FcfsViolation(usize),
    #[error("job {0}: response does not equal queueing plus execution")]
    Decomposition(u64),
    #[error("class {0}: mean response does not equal mean queueing plus mean execution")]
    ClassDecomposition(usize),
    #[error("energy {metric} J disagrees with log integral {log} J")]
    Energy { metric: f64, log: f64 },
    #[error("resource waste {waste} inconsistent with {evictions} evictions")]
    Waste { waste: f64, evictions: usize },
    #[error("job {0} never completed")]
    Incomplete(u64),
}

/// Energy implied by the log: base power over every attempt, the sprint
/// premium over every sprint interval, idle power over the rest.
pub fn energy_from_log(log: &EventLog, power: &PowerModel, makespan: f64) -> f64 {
    let busy: f64 = log
        .iter()
        .flat_map(|r| r.attempts.iter())
        .map(|a| a.end - a.dispatch)
        .sum();
    let sprint: f64 = log.iter().map(|r| r.sprint_duration()).sum();
    power.base_w * busy + (power.sprint_w - power.base_w) * sprint + power.idle_w * (makespan - busy)
}

/// Busy intervals of the engine, merged, in time order.
fn busy_blocks(log: &EventLog) -> Result<Vec<(f64, f64)>, AuditError> {
    let mut attempts: Vec<(f64, f64)> = log
        .iter()
        .flat_map(|r| r.attempts.iter().map(|a| (a.dispatch, a.end)))
        .collect();
    attempts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut blocks: Vec<(f64, f64)> = Vec::new();
    for (s, e) in attempts {
        match blocks.last_mut() {
            Some(last) if s < last.1 - TIME_EPS => return Err(AuditError::OverlappingAttempts(s)),
            Some(last) if s <= last.1 + TIME_EPS => last.1 = last.1.max(e),
            _ => blocks.push((s, e)),
        }
    }
    Ok(blocks)
}

/// Waiting intervals `(job, class, start, end)`: arrival to first dispatch
/// and each eviction to the following dispatch.
fn waits(log: &EventLog) -> Vec<(u64, usize, f64, f64)> {
    let mut out = Vec::new();
    for r in log {
        let mut start = r.arrival;
        for a in &r.attempts {
            out.push((r.id, r.class, start, a.dispatch));
            start = a.end;
        }
    }
    out
}

/// The engine is never idle while some job waits.
pub fn check_work_conservation(log: &EventLog) -> Result<(), AuditError> {
    let blocks = busy_blocks(log)?;
    for (job, _, s, e) in waits(log) {
        if e - s <= 2.0 * TIME_EPS {
            continue;
        }
        // the block covering the wait must start by s and end by e
        let i = blocks.partition_point(|b| b.0 <= s + TIME_EPS);
        let covered = i > 0 && blocks[i - 1].1 >= e - TIME_EPS;
        if !covered {
            return Err(AuditError::IdleWhileWaiting { job, time: s });
        }
    }
    Ok(())
}

/// Every dispatch picks the highest non-empty class; within a class,
/// first dispatches follow arrival order.
pub fn check_priority_order(log: &EventLog, priorities: &[u32]) -> Result<(), AuditError> {
    #[derive(Clone, Copy)]
    enum Ev {
        End(usize),
        Check { class: usize },
        Start(usize),
    }
    let ws = waits(log);
    let mut events: Vec<(f64, u8, Ev)> = Vec::new();
    for (i, &(_, _, s, e)) in ws.iter().enumerate() {
        if e - s <= 2.0 * TIME_EPS {
            continue;
        }
        // strictly-inside semantics: a wait counts at t when s < t - eps and e > t + eps
        events.push((s + TIME_EPS, 2, Ev::Start(i)));
        events.push((e - TIME_EPS, 0, Ev::End(i)));
    }
    for r in log {
        for a in &r.attempts {
            events.push((a.dispatch, 1, Ev::Check { class: r.class }));
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut active: HashSet<usize> = HashSet::new();
    let mut waiting = vec![0usize; priorities.len()];
    for (t, _, ev) in events {
        match ev {
            Ev::Start(i) => {
                active.insert(i);
                waiting[ws[i].1] += 1;
            }
            Ev::End(i) => {
                if active.remove(&i) {
                    waiting[ws[i].1] -= 1;
                }
            }
            Ev::Check { class } => {
                if let Some(h) = (0..priorities.len()).find(|&h| priorities[h] > priorities[class] && waiting[h] > 0) {
                    return Err(AuditError::PriorityInversion {
                        dispatched: class,
                        waiting: h,
                        time: t,
                    });
                }
            }
        }
    }
    for class in 0..priorities.len() {
        let mut firsts: Vec<(f64, u64, f64)> = log
            .iter()
            .filter(|r| r.class == class)
            .filter_map(|r| r.attempts.first().map(|a| (r.arrival, r.id, a.dispatch)))
            .collect();
        firsts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if firsts.windows(2).any(|w| w[1].2 < w[0].2) {
            return Err(AuditError::FcfsViolation(class));
        }
    }
    Ok(())
}

/// Per job and per class, response equals queueing plus execution.
pub fn check_decomposition(metrics: &SimulationMetrics) -> Result<(), AuditError> {
    for r in &metrics.log {
        let Some(resp) = r.response() else {
            return Err(AuditError::Incomplete(r.id));
        };
        let q = r.queueing().unwrap_or(f64::NAN);
        let x = r.execution().unwrap_or(f64::NAN);
        if !((resp - (q + x)).abs() <= TIME_EPS * resp.abs().max(1.0)) {
            return Err(AuditError::Decomposition(r.id));
        }
    }
    for (k, c) in metrics.classes.iter().enumerate() {
        let sum = c.mean_queueing_s + c.mean_execution_s;
        if (c.mean_response_s - sum).abs() > TIME_EPS * c.mean_response_s.abs().max(1.0) {
            return Err(AuditError::ClassDecomposition(k));
        }
    }
    Ok(())
}

/// Runs every log check for one run of `scenario`.
pub fn audit_run(scenario: &Scenario, metrics: &SimulationMetrics) -> Result<(), AuditError> {
    check_work_conservation(&metrics.log)?;
    let priorities: Vec<u32> = scenario.classes.iter().map(|c| c.priority).collect();
    check_priority_order(&metrics.log, &priorities)?;
    check_decomposition(metrics)?;

    let log_energy = energy_from_log(&metrics.log, &scenario.power, metrics.makespan_s);
    if (log_energy - metrics.energy_j).abs() > 1e-6 * metrics.energy_j.abs().max(1.0) {
        return Err(AuditError::Energy {
            metric: metrics.energy_j,
            log: log_energy,
        });
    }

    let evicted: usize = metrics.log.iter().map(|r| r.evictions()).sum();
    let consistent = if scenario.policy.kind.evicts() {
        (metrics.resource_waste > 0.0) == (evicted > 0) && evicted == metrics.evictions
    } else {
        metrics.resource_waste == 0.0 && evicted == 0
    };
    if !consistent {
        return Err(AuditError::Waste {
            waste: metrics.resource_waste,
            evictions: evicted,
        });
    }
    Ok(())
}
