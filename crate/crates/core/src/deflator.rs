//! Drop-ratio and sprint-timeout planning under accuracy and latency
//! targets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::job_model::{JobModelError, MAX_DROP_RATIO};
use crate::simulator::{
    replicate_with, ArrivalSource, DropRatios, Estimate, Scenario, SchedulingPolicy, SimError, SprintConfig,
};

#[derive(Debug, Error)]
pub enum DeflatorError {
    #[error(transparent)]
    JobModel(#[from] JobModelError),
    #[error("invalid accuracy curve: {0}")]
    InvalidCurve(String),
    #[error("invalid targets: {0}")]
    InvalidTargets(String),
    #[error("candidate grid is empty")]
    EmptyGrid,
    #[error("prediction failed: {0}")]
    PredictorFailure(#[from] SimError),
    #[error("feasibility table is empty")]
    EmptyTable,
}

pub type Result<T> = std::result::Result<T, DeflatorError>;

/// Relative error (percent) as a function of the drop ratio, piecewise
/// linear through its knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurveDoc", into = "CurveDoc")]
pub struct AccuracyCurve {
    points: Vec<(f64, f64)>,
    /// Drop ratio beyond which the curve is a linear extension of the
    /// last measured segment.
    extrapolated_from: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CurveDoc {
    points: Vec<(f64, f64)>,
}

impl TryFrom<CurveDoc> for AccuracyCurve {
    type Error = DeflatorError;
    fn try_from(d: CurveDoc) -> Result<Self> {
        AccuracyCurve::new(d.points)
    }
}

impl From<AccuracyCurve> for CurveDoc {
    fn from(c: AccuracyCurve) -> Self {
        let points = match c.extrapolated_from {
            Some(t) => c.points.into_iter().filter(|p| p.0 <= t).collect(),
            None => c.points,
        };
        CurveDoc { points }
    }
}

impl Default for AccuracyCurve {
    fn default() -> Self {
        Self::new(vec![(0.0, 0.0), (0.1, 8.5), (0.2, 15.0), (0.4, 32.0)]).expect("default knots are valid")
    }
}

impl AccuracyCurve {
    /// Builds a curve from knots anchored at `(0, 0)`. When the last knot
    /// is below the maximum drop ratio the last segment is extended.
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        let bad = |m: &str| Err(DeflatorError::InvalidCurve(m.into()));
        if points.first() != Some(&(0.0, 0.0)) {
            return bad("curve must start at (0, 0)");
        }
        if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return bad("knots must be finite");
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("drop ratios must be strictly increasing");
        }
        if points.windows(2).any(|w| w[1].1 < w[0].1) {
            return bad("errors must be nondecreasing");
        }
        let last = *points.last().expect("nonempty");
        if last.0 > MAX_DROP_RATIO + 1e-12 {
            return bad("drop ratios must lie in [0, 0.9]");
        }
        let mut points = points;
        let mut extrapolated_from = None;
        if last.0 < MAX_DROP_RATIO {
            let slope = match points.len() {
                1 => 0.0,
                n => (last.1 - points[n - 2].1) / (last.0 - points[n - 2].0),
            };
            points.push((MAX_DROP_RATIO, last.1 + slope * (MAX_DROP_RATIO - last.0)));
            extrapolated_from = Some(last.0);
        }
        Ok(Self {
            points,
            extrapolated_from,
        })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn extrapolated_from(&self) -> Option<f64> {
        self.extrapolated_from
    }

    pub fn is_extrapolated(&self, theta: f64) -> bool {
        self.extrapolated_from.is_some_and(|t| theta > t)
    }

    /// Relative error in percent at drop ratio `theta`.
    pub fn error_of(&self, theta: f64) -> Result<f64> {
        if !(0.0..=MAX_DROP_RATIO).contains(&theta) {
            return Err(JobModelError::DropRatioOutOfRange(theta).into());
        }
        let i = self.points.partition_point(|p| p.0 <= theta);
        if i == self.points.len() {
            return Ok(self.points[i - 1].1);
        }
        let (a, b) = (self.points[i - 1], self.points[i]);
        Ok(a.1 + (theta - a.0) / (b.0 - a.0) * (b.1 - a.1))
    }

    /// Largest drop ratio whose error does not exceed `max_error`.
    pub fn max_drop_for_accuracy(&self, max_error: f64) -> f64 {
        if !(max_error > 0.0) {
            // flat start still allows dropping at zero error
            return self.points.iter().take_while(|p| p.1 <= 0.0).last().map_or(0.0, |p| p.0);
        }
        match self.points.iter().position(|p| p.1 > max_error) {
            None => MAX_DROP_RATIO,
            Some(i) => {
                let (a, b) = (self.points[i - 1], self.points[i]);
                a.0 + (max_error - a.1) / (b.1 - a.1) * (b.0 - a.0)
            }
        }
    }
}

/// Targets for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTarget {
    /// Percent.
    pub max_relative_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_mean_latency_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_p95_latency_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub classes: Vec<ClassTarget>,
    pub latency_weight: f64,
    pub accuracy_weight: f64,
}

impl TargetSpec {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.classes.len() != classes {
            return Err(DeflatorError::InvalidTargets(format!(
                "targets cover {} classes, scenario has {classes}",
                self.classes.len()
            )));
        }
        let w = [self.latency_weight, self.accuracy_weight];
        if w.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || w.iter().all(|w| *w == 0.0) {
            return Err(DeflatorError::InvalidTargets(
                "weights must be nonnegative and not all zero".into(),
            ));
        }
        for c in &self.classes {
            let caps = [Some(c.max_relative_error), c.max_mean_latency_s, c.max_p95_latency_s];
            if caps.iter().flatten().any(|v| !(*v >= 0.0)) {
                return Err(DeflatorError::InvalidTargets("targets must be nonnegative".into()));
            }
        }
        Ok(())
    }

    /// Feasibility and total relative violation of a candidate's
    /// predictions. Unstable candidates get infinite violation.
    pub fn assess(&self, curve: &AccuracyCurve, candidate: &Candidate, predicted: Option<&[ClassPrediction]>) -> Result<(bool, f64)> {
        let mut violation = 0.0;
        let over = |v: f64, cap: f64| if v > cap { (v - cap) / cap.max(f64::MIN_POSITIVE) } else { 0.0 };
        for (k, t) in self.classes.iter().enumerate() {
            violation += over(curve.error_of(candidate.theta[k])?, t.max_relative_error);
        }
        let Some(pred) = predicted else {
            return Ok((false, f64::INFINITY));
        };
        for (t, p) in self.classes.iter().zip(pred) {
            if let Some(cap) = t.max_mean_latency_s {
                violation += over(p.mean_response_s.mean, cap);
            }
            if let Some(cap) = t.max_p95_latency_s {
                violation += over(p.p95_response_s.mean, cap);
            }
        }
        Ok((violation == 0.0, violation))
    }
}

/// Map drop ratio and sprint timeout per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub theta: Vec<f64>,
    pub timeouts_s: Vec<Option<f64>>,
}

impl Candidate {
    /// Policy realizing this candidate: differential approximation when no
    /// class sprints, otherwise the full policy with `sprint` as the base.
    pub fn policy(&self, sprint: Option<&SprintConfig>) -> SchedulingPolicy {
        let drops = self.theta.iter().map(|&t| DropRatios::map_only(t)).collect();
        match sprint {
            Some(base) if self.timeouts_s.iter().any(Option::is_some) => SchedulingPolicy::dias_full(
                drops,
                SprintConfig {
                    timeouts: self.timeouts_s.clone(),
                    ..base.clone()
                },
            ),
            _ => SchedulingPolicy::differential_approx(drops),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrediction {
    pub mean_response_s: Estimate,
    pub p95_response_s: Estimate,
    pub mean_execution_s: Estimate,
    /// Completed jobs per run, averaged.
    pub jobs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub candidate: Candidate,
    /// Offered load of the deflated workload, when arrivals are stochastic.
    pub utilization: Option<f64>,
    /// Absent when the analytic screen found the candidate unstable.
    pub predicted: Option<Vec<ClassPrediction>>,
    pub accuracy_error: Vec<f64>,
    pub feasible: bool,
    pub violation: f64,
}

/// Evaluates a scenario under a candidate policy.
pub trait Predictor: Sync {
    fn predict(&self, scenario: &Scenario) -> std::result::Result<Vec<ClassPrediction>, SimError>;
}

/// Simulation replications with seeds `seed, seed+1, ...`.
#[derive(Debug, Clone, Copy)]
pub struct SimulationPredictor {
    pub runs: usize,
    pub exec: Execution,
}

impl Default for SimulationPredictor {
    fn default() -> Self {
        Self {
            runs: 10,
            exec: Execution::default(),
        }
    }
}

impl Predictor for SimulationPredictor {
    fn predict(&self, scenario: &Scenario) -> std::result::Result<Vec<ClassPrediction>, SimError> {
        let rep = replicate_with(scenario, self.runs, self.exec)?;
        let n = rep.runs.len() as f64;
        Ok(rep
            .summary
            .classes
            .iter()
            .enumerate()
            .map(|(k, c)| ClassPrediction {
                mean_response_s: c.mean_response_s,
                p95_response_s: c.p95_response_s,
                mean_execution_s: c.mean_execution_s,
                jobs: rep.runs.iter().map(|r| r.classes[k].jobs as f64).sum::<f64>() / n,
            })
            .collect())
    }
}

/// Search space for the planner.
#[derive(Debug, Clone)]
pub struct SearchGrid {
    pub theta: Vec<f64>,
    /// Ignored unless a sprint configuration is given.
    pub timeouts_s: Vec<Option<f64>>,
    pub sprint: Option<SprintConfig>,
}

fn product<T: Clone>(per_class: &[Vec<T>]) -> Vec<Vec<T>> {
    per_class.iter().fold(vec![Vec::new()], |acc, opts| {
        acc.iter()
            .flat_map(|prefix| {
                opts.iter().map(move |o| {
                    let mut v = prefix.clone();
                    v.push(o.clone());
                    v
                })
            })
            .collect()
    })
}

/// Lists the candidates admitted by the accuracy targets.
pub fn candidates(base: &Scenario, targets: &TargetSpec, curve: &AccuracyCurve, grid: &SearchGrid) -> Result<Vec<Candidate>> {
    let k = base.classes.len();
    targets.validate(k)?;
    if grid.theta.is_empty() || (grid.sprint.is_some() && grid.timeouts_s.is_empty()) {
        return Err(DeflatorError::EmptyGrid);
    }
    for &t in &grid.theta {
        curve.error_of(t)?;
    }
    let thetas: Vec<Vec<f64>> = targets
        .classes
        .iter()
        .map(|t| {
            let max = curve.max_drop_for_accuracy(t.max_relative_error) + 1e-12;
            grid.theta.iter().copied().filter(|&th| th <= max).collect()
        })
        .collect();
    let timeouts: Vec<Vec<Option<f64>>> = match grid.sprint {
        Some(_) => vec![grid.timeouts_s.clone(); k],
        None => vec![vec![None]; k],
    };
    let mut out = Vec::new();
    for theta in product(&thetas) {
        for t in product(&timeouts) {
            out.push(Candidate {
                theta: theta.clone(),
                timeouts_s: t,
            });
        }
    }
    Ok(out)
}

/// Evaluates every admitted candidate: an analytic load screen, then the
/// predictor for candidates that pass it.
pub fn enumerate_candidates<P: Predictor>(
    base: &Scenario,
    targets: &TargetSpec,
    curve: &AccuracyCurve,
    grid: &SearchGrid,
    predictor: &P,
    exec: Execution,
) -> Result<Vec<CandidateRow>> {
    let list = candidates(base, targets, curve, grid)?;
    let rows = exec.map(list, |candidate| -> Result<CandidateRow> {
        let scenario = base.with_policy(candidate.policy(grid.sprint.as_ref()));
        let utilization = match &scenario.arrivals {
            ArrivalSource::Mmap(_) => Some(scenario.offered_load()?),
            ArrivalSource::Trace(_) => None,
        };
        let predicted = match utilization {
            Some(rho) if rho >= 1.0 => None,
            _ => Some(predictor.predict(&scenario)?),
        };
        let accuracy_error = candidate
            .theta
            .iter()
            .map(|&t| curve.error_of(t))
            .collect::<Result<Vec<_>>>()?;
        let (feasible, violation) = targets.assess(curve, &candidate, predicted.as_deref())?;
        Ok(CandidateRow {
            candidate,
            utilization,
            predicted,
            accuracy_error,
            feasible,
            violation,
        })
    });
    rows.into_iter().collect()
}

/// Range used to scale each score term to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub latency_min_s: f64,
    pub latency_max_s: f64,
    pub accuracy_min: f64,
    pub accuracy_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub chosen: Candidate,
    pub chosen_index: usize,
    pub feasible: bool,
    pub predicted: Option<Vec<ClassPrediction>>,
    /// Present when the choice was scored (some candidate was feasible).
    pub normalization: Option<Normalization>,
    pub score: Option<f64>,
    pub table: Vec<CandidateRow>,
}

/// Job-weighted mean response and accuracy loss of a predicted row.
fn row_terms(row: &CandidateRow) -> Option<(f64, f64)> {
    let pred = row.predicted.as_ref()?;
    let jobs: f64 = pred.iter().map(|p| p.jobs).sum();
    let w = |k: usize| if jobs > 0.0 { pred[k].jobs / jobs } else { 1.0 / pred.len() as f64 };
    let latency = (0..pred.len()).map(|k| w(k) * pred[k].mean_response_s.mean).sum();
    let accuracy = (0..pred.len()).map(|k| w(k) * row.accuracy_error[k]).sum();
    Some((latency, accuracy))
}

fn cmp_timeouts(a: &[Option<f64>], b: &[Option<f64>]) -> std::cmp::Ordering {
    let key = |t: &Option<f64>| t.unwrap_or(f64::INFINITY);
    a.iter()
        .zip(b)
        .map(|(x, y)| key(x).total_cmp(&key(y)))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

fn cmp_tiebreak(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    let theta = a
        .theta
        .iter()
        .zip(&b.theta)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal);
    theta.then_with(|| cmp_timeouts(&a.timeouts_s, &b.timeouts_s))
}

/// Picks the feasible candidate with the lowest weighted score, or the
/// least-violating one when none is feasible.
pub fn choose(table: Vec<CandidateRow>, targets: &TargetSpec) -> Result<PlanResult> {
    if table.is_empty() {
        return Err(DeflatorError::EmptyTable);
    }
    let feasible: Vec<(usize, (f64, f64))> = table
        .iter()
        .enumerate()
        .filter(|(_, r)| r.feasible)
        .filter_map(|(i, r)| row_terms(r).map(|t| (i, t)))
        .collect();
    let (index, normalization, score) = if feasible.is_empty() {
        let i = (0..table.len())
            .min_by(|&a, &b| {
                table[a]
                    .violation
                    .total_cmp(&table[b].violation)
                    .then_with(|| cmp_tiebreak(&table[a].candidate, &table[b].candidate))
            })
            .expect("nonempty");
        (i, None, None)
    } else {
        let fold = |f: fn(&(f64, f64)) -> f64| {
            feasible
                .iter()
                .map(|(_, t)| f(t))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (lmin, lmax) = fold(|t| t.0);
        let (amin, amax) = fold(|t| t.1);
        let scale = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        let score = |t: &(f64, f64)| {
            targets.latency_weight * scale(t.0, lmin, lmax) + targets.accuracy_weight * scale(t.1, amin, amax)
        };
        let (i, s) = feasible
            .iter()
            .map(|(i, t)| (*i, score(t)))
            .min_by(|a, b| {
                let by_score = if (a.1 - b.1).abs() <= 1e-12 {
                    std::cmp::Ordering::Equal
                } else {
                    a.1.total_cmp(&b.1)
                };
                by_score.then_with(|| cmp_tiebreak(&table[a.0].candidate, &table[b.0].candidate))
            })
            .expect("nonempty");
        let n = Normalization {
            latency_min_s: lmin,
            latency_max_s: lmax,
            accuracy_min: amin,
            accuracy_max: amax,
        };
        (i, Some(n), Some(s))
    };
    Ok(PlanResult {
        chosen: table[index].candidate.clone(),
        chosen_index: index,
        feasible: table[index].feasible,
        predicted: table[index].predicted.clone(),
        normalization,
        score,
        table,
    })
}

/// Enumerates, evaluates and chooses in one step.
pub fn plan<P: Predictor>(
    base: &Scenario,
    targets: &TargetSpec,
    curve: &AccuracyCurve,
    grid: &SearchGrid,
    predictor: &P,
    exec: Execution,
) -> Result<PlanResult> {
    let table = enumerate_candidates(base, targets, curve, grid, predictor, exec)?;
    choose(table, targets)
}
