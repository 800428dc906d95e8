//! Processing-time models for multi-stage jobs on a `C`-slot cluster.
//!
//! Two constructions are provided:
//!
//! * the task-level chain over phases `O, M_N..M_1, S, R_N..R_1`, where
//!   tasks within a stage finish one at a time with at most `C` in flight;
//! * the wave-level model, where each wave of up to `C` tasks is an
//!   arbitrary phase-type block and jobs branch on the number of waves
//!   they need.
//!
//! Task dropping enters through [`effective_tasks`]: a stage with `n`
//! tasks and drop ratio `theta` runs `ceil(n (1 - theta))` of them.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::phase_type::{PhaseTypeDist, PhaseTypeError};

/// Largest supported drop ratio.
pub const MAX_DROP_RATIO: f64 = 0.9;

const PMF_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JobModelError {
    #[error("drop ratio {0} outside [0, 0.9]")]
    DropRatioOutOfRange(f64),
    #[error("task count must be at least 1")]
    ZeroTasks,
    #[error("cluster needs at least one slot")]
    ZeroSlots,
    #[error("{name} must be positive, got {value}")]
    NonPositiveRate { name: &'static str, value: f64 },
    #[error("invalid probability mass function: {0}")]
    InvalidPmf(String),
    #[error("{stage} profile has {available} waves but {needed} are required")]
    ProfileTooShort {
        stage: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("{0} stage must start with probability one")]
    DefectiveStage(&'static str),
    #[error(transparent)]
    PhaseType(#[from] PhaseTypeError),
}

pub type Result<T> = std::result::Result<T, JobModelError>;

pub(crate) fn check_theta(theta: f64) -> Result<()> {
    if !(0.0..=MAX_DROP_RATIO + 1e-12).contains(&theta) {
        return Err(JobModelError::DropRatioOutOfRange(theta));
    }
    Ok(())
}

fn check_rate(name: &'static str, value: f64) -> Result<()> {
    if !(value > 0.0) || !value.is_finite() {
        return Err(JobModelError::NonPositiveRate { name, value });
    }
    Ok(())
}

/// Number of tasks left after dropping: `ceil(n (1 - theta))`, at least 1.
pub fn effective_tasks(n: usize, theta: f64) -> Result<usize> {
    if n == 0 {
        return Err(JobModelError::ZeroTasks);
    }
    check_theta(theta)?;
    let x = n as f64 * (1.0 - theta);
    // products like 10 * (1 - 0.3) land a few ulps off an integer
    let nearest = x.round();
    let eff = if (x - nearest).abs() < 1e-9 {
        nearest
    } else {
        x.ceil()
    };
    Ok((eff as usize).max(1))
}

/// Number of waves needed for `n_eff` tasks: `ceil(n_eff / C)`.
pub fn wave_count(n_eff: usize, cluster: &ClusterSpec) -> usize {
    n_eff.div_ceil(cluster.slots)
}

/// Mean setup time interpolated linearly between the no-drop and the
/// 90%-drop profiling points.
pub fn overhead_mean(theta: f64, overhead_at_0: f64, overhead_at_90: f64) -> Result<f64> {
    check_theta(theta)?;
    check_rate("overhead_at_0", overhead_at_0)?;
    check_rate("overhead_at_90", overhead_at_90)?;
    Ok(overhead_at_0 + (theta / MAX_DROP_RATIO) * (overhead_at_90 - overhead_at_0))
}

/// Probability mass over task counts `1..=N`; entry `i` is `P(count = i + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskCountPmf(Vec<f64>);

impl TaskCountPmf {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(JobModelError::InvalidPmf("empty support".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(JobModelError::InvalidPmf("negative or non-finite mass".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PMF_EPS {
            return Err(JobModelError::InvalidPmf(format!("mass sums to {total}")));
        }
        Ok(Self(probs))
    }

    /// All mass on `n`.
    pub fn point(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(JobModelError::ZeroTasks);
        }
        let mut probs = vec![0.0; n];
        probs[n - 1] = 1.0;
        Ok(Self(probs))
    }

    /// Uniform over `lo..=hi`.
    pub fn uniform(lo: usize, hi: usize) -> Result<Self> {
        if lo == 0 || hi < lo {
            return Err(JobModelError::InvalidPmf(format!("bad range {lo}..={hi}")));
        }
        let p = 1.0 / (hi - lo + 1) as f64;
        let probs = (1..=hi).map(|n| if n >= lo { p } else { 0.0 }).collect();
        Ok(Self(probs))
    }

    /// `P(count = n)`.
    pub fn prob(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.0.get(n - 1).copied().unwrap_or(0.0)
        }
    }

    /// Largest representable count `N`.
    pub fn max_count(&self) -> usize {
        self.0.len()
    }

    /// Largest count with positive mass.
    pub fn max_support(&self) -> usize {
        self.0.iter().rposition(|&p| p > 0.0).map_or(0, |i| i + 1)
    }

    /// `(count, probability)` pairs with positive mass.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| (i + 1, p))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn mean(&self) -> f64 {
        self.iter().map(|(n, p)| n as f64 * p).sum()
    }
}

/// Probability mass over wave counts `1..=D`; entry `i` is `q(i + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WavePmf(Vec<f64>);

impl WavePmf {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        TaskCountPmf::new(probs).map(|p| Self(p.0))
    }

    pub fn point(d: usize) -> Result<Self> {
        TaskCountPmf::point(d).map(|p| Self(p.0))
    }

    pub fn prob(&self, d: usize) -> f64 {
        if d == 0 {
            0.0
        } else {
            self.0.get(d - 1).copied().unwrap_or(0.0)
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    /// Largest wave count with positive mass.
    pub fn max_support(&self) -> usize {
        self.0.iter().rposition(|&p| p > 0.0).map_or(0, |i| i + 1)
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterSpec {
    pub slots: usize,
}

impl ClusterSpec {
    pub fn new(slots: usize) -> Result<Self> {
        if slots == 0 {
            return Err(JobModelError::ZeroSlots);
        }
        Ok(Self { slots })
    }
}

/// Per-priority workload description.
#[derive(Debug, Clone, PartialEq)]
pub struct JobClassSpec {
    /// Higher is more important.
    pub priority: u32,
    pub map_count: TaskCountPmf,
    pub reduce_count: TaskCountPmf,
    pub mu_map: f64,
    pub mu_reduce: f64,
    pub mu_overhead: f64,
    pub mu_shuffle: f64,
    pub theta_map: f64,
    pub theta_reduce: f64,
}

impl JobClassSpec {
    pub fn validate(&self) -> Result<()> {
        check_rate("mu_map", self.mu_map)?;
        check_rate("mu_reduce", self.mu_reduce)?;
        check_rate("mu_overhead", self.mu_overhead)?;
        check_rate("mu_shuffle", self.mu_shuffle)?;
        check_theta(self.theta_map)?;
        check_theta(self.theta_reduce)?;
        // revalidate in case the pmfs were mutated through struct literals
        TaskCountPmf::new(self.map_count.0.clone())?;
        TaskCountPmf::new(self.reduce_count.0.clone())?;
        Ok(())
    }

    /// Copy with the setup rate set from the interpolated mean overhead at
    /// this spec's map drop ratio.
    pub fn with_interpolated_overhead(&self, overhead_at_0: f64, overhead_at_90: f64) -> Result<Self> {
        let mean = overhead_mean(self.theta_map, overhead_at_0, overhead_at_90)?;
        Ok(Self {
            mu_overhead: 1.0 / mean,
            ..self.clone()
        })
    }

    /// Largest effective map and reduce counts.
    pub fn effective_maxima(&self) -> Result<(usize, usize)> {
        Ok((
            effective_tasks(self.map_count.max_count(), self.theta_map)?,
            effective_tasks(self.reduce_count.max_count(), self.theta_reduce)?,
        ))
    }
}

/// Task-level phase-type model of one job's processing time.
///
/// Phase order is `O, M_{N̄m}, ..., M_1, S, R_{N̄r}, ..., R_1`; all jobs
/// start in `O`. Raw counts that deflate to the same effective count share
/// one entry phase.
pub fn build_task_level_ph(spec: &JobClassSpec, cluster: &ClusterSpec) -> Result<PhaseTypeDist> {
    spec.validate()?;
    if cluster.slots == 0 {
        return Err(JobModelError::ZeroSlots);
    }
    let c = cluster.slots;
    let (nm, nr) = spec.effective_maxima()?;
    let dim = nm + nr + 2;
    let map_idx = |t: usize| 1 + (nm - t);
    let shuffle_idx = nm + 1;
    let reduce_idx = |u: usize| nm + 2 + (nr - u);

    let mut a = DMatrix::zeros(dim, dim);
    a[(0, 0)] = -spec.mu_overhead;
    for (t, p) in spec.map_count.iter() {
        let eff = effective_tasks(t, spec.theta_map)?;
        a[(0, map_idx(eff))] += spec.mu_overhead * p;
    }
    for t in 1..=nm {
        let rate = t.min(c) as f64 * spec.mu_map;
        let i = map_idx(t);
        a[(i, i)] = -rate;
        let next = if t == 1 { shuffle_idx } else { map_idx(t - 1) };
        a[(i, next)] = rate;
    }
    a[(shuffle_idx, shuffle_idx)] = -spec.mu_shuffle;
    for (u, p) in spec.reduce_count.iter() {
        let eff = effective_tasks(u, spec.theta_reduce)?;
        a[(shuffle_idx, reduce_idx(eff))] += spec.mu_shuffle * p;
    }
    for u in 1..=nr {
        let rate = u.min(c) as f64 * spec.mu_reduce;
        let i = reduce_idx(u);
        a[(i, i)] = -rate;
        if u > 1 {
            a[(i, reduce_idx(u - 1))] = rate;
        }
    }
    let mut initial = DVector::zeros(dim);
    initial[0] = 1.0;
    Ok(PhaseTypeDist::new(initial, a)?)
}

/// Task-level chain for a single stage of exponential tasks: entry at the
/// effective count, then one completion at a time with at most `C` running.
pub fn build_stage_ph(
    count: &TaskCountPmf,
    rate: f64,
    theta: f64,
    cluster: &ClusterSpec,
) -> Result<PhaseTypeDist> {
    check_rate("stage rate", rate)?;
    if cluster.slots == 0 {
        return Err(JobModelError::ZeroSlots);
    }
    let n = effective_tasks(count.max_count(), theta)?;
    let idx = |t: usize| n - t;
    let mut initial = DVector::zeros(n);
    for (t, p) in count.iter() {
        initial[idx(effective_tasks(t, theta)?)] += p;
    }
    let mut a = DMatrix::zeros(n, n);
    for t in 1..=n {
        let r = t.min(cluster.slots) as f64 * rate;
        a[(idx(t), idx(t))] = -r;
        if t > 1 {
            a[(idx(t), idx(t - 1))] = r;
        }
    }
    Ok(PhaseTypeDist::new(initial, a)?)
}

/// `q(d)`: probability that a stage needs `d` waves after dropping.
pub fn wave_probabilities(count: &TaskCountPmf, theta: f64, cluster: &ClusterSpec) -> Result<WavePmf> {
    check_theta(theta)?;
    if cluster.slots == 0 {
        return Err(JobModelError::ZeroSlots);
    }
    let max_waves = wave_count(effective_tasks(count.max_count(), theta)?, cluster);
    let mut q = vec![0.0; max_waves];
    for (t, p) in count.iter() {
        let d = wave_count(effective_tasks(t, theta)?, cluster);
        q[d - 1] += p;
    }
    Ok(WavePmf(q))
}

/// Phase-type blocks for each stage of the wave-level model. Entry `d` of
/// a wave list is the duration of the `(d+1)`-th wave.
#[derive(Debug, Clone)]
pub struct WaveProfile {
    pub setup: PhaseTypeDist,
    pub map_waves: Vec<PhaseTypeDist>,
    pub shuffle: PhaseTypeDist,
    pub reduce_waves: Vec<PhaseTypeDist>,
}

impl WaveProfile {
    /// Same block for every wave.
    pub fn homogeneous(
        setup: PhaseTypeDist,
        map_wave: PhaseTypeDist,
        map_waves: usize,
        shuffle: PhaseTypeDist,
        reduce_wave: PhaseTypeDist,
        reduce_waves: usize,
    ) -> Self {
        Self {
            setup,
            map_waves: vec![map_wave; map_waves],
            shuffle,
            reduce_waves: vec![reduce_wave; reduce_waves],
        }
    }
}

/// First wave index (0-based) executed by a job that needs `d` of `max`
/// waves: such a job runs the last `d` profile waves up to `max`.
pub fn first_wave_index(d: usize, max: usize) -> usize {
    max - d
}

/// Wave-level phase-type model of one job's processing time.
///
/// `D` is the largest wave count with positive mass; a job needing `d`
/// waves enters at wave `D - d + 1` and runs through wave `D`.
pub fn build_wave_level_ph(profile: &WaveProfile, q_map: &WavePmf, q_reduce: &WavePmf) -> Result<PhaseTypeDist> {
    let dm = q_map.max_support();
    let dr = q_reduce.max_support();
    if dm == 0 || dr == 0 {
        return Err(JobModelError::InvalidPmf("wave pmf has no mass".into()));
    }
    if profile.map_waves.len() < dm {
        return Err(JobModelError::ProfileTooShort {
            stage: "map",
            needed: dm,
            available: profile.map_waves.len(),
        });
    }
    if profile.reduce_waves.len() < dr {
        return Err(JobModelError::ProfileTooShort {
            stage: "reduce",
            needed: dr,
            available: profile.reduce_waves.len(),
        });
    }
    let full = |d: &PhaseTypeDist| d.mass_at_zero() <= PMF_EPS;
    if !full(&profile.setup) {
        return Err(JobModelError::DefectiveStage("setup"));
    }
    if !full(&profile.shuffle) {
        return Err(JobModelError::DefectiveStage("shuffle"));
    }
    if !profile.map_waves[..dm].iter().all(full) {
        return Err(JobModelError::DefectiveStage("map wave"));
    }
    if !profile.reduce_waves[..dr].iter().all(full) {
        return Err(JobModelError::DefectiveStage("reduce wave"));
    }

    // block layout: setup, map waves 1..=dm, shuffle, reduce waves 1..=dr
    let mut blocks: Vec<&PhaseTypeDist> = Vec::with_capacity(dm + dr + 2);
    blocks.push(&profile.setup);
    blocks.extend(profile.map_waves[..dm].iter());
    blocks.push(&profile.shuffle);
    blocks.extend(profile.reduce_waves[..dr].iter());
    let mut offsets = Vec::with_capacity(blocks.len());
    let mut v = 0;
    for b in &blocks {
        offsets.push(v);
        v += b.dim();
    }
    let setup_b = 0;
    let map_b = |d: usize| d; // 1-based wave index
    let shuffle_b = dm + 1;
    let reduce_b = |d: usize| dm + 1 + d;

    let mut a = DMatrix::zeros(v, v);
    for (b, block) in blocks.iter().enumerate() {
        let o = offsets[b];
        a.view_mut((o, o), (block.dim(), block.dim()))
            .copy_from(block.subgen());
    }
    let link = |a: &mut DMatrix<f64>, from: usize, to: usize, weight: f64| {
        let src = blocks[from];
        let dst = blocks[to];
        let outer = src.exit() * dst.initial().transpose() * weight;
        let mut view = a.view_mut((offsets[from], offsets[to]), (src.dim(), dst.dim()));
        view += outer;
    };
    for d in 1..=dm {
        let q = q_map.prob(d);
        if q > 0.0 {
            link(&mut a, setup_b, map_b(first_wave_index(d, dm) + 1), q);
        }
    }
    for d in 1..dm {
        link(&mut a, map_b(d), map_b(d + 1), 1.0);
    }
    link(&mut a, map_b(dm), shuffle_b, 1.0);
    for d in 1..=dr {
        let q = q_reduce.prob(d);
        if q > 0.0 {
            link(&mut a, shuffle_b, reduce_b(first_wave_index(d, dr) + 1), q);
        }
    }
    for d in 1..dr {
        link(&mut a, reduce_b(d), reduce_b(d + 1), 1.0);
    }

    let mut initial = DVector::zeros(v);
    initial
        .rows_mut(0, profile.setup.dim())
        .copy_from(profile.setup.initial());
    Ok(PhaseTypeDist::new(initial, a)?)
}
