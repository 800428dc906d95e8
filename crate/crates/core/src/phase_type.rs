//! Continuous phase-type distributions.
//!
//! A [`PhaseTypeDist`] is the time to absorption of a finite CTMC with
//! transient phases described by a sub-generator `A` and an initial vector
//! `alpha`. Exit rates are `-A·1`. Every processing-time quantity in the
//! crate (stage, wave, whole job) is represented this way.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

/// Tolerance on row-rate conservation and initial-vector mass.
pub const VALIDATION_EPS: f64 = 1e-9;

/// Poisson tail mass left out by the uniformization series.
const UNIFORMIZATION_TAIL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhaseTypeError {
    #[error("rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("a phase-type distribution needs at least one phase")]
    ZeroPhases,
    #[error("initial vector has {initial} entries but the sub-generator is {rows}x{cols}")]
    DimensionMismatch {
        initial: usize,
        rows: usize,
        cols: usize,
    },
    #[error("sub-generator entry ({row},{col}) = {value} is invalid: {reason}")]
    InvalidSubgenerator {
        row: usize,
        col: usize,
        value: f64,
        reason: &'static str,
    },
    #[error("initial vector is invalid: {0}")]
    InvalidInitial(String),
    #[error("sub-generator is numerically singular")]
    SingularSubgenerator,
    #[error("time must be nonnegative, got {0}")]
    NegativeTime(f64),
    #[error("moment order must be at least 1")]
    ZeroOrder,
    #[error("probability must lie in [0, 1), got {0}")]
    InvalidProbability(f64),
}

pub type Result<T> = std::result::Result<T, PhaseTypeError>;

/// Exit marker in the sampling jump tables.
const EXIT: usize = usize::MAX;

/// Phase-type distribution `(alpha, A)` with cached exit vector and
/// sampling tables. Immutable after construction.
#[derive(Debug, Clone)]
pub struct PhaseTypeDist {
    initial: DVector<f64>,
    subgen: DMatrix<f64>,
    exit: DVector<f64>,
    // cumulative initial probabilities, last entry is the total mass
    initial_cum: Vec<f64>,
    // per phase: holding rate and cumulative jump probabilities
    jumps: Vec<(f64, Vec<(usize, f64)>)>,
}

impl PartialEq for PhaseTypeDist {
    fn eq(&self, other: &Self) -> bool {
        self.initial == other.initial && self.subgen == other.subgen
    }
}

impl PhaseTypeDist {
    /// Validates `(initial, subgen)` and builds the distribution.
    pub fn new(initial: DVector<f64>, subgen: DMatrix<f64>) -> Result<Self> {
        let v = initial.len();
        if v == 0 {
            return Err(PhaseTypeError::ZeroPhases);
        }
        if subgen.nrows() != v || subgen.ncols() != v {
            return Err(PhaseTypeError::DimensionMismatch {
                initial: v,
                rows: subgen.nrows(),
                cols: subgen.ncols(),
            });
        }
        let mut mass = 0.0;
        for (i, &p) in initial.iter().enumerate() {
            if !p.is_finite() || !(0.0..=1.0 + VALIDATION_EPS).contains(&p) {
                return Err(PhaseTypeError::InvalidInitial(format!(
                    "entry {i} = {p} outside [0, 1]"
                )));
            }
            mass += p;
        }
        if mass > 1.0 + VALIDATION_EPS {
            return Err(PhaseTypeError::InvalidInitial(format!(
                "entries sum to {mass} > 1"
            )));
        }

        let mut exit = DVector::zeros(v);
        for i in 0..v {
            let mut row_sum = 0.0;
            for j in 0..v {
                let a = subgen[(i, j)];
                if !a.is_finite() {
                    return Err(PhaseTypeError::InvalidSubgenerator {
                        row: i,
                        col: j,
                        value: a,
                        reason: "not finite",
                    });
                }
                if i == j && a >= 0.0 {
                    return Err(PhaseTypeError::InvalidSubgenerator {
                        row: i,
                        col: j,
                        value: a,
                        reason: "diagonal must be strictly negative",
                    });
                }
                if i != j && a < 0.0 {
                    return Err(PhaseTypeError::InvalidSubgenerator {
                        row: i,
                        col: j,
                        value: a,
                        reason: "off-diagonal must be nonnegative",
                    });
                }
                row_sum += a;
            }
            let scale = subgen[(i, i)].abs().max(1.0);
            if row_sum > VALIDATION_EPS * scale {
                return Err(PhaseTypeError::InvalidSubgenerator {
                    row: i,
                    col: i,
                    value: subgen[(i, i)],
                    reason: "row leaves more rate than the diagonal holds",
                });
            }
            exit[i] = (-row_sum).max(0.0);
        }

        // (-A) must be invertible for absorption to be certain.
        let neg = -subgen.clone();
        if !is_invertible(&neg) {
            return Err(PhaseTypeError::SingularSubgenerator);
        }

        let mut initial_cum = Vec::with_capacity(v);
        let mut acc = 0.0;
        for &p in initial.iter() {
            acc += p;
            initial_cum.push(acc);
        }
        let jumps = (0..v)
            .map(|i| {
                let rate = -subgen[(i, i)];
                let mut acc = 0.0;
                let mut table = Vec::new();
                for j in 0..v {
                    if j != i && subgen[(i, j)] > 0.0 {
                        acc += subgen[(i, j)] / rate;
                        table.push((j, acc));
                    }
                }
                if exit[i] > 0.0 {
                    acc += exit[i] / rate;
                    table.push((EXIT, acc));
                }
                (rate, table)
            })
            .collect();

        Ok(Self {
            initial,
            subgen,
            exit,
            initial_cum,
            jumps,
        })
    }

    /// Row-major convenience constructor.
    pub fn from_rows(initial: &[f64], rows: &[Vec<f64>]) -> Result<Self> {
        let v = initial.len();
        if rows.len() != v || rows.iter().any(|r| r.len() != v) {
            return Err(PhaseTypeError::DimensionMismatch {
                initial: v,
                rows: rows.len(),
                cols: rows.first().map_or(0, Vec::len),
            });
        }
        let subgen = DMatrix::from_fn(v, v, |i, j| rows[i][j]);
        Self::new(DVector::from_column_slice(initial), subgen)
    }

    pub fn exponential(rate: f64) -> Result<Self> {
        Self::erlang(1, rate)
    }

    /// `k` exponential phases in series, each with the given rate.
    pub fn erlang(k: usize, rate: f64) -> Result<Self> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(PhaseTypeError::NonPositiveRate(rate));
        }
        if k == 0 {
            return Err(PhaseTypeError::ZeroPhases);
        }
        let mut subgen = DMatrix::zeros(k, k);
        for i in 0..k {
            subgen[(i, i)] = -rate;
            if i + 1 < k {
                subgen[(i, i + 1)] = rate;
            }
        }
        let mut initial = DVector::zeros(k);
        initial[0] = 1.0;
        Self::new(initial, subgen)
    }

    /// Number of transient phases.
    pub fn dim(&self) -> usize {
        self.initial.len()
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.initial
    }

    pub fn subgen(&self) -> &DMatrix<f64> {
        &self.subgen
    }

    pub fn exit(&self) -> &DVector<f64> {
        &self.exit
    }

    /// Probability of absorbing immediately, `1 - alpha·1`.
    pub fn mass_at_zero(&self) -> f64 {
        (1.0 - self.initial.sum()).max(0.0)
    }

    pub fn mean(&self) -> Result<f64> {
        self.moment(1)
    }

    /// Raw moment `n! · alpha (-A)^{-n} 1`, by repeated LU solves.
    pub fn moment(&self, n: u32) -> Result<f64> {
        if n == 0 {
            return Err(PhaseTypeError::ZeroOrder);
        }
        let lu = (-self.subgen.clone()).lu();
        let mut x = DVector::from_element(self.dim(), 1.0);
        let mut factorial = 1.0;
        for k in 1..=n {
            x = lu.solve(&x).ok_or(PhaseTypeError::SingularSubgenerator)?;
            factorial *= f64::from(k);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(PhaseTypeError::SingularSubgenerator);
        }
        Ok(factorial * self.initial.dot(&x))
    }

    pub fn variance(&self) -> Result<f64> {
        let m1 = self.moment(1)?;
        Ok(self.moment(2)? - m1 * m1)
    }

    /// Squared coefficient of variation.
    pub fn scv(&self) -> Result<f64> {
        let m1 = self.moment(1)?;
        Ok(self.variance()? / (m1 * m1))
    }

    /// `P(X > t) = alpha exp(A t) 1`, via uniformization.
    pub fn survival(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(PhaseTypeError::NegativeTime(t));
        }
        if t == 0.0 {
            return Ok(self.initial.sum().min(1.0));
        }
        Ok(self.uniformized(t).survival(t))
    }

    /// Mass `alpha P^k 1` of the uniformized chain for every `k` needed up
    /// to time `t_max`. These do not depend on `t`, so one pass serves many
    /// survival evaluations.
    fn uniformized(&self, t_max: f64) -> Uniformized {
        let v = self.dim();
        let lambda = (0..v)
            .map(|i| -self.subgen[(i, i)])
            .fold(0.0_f64, f64::max);
        // P = I + A / lambda, substochastic
        let mut p = self.subgen.clone() / lambda;
        for i in 0..v {
            p[(i, i)] += 1.0;
        }
        let cap = uniformization_cap(lambda * t_max);
        let mut row = self.initial.transpose();
        let mut mass = Vec::with_capacity(cap + 1);
        mass.push(row.sum());
        for _ in 0..cap {
            row = &row * &p;
            let m = row.sum();
            mass.push(m);
            if m < UNIFORMIZATION_TAIL * 1e-3 {
                break;
            }
        }
        Uniformized { lambda, mass }
    }

    /// `F(t) = 1 - alpha exp(A t) 1`.
    pub fn cdf(&self, t: f64) -> Result<f64> {
        Ok((1.0 - self.survival(t)?).clamp(0.0, 1.0))
    }

    /// Smallest `t` with `F(t) >= p`, found by bracketing and bisection.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&p) {
            return Err(PhaseTypeError::InvalidProbability(p));
        }
        if self.cdf(0.0)? >= p {
            return Ok(0.0);
        }
        let mut hi = self.mean()?.max(f64::MIN_POSITIVE);
        while self.cdf(hi)? < p {
            hi *= 2.0;
        }
        let u = self.uniformized(hi);
        let cdf = |t: f64| 1.0 - u.survival(t);
        let mut lo = 0.0;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) >= p {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-12 * hi {
                break;
            }
        }
        Ok(hi)
    }

    /// Distribution of `X + Y` for independent `X ~ self`, `Y ~ other`.
    pub fn convolve(&self, other: &PhaseTypeDist) -> PhaseTypeDist {
        let va = self.dim();
        let vb = other.dim();
        let mut subgen = DMatrix::zeros(va + vb, va + vb);
        subgen
            .view_mut((0, 0), (va, va))
            .copy_from(&self.subgen);
        subgen
            .view_mut((va, va), (vb, vb))
            .copy_from(&other.subgen);
        subgen
            .view_mut((0, va), (va, vb))
            .copy_from(&(&self.exit * other.initial.transpose()));
        let mut initial = DVector::zeros(va + vb);
        initial.rows_mut(0, va).copy_from(&self.initial);
        let carry = self.mass_at_zero();
        initial
            .rows_mut(va, vb)
            .copy_from(&(&other.initial * carry));
        Self::new(initial, subgen).expect("convolution of valid phase-type distributions is valid")
    }

    /// Same shape, time axis stretched by `factor` (mean scales by `factor`).
    pub fn scale_time(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(PhaseTypeError::NonPositiveRate(factor));
        }
        Self::new(self.initial.clone(), &self.subgen / factor)
    }

    /// Rescaled copy whose mean equals `mean`.
    pub fn with_mean(&self, mean: f64) -> Result<Self> {
        let current = self.mean()?;
        if !(current > 0.0) {
            return Err(PhaseTypeError::InvalidInitial(
                "cannot rescale a distribution with zero mean".into(),
            ));
        }
        self.scale_time(mean / current)
    }

    /// Draws one value by walking the underlying chain until absorption.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut phase = match self.initial_cum.iter().position(|&c| u < c) {
            Some(i) => i,
            None => return 0.0,
        };
        let mut elapsed = 0.0;
        loop {
            let (rate, table) = &self.jumps[phase];
            let e: f64 = rng.sample(rand_distr::Exp1);
            elapsed += e / rate;
            let u: f64 = rng.random();
            let next = table
                .iter()
                .find(|&&(_, c)| u < c)
                .or(table.last())
                .map(|&(j, _)| j)
                .unwrap_or(EXIT);
            if next == EXIT {
                return elapsed;
            }
            phase = next;
        }
    }
}

fn is_invertible(m: &DMatrix<f64>) -> bool {
    let lu = m.clone().lu();
    if !lu.is_invertible() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let u = lu.u();
    let min_pivot = (0..m.nrows())
        .map(|i| u[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    min_pivot > scale * 1e-14
}

fn uniformization_cap(lt: f64) -> usize {
    (lt + 40.0 * lt.sqrt() + 200.0).ceil() as usize
}

struct Uniformized {
    lambda: f64,
    mass: Vec<f64>,
}

impl Uniformized {
    /// Survival at `t > 0`, no later than the time the terms were built for.
    fn survival(&self, t: f64) -> f64 {
        let lt = self.lambda * t;
        let ln_lt = lt.ln();
        let cap = uniformization_cap(lt);
        let mut log_w = -lt;
        let mut cum = 0.0;
        let mut survival = 0.0;
        for k in 0..=cap {
            if k > 0 {
                log_w += ln_lt - (k as f64).ln();
            }
            let w = log_w.exp();
            cum += w;
            // terms past the stored ones have negligible mass
            survival += w * self.mass.get(k).copied().unwrap_or(0.0);
            if (k as f64) > lt && 1.0 - cum < UNIFORMIZATION_TAIL {
                break;
            }
        }
        survival.clamp(0.0, 1.0)
    }
}
