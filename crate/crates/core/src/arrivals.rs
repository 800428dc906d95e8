//! Marked Markovian arrival processes (MMAP[K]).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

const GENERATOR_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArrivalError {
    #[error("every class arrival rate is zero")]
    AllRatesZero,
    #[error("arrival rate {0} is negative or not finite")]
    InvalidRate(f64),
    #[error("process needs at least one marked class")]
    NoClasses,
    #[error("matrix dimensions are inconsistent")]
    DimensionMismatch,
    #[error("invalid MMAP: {0}")]
    InvalidMatrix(String),
    #[error("the underlying chain has no unique stationary distribution")]
    NoStationaryDistribution,
    #[error("offered load is zero, cannot calibrate")]
    ZeroOfferedLoad,
    #[error("target utilization {0} must lie in (0, 1)")]
    InvalidTarget(f64),
    #[error("expected {expected} mean service times, got {got}")]
    ServiceCountMismatch { expected: usize, got: usize },
    #[error("horizon must be positive, got {0}")]
    InvalidHorizon(f64),
}

pub type Result<T> = std::result::Result<T, ArrivalError>;

/// `(D_0, D_1, ..., D_K)`: hidden transitions and class-marked arrivals.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedArrivalProcess {
    d0: DMatrix<f64>,
    marked: Vec<DMatrix<f64>>,
}

impl MarkedArrivalProcess {
    pub fn new(d0: DMatrix<f64>, marked: Vec<DMatrix<f64>>) -> Result<Self> {
        let m = d0.nrows();
        if m == 0 || d0.ncols() != m {
            return Err(ArrivalError::DimensionMismatch);
        }
        if marked.is_empty() {
            return Err(ArrivalError::NoClasses);
        }
        if marked.iter().any(|d| d.nrows() != m || d.ncols() != m) {
            return Err(ArrivalError::DimensionMismatch);
        }
        for (k, d) in marked.iter().enumerate() {
            if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(ArrivalError::InvalidMatrix(format!(
                    "D_{} has a negative or non-finite entry",
                    k + 1
                )));
            }
        }
        for i in 0..m {
            for j in 0..m {
                let v = d0[(i, j)];
                if !v.is_finite() {
                    return Err(ArrivalError::InvalidMatrix("D_0 has a non-finite entry".into()));
                }
                if i == j && v >= 0.0 {
                    return Err(ArrivalError::InvalidMatrix(format!(
                        "D_0 diagonal entry {i} must be negative"
                    )));
                }
                if i != j && v < 0.0 {
                    return Err(ArrivalError::InvalidMatrix(format!(
                        "D_0 off-diagonal entry ({i},{j}) is negative"
                    )));
                }
            }
            let row: f64 = d0.row(i).sum() + marked.iter().map(|d| d.row(i).sum()).sum::<f64>();
            let scale = d0[(i, i)].abs().max(1.0);
            if row.abs() > GENERATOR_EPS * scale {
                return Err(ArrivalError::InvalidMatrix(format!(
                    "row {i} of D sums to {row}, not zero"
                )));
            }
        }
        Ok(Self { d0, marked })
    }

    /// `m_a = 1`, `D_k = [lambda_k]`, `D_0 = [-sum lambda_k]`.
    pub fn marked_poisson(rates: &[f64]) -> Result<Self> {
        if rates.is_empty() {
            return Err(ArrivalError::NoClasses);
        }
        if let Some(&r) = rates.iter().find(|r| !r.is_finite() || **r < 0.0) {
            return Err(ArrivalError::InvalidRate(r));
        }
        let total: f64 = rates.iter().sum();
        if total <= 0.0 {
            return Err(ArrivalError::AllRatesZero);
        }
        Self::new(
            DMatrix::from_element(1, 1, -total),
            rates.iter().map(|&r| DMatrix::from_element(1, 1, r)).collect(),
        )
    }

    pub fn num_classes(&self) -> usize {
        self.marked.len()
    }

    /// Number of hidden states `m_a`.
    pub fn order(&self) -> usize {
        self.d0.nrows()
    }

    pub fn d0(&self) -> &DMatrix<f64> {
        &self.d0
    }

    pub fn marked(&self) -> &[DMatrix<f64>] {
        &self.marked
    }

    /// `D = D_0 + sum_k D_k`.
    pub fn generator(&self) -> DMatrix<f64> {
        self.marked.iter().fold(self.d0.clone(), |acc, d| acc + d)
    }

    /// Stationary vector `pi` of `D`: `pi D = 0`, `pi 1 = 1`.
    pub fn stationary(&self) -> Result<DVector<f64>> {
        let m = self.order();
        if m == 1 {
            return Ok(DVector::from_element(1, 1.0));
        }
        // replace the last column of D with ones and solve pi M = e_m
        let mut mt = self.generator().transpose();
        for j in 0..m {
            mt[(m - 1, j)] = 1.0;
        }
        let mut rhs = DVector::zeros(m);
        rhs[m - 1] = 1.0;
        let lu = mt.lu();
        if !lu.is_invertible() {
            return Err(ArrivalError::NoStationaryDistribution);
        }
        let pi = lu.solve(&rhs).ok_or(ArrivalError::NoStationaryDistribution)?;
        if pi.iter().any(|p| !p.is_finite() || *p < -1e-9) {
            return Err(ArrivalError::NoStationaryDistribution);
        }
        Ok(pi.map(|p| p.max(0.0)))
    }

    /// Long-run class arrival rates `lambda_k = pi D_k 1`.
    pub fn class_rates(&self) -> Result<Vec<f64>> {
        let pi = self.stationary()?;
        let ones = DVector::from_element(self.order(), 1.0);
        Ok(self
            .marked
            .iter()
            .map(|d| (pi.transpose() * d * &ones)[(0, 0)].max(0.0))
            .collect())
    }

    pub fn total_rate(&self) -> Result<f64> {
        Ok(self.class_rates()?.iter().sum())
    }

    /// Uniform time scaling of every matrix by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(ArrivalError::InvalidRate(factor));
        }
        Self::new(
            &self.d0 * factor,
            self.marked.iter().map(|d| d * factor).collect(),
        )
    }

    /// Offered load `sum_k lambda_k E[S_k]`.
    pub fn offered_load(&self, mean_service: &[f64]) -> Result<f64> {
        let rates = self.class_rates()?;
        if rates.len() != mean_service.len() {
            return Err(ArrivalError::ServiceCountMismatch {
                expected: rates.len(),
                got: mean_service.len(),
            });
        }
        Ok(rates.iter().zip(mean_service).map(|(l, s)| l * s).sum())
    }

    /// Rescales the process so that the offered load equals `target_rho`.
    pub fn calibrate_for_utilization(&self, mean_service: &[f64], target_rho: f64) -> Result<Self> {
        if !(target_rho > 0.0 && target_rho < 1.0) {
            return Err(ArrivalError::InvalidTarget(target_rho));
        }
        let load = self.offered_load(mean_service)?;
        if !(load > 0.0) {
            return Err(ArrivalError::ZeroOfferedLoad);
        }
        self.scaled(target_rho / load)
    }

    /// Incremental arrival generator starting from a stationary state.
    pub fn stream<R: Rng>(&self, mut rng: R) -> Result<ArrivalStream<R>> {
        let pi = self.stationary()?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut state = self.order() - 1;
        for (i, p) in pi.iter().enumerate() {
            acc += p;
            if u < acc {
                state = i;
                break;
            }
        }
        let m = self.order();
        let tables = (0..m)
            .map(|i| {
                let rate = -self.d0[(i, i)];
                let mut acc = 0.0;
                let mut table = Vec::new();
                for j in 0..m {
                    if j != i && self.d0[(i, j)] > 0.0 {
                        acc += self.d0[(i, j)] / rate;
                        table.push((Transition { class: None, to: j }, acc));
                    }
                }
                for (k, d) in self.marked.iter().enumerate() {
                    for j in 0..m {
                        if d[(i, j)] > 0.0 {
                            acc += d[(i, j)] / rate;
                            table.push((Transition { class: Some(k), to: j }, acc));
                        }
                    }
                }
                (rate, table)
            })
            .collect();
        Ok(ArrivalStream {
            tables,
            state,
            clock: 0.0,
            rng,
        })
    }

    /// All arrivals in `[0, horizon]`, in time order.
    pub fn sample_stream<R: Rng>(&self, horizon: f64, rng: R) -> Result<Vec<Arrival>> {
        if !(horizon > 0.0) {
            return Err(ArrivalError::InvalidHorizon(horizon));
        }
        let mut out = Vec::new();
        for a in self.stream(rng)? {
            if a.time > horizon {
                break;
            }
            out.push(a);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub time: f64,
    /// 0-based mark index (`D_{class+1}`).
    pub class: usize,
}

#[derive(Debug, Clone, Copy)]
struct Transition {
    class: Option<usize>,
    to: usize,
}

/// Simulates the CTMC of `D`, yielding each marked transition as an arrival.
pub struct ArrivalStream<R> {
    tables: Vec<(f64, Vec<(Transition, f64)>)>,
    state: usize,
    clock: f64,
    rng: R,
}

impl<R: Rng> Iterator for ArrivalStream<R> {
    type Item = Arrival;

    fn next(&mut self) -> Option<Arrival> {
        loop {
            let (rate, table) = &self.tables[self.state];
            let e: f64 = self.rng.sample(rand_distr::Exp1);
            self.clock += e / rate;
            let u: f64 = self.rng.random();
            let (tr, _) = table
                .iter()
                .find(|(_, c)| u < *c)
                .or(table.last())
                .copied()?;
            self.state = tr.to;
            if let Some(class) = tr.class {
                return Some(Arrival {
                    time: self.clock,
                    class,
                });
            }
        }
    }
}
