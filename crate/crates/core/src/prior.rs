//! Per-system priors over latent states.
//!
//! Each window's state sequence yields an empirical transition matrix. The
//! matrices of one system are blended window by window with an exponential
//! moving average, made strictly positive with a small uniform mass, and
//! summarised by their stationary distribution.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100_000;

/// Dense row-major `n x n` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(domain("matrix rows must form a non-empty square"));
        }
        Ok(Self {
            n,
            data: rows.concat(),
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.n + b]
    }

    pub fn set(&mut self, a: usize, b: usize, v: f64) {
        self.data[a * self.n + b] = v;
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.data[a * self.n..(a + 1) * self.n]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn row_sum(&self, a: usize) -> f64 {
        self.row(a).iter().sum()
    }

    /// Sum of absolute entry differences.
    pub fn l1_distance(&self, other: &SquareMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    /// `pi * M`.
    pub fn left_multiply(&self, pi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (a, &p) in pi.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(a)) {
                *o += p * m;
            }
        }
        out
    }
}

/// Empirical transitions of one state sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub matrix: SquareMatrix,
    /// Visits to each state that have a successor in the sequence.
    pub visits: Vec<usize>,
}

/// `p[a][b]` = (number of `a -> b` steps) / (visits to `a` with a successor).
/// Rows of states without outgoing steps stay zero.
pub fn estimate_transition(states: &[usize], n_states: usize) -> Result<TransitionMatrix> {
    if states.len() < 2 {
        return Err(domain(format!(
            "need at least 2 states to estimate transitions, got {}",
            states.len()
        )));
    }
    if let Some(bad) = states.iter().find(|&&s| s >= n_states) {
        return Err(domain(format!("state {bad} outside 0..{n_states}")));
    }
    let mut counts = SquareMatrix::zeros(n_states);
    let mut visits = vec![0usize; n_states];
    for pair in states.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        visits[a] += 1;
        counts.set(a, b, counts.get(a, b) + 1.0);
    }
    for (a, &n) in visits.iter().enumerate() {
        if n > 0 {
            for b in 0..n_states {
                counts.set(a, b, counts.get(a, b) / n as f64);
            }
        }
    }
    Ok(TransitionMatrix {
        matrix: counts,
        visits,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTransitionMatrix {
    pub matrix: SquareMatrix,
    pub lambda: f64,
    pub windows_folded: usize,
}

/// `M = lambda * M_prev + (1 - lambda) * P`; the first window starts at `P`.
pub fn ema_update(
    prev: Option<&SmoothedTransitionMatrix>,
    p: &TransitionMatrix,
    lambda: f64,
) -> Result<SmoothedTransitionMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(domain(format!("smoothing factor {lambda} outside [0, 1]")));
    }
    let Some(prev) = prev else {
        return Ok(SmoothedTransitionMatrix {
            matrix: p.matrix.clone(),
            lambda,
            windows_folded: 1,
        });
    };
    if prev.matrix.size() != p.matrix.size() {
        return Err(domain(format!(
            "cannot blend {0}x{0} history with {1}x{1} transitions",
            prev.matrix.size(),
            p.matrix.size()
        )));
    }
    let data = prev
        .matrix
        .data
        .iter()
        .zip(&p.matrix.data)
        .map(|(m, q)| lambda * m + (1.0 - lambda) * q)
        .collect();
    Ok(SmoothedTransitionMatrix {
        matrix: SquareMatrix {
            n: p.matrix.size(),
            data,
        },
        lambda,
        windows_folded: prev.windows_folded + 1,
    })
}

/// Adds `epsilon` to every cell and renormalizes rows, giving a strictly
/// positive (hence irreducible and aperiodic) stochastic matrix.
pub fn regularize(m: &SquareMatrix, epsilon: f64) -> Result<SquareMatrix> {
    if !(epsilon > 0.0) {
        return Err(domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let n = m.size();
    let mut out = m.clone();
    for a in 0..n {
        let row = &mut out.data[a * n..(a + 1) * n];
        row.iter_mut().for_each(|v| *v += epsilon);
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub pi: Vec<f64>,
    /// `||pi M - pi||_1` of the returned vector.
    pub residual: f64,
    pub iterations: usize,
}

/// Stationary distribution of a strictly positive stochastic matrix.
///
/// A direct elimination (Grassmann–Taksar–Heyman, subtraction-free and
/// stable for nearly decomposable chains) supplies the starting vector;
/// power iteration `pi <- pi M` then runs until `||pi M - pi||_1 <= tol`.
/// The direct start matters: with small `epsilon` and large smoothing
/// factors, chains can have several nearly absorbing states, and power
/// iteration from the uniform vector would need millions of steps.
pub fn steady_state(m: &SquareMatrix, tol: f64, max_iter: usize) -> Result<SteadyState> {
    validate_positive_stochastic(m)?;
    let start = gth_stationary(m);
    power_iteration(m, start, tol, max_iter)
}

/// Power iteration from `start` until the fixed-point residual drops to `tol`.
pub fn power_iteration(m: &SquareMatrix, start: Vec<f64>, tol: f64, max_iter: usize) -> Result<SteadyState> {
    if start.len() != m.size() {
        return Err(domain("start vector length does not match the matrix"));
    }
    let mut pi = normalized(start);
    let mut iterations = 0;
    loop {
        let next = normalized(m.left_multiply(&pi));
        let residual = l1(&m.left_multiply(&next), &next);
        if residual <= tol {
            return Ok(SteadyState {
                pi: next,
                residual,
                iterations,
            });
        }
        if iterations >= max_iter {
            return Err(Error::Numeric {
                message: format!("steady state did not converge in {max_iter} iterations"),
                residual,
            });
        }
        pi = next;
        iterations += 1;
    }
}

fn validate_positive_stochastic(m: &SquareMatrix) -> Result<()> {
    for a in 0..m.size() {
        if m.row(a).iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(domain(format!("row {a} has a non-positive entry; regularize first")));
        }
        let s = m.row_sum(a);
        if (s - 1.0).abs() > 1e-9 {
            return Err(domain(format!("row {a} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Stationary vector by state reduction without subtractions.
fn gth_stationary(m: &SquareMatrix) -> Vec<f64> {
    let n = m.size();
    let mut a = m.data.clone();
    for k in (1..n).rev() {
        let s: f64 = (0..k).map(|j| a[k * n + j]).sum();
        for i in 0..k {
            a[i * n + k] /= s;
        }
        for i in 0..k {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..k {
                a[i * n + j] += aik * a[k * n + j];
            }
        }
    }
    let mut pi = vec![0.0; n];
    pi[0] = 1.0;
    for k in 1..n {
        pi[k] = (0..k).map(|i| pi[i] * a[i * n + k]).sum();
    }
    normalized(pi)
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            epsilon: DEFAULT_EPSILON,
            tolerance: DEFAULT_TOLERANCE,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// Incremental prior for one system.
#[derive(Debug, Clone)]
pub struct PriorFold {
    n_states: usize,
    config: PriorConfig,
    smoothed: Option<SmoothedTransitionMatrix>,
}

impl PriorFold {
    pub fn new(n_states: usize, config: PriorConfig) -> Self {
        Self {
            n_states,
            config,
            smoothed: None,
        }
    }

    /// Folds in one window's state sequence and returns the current prior.
    pub fn push(&mut self, states: &[usize]) -> Result<SteadyState> {
        let p = estimate_transition(states, self.n_states)?;
        let m = ema_update(self.smoothed.as_ref(), &p, self.config.lambda)?;
        let reg = regularize(&m.matrix, self.config.epsilon)?;
        let ss = steady_state(&reg, self.config.tolerance, self.config.max_iter)?;
        self.smoothed = Some(m);
        Ok(ss)
    }

    pub fn smoothed(&self) -> Option<&SmoothedTransitionMatrix> {
        self.smoothed.as_ref()
    }
}

/// One prior per window of a system, folded in window order.
/// `windows` pairs each window id with its latent state sequence.
pub fn priors_for_system(
    windows: &[(u32, Vec<usize>)],
    n_states: usize,
    config: PriorConfig,
) -> Result<Vec<(u32, SteadyState)>> {
    let mut fold = PriorFold::new(n_states, config);
    windows
        .iter()
        .map(|(id, states)| Ok((*id, fold.push(states)?)))
        .collect()
}
