//! Exact discrete optimal transport and Wasserstein-ball worst cases.
//!
//! All distributions here are finite: a list of support points in `ℝ^d` with
//! probability weights. `wasserstein1` solves the transportation LP exactly;
//! [`BallProblem`] evaluates the worst-case expected loss over a Wasserstein
//! ball restricted to a finite candidate support, both as a primal LP and
//! through its one-dimensional dual in the multiplier `γ`.

mod ball;
mod flow;
pub mod lp;

pub use ball::{
    dual_infimum, dual_value, primal_worst_case, random_instance, BallProblem, DualOptimum,
    WorstCase, MAX_PLAN_ENTRIES,
};
pub use flow::{solve_transportation, TransportSolution};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest support handled by the exact solvers.
pub const MAX_SUPPORT: usize = 64;
/// Tolerance on `Σ weights = 1`.
pub const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("invalid cost: {0}")]
    Cost(String),
    #[error("support of {0} points exceeds the limit of {MAX_SUPPORT}")]
    TooLarge(usize),
    #[error("mixture weight {0} outside [0, 1]")]
    MixtureWeight(f64),
    #[error("multiplier must be non-negative, got {0}")]
    NegativeMultiplier(f64),
    #[error("invalid ball problem: {0}")]
    Problem(String),
    #[error("no distribution on the candidate support lies within radius {radius} (minimum reachable cost {min_cost})")]
    Infeasible { radius: f64, min_cost: f64 },
    #[error("solver failure: {0}")]
    Solver(String),
}

/// Finite support with probability weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution", into = "RawDistribution")]
pub struct DiscreteDistribution {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawDistribution {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl TryFrom<RawDistribution> for DiscreteDistribution {
    type Error = TransportError;
    fn try_from(r: RawDistribution) -> Result<Self, Self::Error> {
        Self::new(r.points, r.weights)
    }
}

impl From<DiscreteDistribution> for RawDistribution {
    fn from(d: DiscreteDistribution) -> Self {
        Self {
            points: d.points,
            weights: d.weights,
        }
    }
}

impl DiscreteDistribution {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self, TransportError> {
        if points.is_empty() {
            return Err(TransportError::Distribution("empty support".into()));
        }
        if points.len() != weights.len() {
            return Err(TransportError::Distribution(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(TransportError::Distribution(
                "points must share a positive dimension".into(),
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(TransportError::Distribution("non-finite coordinate".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TransportError::Distribution(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(TransportError::Distribution(format!(
                "weights sum to {total}, not 1"
            )));
        }
        Ok(Self { points, weights })
    }

    /// Equal weights on each point (duplicates allowed).
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self, TransportError> {
        let n = points.len().max(1);
        Self::new(points, vec![1.0 / n as f64; n])
    }

    pub fn dirac(point: Vec<f64>) -> Result<Self, TransportError> {
        Self::new(vec![point], vec![1.0])
    }

    /// One-dimensional convenience constructor.
    pub fn on_line(points: &[f64], weights: &[f64]) -> Result<Self, TransportError> {
        Self::new(points.iter().map(|&p| vec![p]).collect(), weights.to_vec())
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Merges identical support points (summing their weights) and drops
    /// zero-weight atoms. Points come back in lexicographic order.
    pub fn normalized(&self) -> Self {
        let mut order: Vec<usize> = (0..self.len()).filter(|&i| self.weights[i] > 0.0).collect();
        order.sort_by(|&a, &b| lex_cmp(&self.points[a], &self.points[b]));
        let mut points: Vec<Vec<f64>> = Vec::with_capacity(order.len());
        let mut weights: Vec<f64> = Vec::with_capacity(order.len());
        for i in order {
            match points.last() {
                Some(last) if lex_cmp(last, &self.points[i]).is_eq() => {
                    *weights.last_mut().unwrap() += self.weights[i];
                }
                _ => {
                    points.push(self.points[i].clone());
                    weights.push(self.weights[i]);
                }
            }
        }
        Self { points, weights }
    }

    /// Expected value of `f` under the distribution.
    pub fn expect(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * f(p))
            .sum()
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.total_cmp(y);
        if o.is_ne() {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

/// Ground cost between support points.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostSpec {
    /// `c(x, y) = ‖x − y‖₁`.
    #[default]
    L1,
    /// Explicit matrix indexed by (first support, second support), used as-is
    /// without merging duplicate points.
    Precomputed { matrix: Vec<Vec<f64>> },
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

impl CostSpec {
    /// Cost matrix between two point lists.
    pub fn matrix(
        &self,
        from: &[Vec<f64>],
        to: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>, TransportError> {
        match self {
            CostSpec::L1 => {
                if from.iter().chain(to).any(|p| p.len() != from[0].len()) {
                    return Err(TransportError::Cost("point dimensions differ".into()));
                }
                Ok(from
                    .iter()
                    .map(|x| to.iter().map(|y| l1_distance(x, y)).collect())
                    .collect())
            }
            CostSpec::Precomputed { matrix } => {
                if matrix.len() != from.len() || matrix.iter().any(|r| r.len() != to.len()) {
                    return Err(TransportError::Cost(format!(
                        "matrix is not {}x{}",
                        from.len(),
                        to.len()
                    )));
                }
                if matrix.iter().flatten().any(|c| !c.is_finite() || *c < 0.0) {
                    return Err(TransportError::Cost(
                        "entries must be finite and non-negative".into(),
                    ));
                }
                Ok(matrix.clone())
            }
        }
    }
}

/// Value and optimal coupling of a Wasserstein-1 computation.
#[derive(Debug, Clone, PartialEq)]
pub struct Wasserstein {
    pub distance: f64,
    /// Supports actually solved over (merged unless the cost was precomputed).
    pub from: DiscreteDistribution,
    pub to: DiscreteDistribution,
    pub coupling: Vec<Vec<f64>>,
}

/// Exact optimal transport cost between two discrete distributions.
pub fn wasserstein1(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    cost: &CostSpec,
) -> Result<Wasserstein, TransportError> {
    let (a, b) = match cost {
        CostSpec::L1 => (a.normalized(), b.normalized()),
        CostSpec::Precomputed { .. } => (a.clone(), b.clone()),
    };
    for d in [&a, &b] {
        if d.len() > MAX_SUPPORT {
            return Err(TransportError::TooLarge(d.len()));
        }
    }
    if matches!(cost, CostSpec::L1) && a.dim() != b.dim() {
        return Err(TransportError::Cost(
            "supports live in different dimensions".into(),
        ));
    }
    let c = cost.matrix(a.points(), b.points())?;
    let sol = solve_transportation(a.weights(), b.weights(), &c)?;
    Ok(Wasserstein {
        distance: sol.cost,
        from: a,
        to: b,
        coupling: sol.plan,
    })
}

/// `(1 − u)·a + u·b`, with duplicates merged.
pub fn mixture(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    u: f64,
) -> Result<DiscreteDistribution, TransportError> {
    if !(0.0..=1.0).contains(&u) {
        return Err(TransportError::MixtureWeight(u));
    }
    if a.dim() != b.dim() {
        return Err(TransportError::Distribution(
            "mixing supports of different dimension".into(),
        ));
    }
    let points = a.points.iter().chain(&b.points).cloned().collect();
    let weights = a
        .weights
        .iter()
        .map(|w| (1.0 - u) * w)
        .chain(b.weights.iter().map(|w| u * w))
        .collect();
    Ok(DiscreteDistribution { points, weights }.normalized())
}

/// The interpolating distribution that certifies
/// `inf_{W(D', D_A) ≤ ρ} W(D', D_O) ≤ max{W(D_A, D_O) − ρ, 0}`.
///
/// Returns `mixture(D_O, D_A, u)` with `u = 1 − ρ / W(D_A, D_O)` when the two
/// are farther apart than `ρ`, and `D_O` itself otherwise.
pub fn ball_interpolant(
    d_aux: &DiscreteDistribution,
    d_real: &DiscreteDistribution,
    radius: f64,
    cost: &CostSpec,
) -> Result<(DiscreteDistribution, f64), TransportError> {
    if radius < 0.0 {
        return Err(TransportError::Problem("negative radius".into()));
    }
    let w = wasserstein1(d_aux, d_real, cost)?.distance;
    if w <= radius {
        return Ok((d_real.normalized(), 0.0));
    }
    let u = 1.0 - radius / w;
    Ok((mixture(d_real, d_aux, u)?, u))
}
