//! Worst-case expected loss over a Wasserstein ball on a finite candidate
//! support, and its one-dimensional dual.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lp::{LinearProgram, LpOutcome, Relation};
use super::{CostSpec, DiscreteDistribution, TransportError};

/// Maximum `|center support| × |targets|` accepted by the primal LP.
pub const MAX_PLAN_ENTRIES: usize = 4096;

/// `sup { E_{Q} ℓ : W_c(Q, center) ≤ radius, supp Q ⊆ targets }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallProblem {
    pub center: DiscreteDistribution,
    pub radius: f64,
    pub targets: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    #[serde(default)]
    pub cost: CostSpec,
}

/// Prepared problem data: merged center, cost matrix `c[i][j]` from center
/// atom `i` to target `j`.
struct Prepared {
    weights: Vec<f64>,
    cost: Vec<Vec<f64>>,
    losses: Vec<f64>,
    radius: f64,
}

impl BallProblem {
    pub fn new(
        center: DiscreteDistribution,
        radius: f64,
        targets: Vec<Vec<f64>>,
        losses: Vec<f64>,
    ) -> Result<Self, TransportError> {
        let p = Self {
            center,
            radius,
            targets,
            losses,
            cost: CostSpec::L1,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_cost(mut self, cost: CostSpec) -> Result<Self, TransportError> {
        self.cost = cost;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(TransportError::Problem(format!(
                "radius must be finite and ≥ 0, got {}",
                self.radius
            )));
        }
        if self.targets.is_empty() {
            return Err(TransportError::Problem("empty candidate support".into()));
        }
        if self.targets.len() != self.losses.len() {
            return Err(TransportError::Problem(format!(
                "{} targets but {} loss values",
                self.targets.len(),
                self.losses.len()
            )));
        }
        if self.losses.iter().any(|l| !l.is_finite()) {
            return Err(TransportError::Problem("non-finite loss value".into()));
        }
        if self.targets.iter().flatten().any(|v| !v.is_finite()) {
            return Err(TransportError::Problem(
                "non-finite target coordinate".into(),
            ));
        }
        Ok(())
    }

    fn prepare(&self) -> Result<Prepared, TransportError> {
        self.validate()?;
        let center = match self.cost {
            CostSpec::L1 => self.center.normalized(),
            CostSpec::Precomputed { .. } => self.center.clone(),
        };
        if center.len() * self.targets.len() > MAX_PLAN_ENTRIES {
            return Err(TransportError::TooLarge(center.len() * self.targets.len()));
        }
        let cost = self.cost.matrix(center.points(), &self.targets)?;
        Ok(Prepared {
            weights: center.weights().to_vec(),
            cost,
            losses: self.losses.clone(),
            radius: self.radius,
        })
    }
}

impl Prepared {
    /// Cheapest possible transport cost into the candidate support.
    fn min_cost(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.cost)
            .map(|(w, row)| w * row.iter().copied().fold(f64::INFINITY, f64::min))
            .sum()
    }

    /// `Σ_i w_i max_j [ℓ_j − γ c_ij]` and the right-derivative slope of the
    /// full dual at `γ` (ties broken towards the cheaper target).
    fn phi(&self, gamma: f64) -> (f64, f64) {
        let mut value = 0.0;
        let mut used_cost = 0.0;
        for (w, row) in self.weights.iter().zip(&self.cost) {
            let mut best = f64::NEG_INFINITY;
            let mut best_c = f64::INFINITY;
            for (l, c) in self.losses.iter().zip(row) {
                let v = l - gamma * c;
                if v > best || (v == best && *c < best_c) {
                    best = v;
                    best_c = *c;
                }
            }
            value += w * best;
            used_cost += w * best_c;
        }
        (gamma * self.radius + value, self.radius - used_cost)
    }
}

/// Primal optimum and the optimal plan `plan[i][j]` (center atom `i` → target `j`).
#[derive(Debug, Clone, PartialEq)]
pub struct WorstCase {
    pub value: f64,
    pub plan: Vec<Vec<f64>>,
    /// Transport cost actually used by the plan.
    pub transport_cost: f64,
}

/// Exact worst-case expectation by linear programming:
/// maximise `Σ π_ij ℓ_j` s.t. `Σ_j π_ij = w_i`, `Σ π_ij c_ij ≤ ρ`, `π ≥ 0`.
pub fn primal_worst_case(p: &BallProblem) -> Result<WorstCase, TransportError> {
    let prep = p.prepare()?;
    let (m, t) = (prep.weights.len(), prep.losses.len());
    let min_cost = prep.min_cost();
    if min_cost > prep.radius + 1e-12 {
        return Err(TransportError::Infeasible {
            radius: prep.radius,
            min_cost,
        });
    }
    let objective: Vec<f64> = (0..m).flat_map(|_| prep.losses.iter().copied()).collect();
    let mut lp = LinearProgram::new(objective);
    for i in 0..m {
        let mut row = vec![0.0; m * t];
        row[i * t..(i + 1) * t].iter_mut().for_each(|v| *v = 1.0);
        lp.push(row, Relation::Eq, prep.weights[i]);
    }
    let budget: Vec<f64> = prep.cost.iter().flatten().copied().collect();
    lp.push(budget, Relation::Le, prep.radius.max(min_cost));
    match lp.solve() {
        LpOutcome::Optimal { x, value } => {
            let plan: Vec<Vec<f64>> = x.chunks(t).map(<[f64]>::to_vec).collect();
            let transport_cost = plan
                .iter()
                .zip(&prep.cost)
                .map(|(pr, cr)| pr.iter().zip(cr).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            Ok(WorstCase {
                value,
                plan,
                transport_cost,
            })
        }
        LpOutcome::Infeasible => Err(TransportError::Infeasible {
            radius: prep.radius,
            min_cost,
        }),
        other => Err(TransportError::Solver(format!("ball LP: {other:?}"))),
    }
}

/// The robust surrogate `γρ + Σ_i w_i max_j [ℓ(z_j) − γ c(x_i, z_j)]`.
pub fn dual_value(p: &BallProblem, gamma: f64) -> Result<f64, TransportError> {
    if gamma.is_nan() || gamma < 0.0 {
        return Err(TransportError::NegativeMultiplier(gamma));
    }
    Ok(p.prepare()?.phi(gamma).0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualOptimum {
    pub gamma: f64,
    pub value: f64,
}

/// Exact minimiser of [`dual_value`] over `γ ≥ 0`.
///
/// The dual is convex and piecewise linear in `γ`, with kinks where two
/// targets tie for some center atom, i.e. at `(ℓ_j − ℓ_k) / (c_ij − c_ik)`.
/// The minimum sits at `0` or at a kink; a binary search on the slope over the
/// sorted kinks finds it.
pub fn dual_infimum(p: &BallProblem) -> Result<DualOptimum, TransportError> {
    let prep = p.prepare()?;
    let mut kinks = vec![0.0];
    for row in &prep.cost {
        for j in 0..row.len() {
            for k in j + 1..row.len() {
                let dc = row[j] - row[k];
                if dc != 0.0 {
                    let g = (prep.losses[j] - prep.losses[k]) / dc;
                    if g > 0.0 && g.is_finite() {
                        kinks.push(g);
                    }
                }
            }
        }
    }
    kinks.sort_by(f64::total_cmp);
    kinks.dedup();

    // slope of the dual on the open interval right of kinks[k]
    let slope_after = |k: usize| -> f64 {
        let probe = match kinks.get(k + 1) {
            Some(next) => 0.5 * (kinks[k] + next),
            None => kinks[k] + 1.0,
        };
        prep.phi(probe).1
    };
    let last = kinks.len() - 1;
    if slope_after(last) < -1e-12 {
        return Err(TransportError::Infeasible {
            radius: prep.radius,
            min_cost: prep.min_cost(),
        });
    }
    // first k whose right slope is non-negative
    let (mut lo, mut hi) = (0usize, last);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if slope_after(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    // guard against slope round-off by checking the neighbours too
    let best = [lo.saturating_sub(1), lo, (lo + 1).min(last)]
        .into_iter()
        .map(|k| (kinks[k], prep.phi(kinks[k]).0))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .expect("non-empty");
    Ok(DualOptimum {
        gamma: best.0,
        value: best.1,
    })
}

/// Draws a feasible random instance: 1–`max_atoms` center atoms in `[-2, 2]^d`
/// (d ∈ {1, 2}), 1–`max_targets` candidate targets, losses in `[0, 5]`,
/// radius in `[0, 3]`, l1 cost. Half the instances include the center atoms
/// among the targets; the rest are redrawn until feasible.
pub fn random_instance<R: Rng>(rng: &mut R, max_atoms: usize, max_targets: usize) -> BallProblem {
    loop {
        let dim = rng.gen_range(1..=2);
        let n = rng.gen_range(1..=max_atoms.max(1));
        let point = |rng: &mut R| {
            (0..dim)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect::<Vec<f64>>()
        };
        let centers: Vec<Vec<f64>> = (0..n).map(|_| point(rng)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let head: f64 = weights[1..].iter().sum();
        weights[0] = 1.0 - head;
        let center = DiscreteDistribution::new(centers.clone(), weights).expect("valid weights");

        let t = rng.gen_range(1..=max_targets.max(1));
        let targets: Vec<Vec<f64>> = if rng.gen_bool(0.5) && n <= max_targets {
            let extra = t.saturating_sub(n);
            centers
                .iter()
                .cloned()
                .chain((0..extra).map(|_| point(rng)))
                .collect()
        } else {
            (0..t).map(|_| point(rng)).collect()
        };
        let losses = (0..targets.len())
            .map(|_| rng.gen_range(0.0..5.0))
            .collect();
        let radius = rng.gen_range(0.0..3.0);
        let p = BallProblem {
            center,
            radius,
            targets,
            losses,
            cost: CostSpec::L1,
        };
        if p.prepare()
            .map(|pp| pp.min_cost() <= radius)
            .unwrap_or(false)
        {
            return p;
        }
    }
}
