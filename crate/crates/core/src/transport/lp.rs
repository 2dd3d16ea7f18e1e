//! Dense two-phase tableau simplex with Bland's anti-cycling rule.
//!
//! Sized for the desk-scale problems in this crate (a few thousand columns,
//! at most a couple of hundred rows).

const EPS: f64 = 1e-9;
const MAX_PIVOTS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

/// `maximize objective · x` subject to the constraints and `x ≥ 0`.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal {
        x: Vec<f64>,
        value: f64,
    },
    Infeasible,
    Unbounded,
    /// Pivot budget exhausted; should not happen with Bland's rule.
    IterationLimit,
}

impl LinearProgram {
    pub fn new(objective: Vec<f64>) -> Self {
        Self {
            objective,
            constraints: Vec::new(),
        }
    }

    pub fn push(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64) {
        debug_assert_eq!(coeffs.len(), self.objective.len());
        self.constraints.push(Constraint {
            coeffs,
            relation,
            rhs,
        });
    }

    pub fn solve(&self) -> LpOutcome {
        Tableau::build(self).solve(&self.objective)
    }
}

struct Tableau {
    rows: usize,
    /// Structural + slack + artificial columns, excluding the RHS.
    cols: usize,
    n_struct: usize,
    first_artificial: usize,
    /// `rows × (cols + 1)`, RHS in the last column.
    t: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.objective.len();
        let m = lp.constraints.len();
        // normalise to non-negative rhs
        let normalised: Vec<(Vec<f64>, Relation, f64)> = lp
            .constraints
            .iter()
            .map(|c| {
                if c.rhs < 0.0 {
                    let rel = match c.relation {
                        Relation::Le => Relation::Ge,
                        Relation::Ge => Relation::Le,
                        Relation::Eq => Relation::Eq,
                    };
                    (c.coeffs.iter().map(|v| -v).collect(), rel, -c.rhs)
                } else {
                    (c.coeffs.clone(), c.relation, c.rhs)
                }
            })
            .collect();
        let n_slack = normalised.iter().filter(|c| c.1 != Relation::Eq).count();
        let n_art = normalised.iter().filter(|c| c.1 != Relation::Le).count();
        let cols = n + n_slack + n_art;
        let width = cols + 1;
        let mut t = vec![0.0; m * width];
        let mut basis = vec![0; m];
        let (mut slack, mut art) = (n, n + n_slack);
        for (r, (coeffs, rel, rhs)) in normalised.iter().enumerate() {
            let row = &mut t[r * width..(r + 1) * width];
            row[..n].copy_from_slice(coeffs);
            row[cols] = *rhs;
            match rel {
                Relation::Le => {
                    row[slack] = 1.0;
                    basis[r] = slack;
                    slack += 1;
                }
                Relation::Ge => {
                    row[slack] = -1.0;
                    slack += 1;
                    row[art] = 1.0;
                    basis[r] = art;
                    art += 1;
                }
                Relation::Eq => {
                    row[art] = 1.0;
                    basis[r] = art;
                    art += 1;
                }
            }
        }
        Self {
            rows: m,
            cols,
            n_struct: n,
            first_artificial: n + n_slack,
            t,
            basis,
        }
    }

    fn width(&self) -> usize {
        self.cols + 1
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.t[r * self.width() + c]
    }

    fn rhs(&self, r: usize) -> f64 {
        self.at(r, self.cols)
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.width();
        let piv = self.t[pr * w + pc];
        for v in &mut self.t[pr * w..(pr + 1) * w] {
            *v /= piv;
        }
        let prow: Vec<f64> = self.t[pr * w..(pr + 1) * w].to_vec();
        for r in 0..self.rows {
            if r == pr {
                continue;
            }
            let f = self.t[r * w + pc];
            if f == 0.0 {
                continue;
            }
            for (v, p) in self.t[r * w..(r + 1) * w].iter_mut().zip(&prow) {
                *v -= f * p;
            }
            self.t[r * w + pc] = 0.0;
        }
        self.basis[pr] = pc;
    }

    /// Reduced costs `c_j - c_B B⁻¹ A_j` for a maximisation objective.
    fn reduced_costs(&self, cost: &[f64], allowed: usize) -> Vec<f64> {
        let mut d: Vec<f64> = cost[..allowed].to_vec();
        for r in 0..self.rows {
            let cb = cost[self.basis[r]];
            if cb == 0.0 {
                continue;
            }
            let row = &self.t[r * self.width()..r * self.width() + allowed];
            for (dj, a) in d.iter_mut().zip(row) {
                *dj -= cb * a;
            }
        }
        d
    }

    /// Runs primal simplex on `cost` (maximise) over columns `< allowed`.
    fn optimise(&mut self, cost: &[f64], allowed: usize) -> Result<(), LpOutcome> {
        for _ in 0..MAX_PIVOTS {
            let d = self.reduced_costs(cost, allowed);
            // Bland: lowest-index improving column
            let Some(pc) = (0..allowed).find(|&j| d[j] > EPS) else {
                return Ok(());
            };
            let mut best: Option<(f64, usize, usize)> = None;
            for r in 0..self.rows {
                let a = self.at(r, pc);
                if a > EPS {
                    let ratio = self.rhs(r) / a;
                    let better = match best {
                        None => true,
                        Some((br, _, bvar)) => {
                            ratio < br - EPS || (ratio <= br + EPS && self.basis[r] < bvar)
                        }
                    };
                    if better {
                        best = Some((ratio, r, self.basis[r]));
                    }
                }
            }
            let Some((_, pr, _)) = best else {
                return Err(LpOutcome::Unbounded);
            };
            self.pivot(pr, pc);
        }
        Err(LpOutcome::IterationLimit)
    }

    fn solve(mut self, objective: &[f64]) -> LpOutcome {
        // phase 1: maximise -Σ artificials
        if self.first_artificial < self.cols {
            let mut phase1 = vec![0.0; self.cols];
            for v in &mut phase1[self.first_artificial..] {
                *v = -1.0;
            }
            if let Err(out) = self.optimise(&phase1, self.cols) {
                return out;
            }
            let infeas: f64 = (0..self.rows)
                .filter(|&r| self.basis[r] >= self.first_artificial)
                .map(|r| self.rhs(r))
                .sum();
            if infeas > 1e-7 {
                return LpOutcome::Infeasible;
            }
            // drive remaining (zero-level) artificials out of the basis
            for r in 0..self.rows {
                if self.basis[r] >= self.first_artificial {
                    if let Some(pc) =
                        (0..self.first_artificial).find(|&c| self.at(r, c).abs() > EPS)
                    {
                        self.pivot(r, pc);
                    }
                    // otherwise the row is redundant; its artificial stays basic at zero
                }
            }
        }

        let mut cost = vec![0.0; self.cols];
        cost[..self.n_struct].copy_from_slice(objective);
        if let Err(out) = self.optimise(&cost, self.first_artificial) {
            return out;
        }
        let mut x = vec![0.0; self.n_struct];
        for r in 0..self.rows {
            if self.basis[r] < self.n_struct {
                x[self.basis[r]] = self.rhs(r).max(0.0);
            }
        }
        let value = x.iter().zip(objective).map(|(a, b)| a * b).sum();
        LpOutcome::Optimal { x, value }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn optimal(out: LpOutcome) -> (Vec<f64>, f64) {
        match out {
            LpOutcome::Optimal { x, value } => (x, value),
            other => panic!("expected optimum, got {other:?}"),
        }
    }

    #[test]
    fn textbook_max() {
        // max 3x + 5y, x ≤ 4, 2y ≤ 12, 3x + 2y ≤ 18 → (2, 6), 36
        let mut lp = LinearProgram::new(vec![3.0, 5.0]);
        lp.push(vec![1.0, 0.0], Relation::Le, 4.0);
        lp.push(vec![0.0, 2.0], Relation::Le, 12.0);
        lp.push(vec![3.0, 2.0], Relation::Le, 18.0);
        let (x, v) = optimal(lp.solve());
        assert!((v - 36.0).abs() < 1e-9);
        assert!((x[0] - 2.0).abs() < 1e-9 && (x[1] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn equality_and_ge_rows() {
        // min x + y (max -x - y), x + y = 2, x ≥ 0.5, y ≥ 1 → 2
        let mut lp = LinearProgram::new(vec![-1.0, -1.0]);
        lp.push(vec![1.0, 1.0], Relation::Eq, 2.0);
        lp.push(vec![1.0, 0.0], Relation::Ge, 0.5);
        lp.push(vec![0.0, 1.0], Relation::Ge, 1.0);
        let (_, v) = optimal(lp.solve());
        assert!((v + 2.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_and_unbounded() {
        let mut lp = LinearProgram::new(vec![1.0]);
        lp.push(vec![1.0], Relation::Le, 1.0);
        lp.push(vec![1.0], Relation::Ge, 2.0);
        assert_eq!(lp.solve(), LpOutcome::Infeasible);

        let mut lp = LinearProgram::new(vec![1.0, 0.0]);
        lp.push(vec![0.0, 1.0], Relation::Le, 1.0);
        assert_eq!(lp.solve(), LpOutcome::Unbounded);
    }

    #[test]
    fn degenerate_cycling_example() {
        // Beale's example cycles under the textbook largest-coefficient rule.
        let mut lp = LinearProgram::new(vec![0.75, -150.0, 0.02, -6.0]);
        lp.push(vec![0.25, -60.0, -0.04, 9.0], Relation::Le, 0.0);
        lp.push(vec![0.5, -90.0, -0.02, 3.0], Relation::Le, 0.0);
        lp.push(vec![0.0, 0.0, 1.0, 0.0], Relation::Le, 1.0);
        let (_, v) = optimal(lp.solve());
        assert!((v - 0.05).abs() < 1e-9);
    }

    #[test]
    fn redundant_equalities() {
        let mut lp = LinearProgram::new(vec![1.0, 2.0]);
        lp.push(vec![1.0, 1.0], Relation::Eq, 1.0);
        lp.push(vec![2.0, 2.0], Relation::Eq, 2.0);
        let (x, v) = optimal(lp.solve());
        assert!((v - 2.0).abs() < 1e-9);
        assert!((x[1] - 1.0).abs() < 1e-9);
    }
}
