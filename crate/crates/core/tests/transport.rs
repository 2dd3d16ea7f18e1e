//! Transport solvers checked against independent oracles: a dense simplex
//! formulation of the transportation LP, the 1-D CDF-area formula, and a
//! brute-force vertex enumeration of the ball LP.

use dal_core::transport::lp::{LinearProgram, LpOutcome, Relation};
use dal_core::transport::{
    ball_interpolant, dual_infimum, dual_value, mixture, primal_worst_case, random_instance,
    wasserstein1, BallProblem, CostSpec, DiscreteDistribution,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dist(rng: &mut ChaCha8Rng, n: usize, dim: usize, spread: f64) -> DiscreteDistribution {
    let points = (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-spread..spread)).collect())
        .collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let rest: f64 = w[1..].iter().sum();
    w[0] = 1.0 - rest;
    DiscreteDistribution::new(points, w).unwrap()
}

/// Transportation LP solved by the generic simplex.
fn lp_oracle(a: &DiscreteDistribution, b: &DiscreteDistribution) -> f64 {
    let (m, n) = (a.len(), b.len());
    let mut objective = Vec::with_capacity(m * n);
    for x in a.points() {
        for y in b.points() {
            let c: f64 = x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum();
            objective.push(-c);
        }
    }
    let mut lp = LinearProgram::new(objective);
    for i in 0..m {
        let mut row = vec![0.0; m * n];
        row[i * n..(i + 1) * n].iter_mut().for_each(|v| *v = 1.0);
        lp.push(row, Relation::Eq, a.weights()[i]);
    }
    for j in 0..n {
        let mut row = vec![0.0; m * n];
        (0..m).for_each(|i| row[i * n + j] = 1.0);
        lp.push(row, Relation::Eq, b.weights()[j]);
    }
    match lp.solve() {
        LpOutcome::Optimal { value, .. } => -value,
        other => panic!("oracle LP failed: {other:?}"),
    }
}

/// `∫ |F_a − F_b|` on the real line.
fn cdf_oracle(a: &DiscreteDistribution, b: &DiscreteDistribution) -> f64 {
    let mut events: Vec<(f64, f64)> = a
        .points()
        .iter()
        .zip(a.weights())
        .map(|(p, w)| (p[0], *w))
        .chain(b.points().iter().zip(b.weights()).map(|(p, w)| (p[0], -w)))
        .collect();
    events.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut diff = 0.0;
    let mut area = 0.0;
    for win in events.windows(2) {
        diff += win[0].1;
        area += diff.abs() * (win[1].0 - win[0].0);
    }
    area
}

#[test]
fn equal_mass_pairs_on_the_line() {
    let a = DiscreteDistribution::on_line(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
    let b = DiscreteDistribution::on_line(&[1.0, 2.0], &[0.5, 0.5]).unwrap();
    assert!((lp_oracle(&a, &b) - 1.0).abs() < 1e-12);
    assert!((cdf_oracle(&a, &b) - 1.0).abs() < 1e-12);
    assert!((wasserstein1(&a, &b, &CostSpec::L1).unwrap().distance - 1.0).abs() < 1e-12);
}

#[test]
fn flow_solver_matches_simplex_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..40 {
        let (m, n) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let dim = rng.gen_range(1..=3);
        let a = random_dist(&mut rng, m, dim, 3.0);
        let b = random_dist(&mut rng, n, dim, 3.0);
        let w = wasserstein1(&a, &b, &CostSpec::L1).unwrap();
        assert!(
            (w.distance - lp_oracle(&a, &b)).abs() < 1e-9,
            "{} vs {}",
            w.distance,
            lp_oracle(&a, &b)
        );
        // coupling marginals
        for (i, row) in w.coupling.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - w.from.weights()[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn flow_solver_matches_cdf_oracle_on_the_line() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..40 {
        let n_a = rng.gen_range(1..=30);
        let a = random_dist(&mut rng, n_a, 1, 5.0);
        let n_b = rng.gen_range(1..=30);
        let b = random_dist(&mut rng, n_b, 1, 5.0);
        let w = wasserstein1(&a, &b, &CostSpec::L1).unwrap().distance;
        assert!((w - cdf_oracle(&a, &b)).abs() < 1e-9);
    }
}

#[test]
fn full_size_supports() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_dist(&mut rng, 64, 1, 4.0);
    let b = random_dist(&mut rng, 64, 1, 4.0);
    let w = wasserstein1(&a, &b, &CostSpec::L1).unwrap().distance;
    assert!((w - cdf_oracle(&a, &b)).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_axioms(seed in any::<u64>(), n1 in 1usize..6, n2 in 1usize..6, n3 in 1usize..6, dim in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_dist(&mut rng, n1, dim, 3.0);
        let b = random_dist(&mut rng, n2, dim, 3.0);
        let c = random_dist(&mut rng, n3, dim, 3.0);
        let w = |x: &DiscreteDistribution, y: &DiscreteDistribution| wasserstein1(x, y, &CostSpec::L1).unwrap().distance;
        prop_assert!((w(&a, &b) - w(&b, &a)).abs() <= 1e-9);
        prop_assert!(w(&a, &a).abs() <= 1e-12);
        prop_assert!(w(&a, &c) <= w(&a, &b) + w(&b, &c) + 1e-9);
    }

    #[test]
    fn mixture_identity_on_the_line(seed in any::<u64>(), u in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_d_o = rng.gen_range(1..=6);
        let d_o = random_dist(&mut rng, n_d_o, 1, 3.0);
        let n_d_a = rng.gen_range(1..=6);
        let d_a = random_dist(&mut rng, n_d_a, 1, 3.0);
        let mix = mixture(&d_o, &d_a, u).unwrap();
        let lhs = wasserstein1(&mix, &d_a, &CostSpec::L1).unwrap().distance;
        let rhs = (1.0 - u) * wasserstein1(&d_o, &d_a, &CostSpec::L1).unwrap().distance;
        prop_assert!((lhs - rhs).abs() <= 1e-7);
    }

    #[test]
    fn ball_interpolant_bounds(seed in any::<u64>(), radius in 0.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_d_a = rng.gen_range(1..=6);
        let d_a = random_dist(&mut rng, n_d_a, 2, 3.0);
        let n_d_o = rng.gen_range(1..=6);
        let d_o = random_dist(&mut rng, n_d_o, 2, 3.0);
        let (dp, _) = ball_interpolant(&d_a, &d_o, radius, &CostSpec::L1).unwrap();
        let w = |x: &DiscreteDistribution, y: &DiscreteDistribution| wasserstein1(x, y, &CostSpec::L1).unwrap().distance;
        let gap = w(&d_a, &d_o);
        prop_assert!(w(&dp, &d_a) <= radius + 1e-9);
        prop_assert!(w(&dp, &d_o) <= (gap - radius).max(0.0) + 1e-9);
    }
}

#[test]
fn mixture_identity_single_atom_center() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..30 {
        let d_o = random_dist(&mut rng, 1, 2, 3.0);
        let n_d_a = rng.gen_range(1..=6);
        let d_a = random_dist(&mut rng, n_d_a, 2, 3.0);
        let u = rng.gen_range(0.0..=1.0);
        let mix = mixture(&d_o, &d_a, u).unwrap();
        let lhs = wasserstein1(&mix, &d_a, &CostSpec::L1).unwrap().distance;
        let rhs = (1.0 - u) * wasserstein1(&d_o, &d_a, &CostSpec::L1).unwrap().distance;
        assert!((lhs - rhs).abs() <= 1e-9);
    }
}

/// Enumerates candidate vertices of the ball LP. Each basic solution has at
/// most one center atom split across two targets; every other atom goes to a
/// single target.
fn brute_force_ball(p: &BallProblem) -> f64 {
    let c = p.center.normalized();
    let w = c.weights();
    let cost = CostSpec::L1.matrix(c.points(), &p.targets).unwrap();
    let (m, t) = (w.len(), p.targets.len());
    let mut best = f64::NEG_INFINITY;
    let mut assign = vec![0usize; m];
    loop {
        let base_cost: f64 = (0..m).map(|i| w[i] * cost[i][assign[i]]).sum();
        let base_val: f64 = (0..m).map(|i| w[i] * p.losses[assign[i]]).sum();
        if base_cost <= p.radius + 1e-12 {
            best = best.max(base_val);
        }
        for s in 0..m {
            for k in 0..t {
                let dc = w[s] * (cost[s][k] - cost[s][assign[s]]);
                if dc == 0.0 {
                    continue;
                }
                let frac = (p.radius - base_cost) / dc;
                if (0.0..=1.0).contains(&frac) {
                    let val = base_val + frac * w[s] * (p.losses[k] - p.losses[assign[s]]);
                    best = best.max(val);
                }
            }
        }
        // next assignment
        let mut i = 0;
        loop {
            if i == m {
                return best;
            }
            assign[i] += 1;
            if assign[i] < t {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
    }
}

#[test]
fn primal_matches_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..60 {
        let p = random_instance(&mut rng, 4, 4);
        let primal = primal_worst_case(&p).unwrap().value;
        let brute = brute_force_ball(&p);
        assert!((primal - brute).abs() < 1e-7, "{primal} vs {brute}");
    }
}

#[test]
fn worked_instance_matches_vertex_enumeration() {
    let p = BallProblem::new(
        DiscreteDistribution::on_line(&[0.0], &[1.0]).unwrap(),
        1.0,
        vec![vec![0.0], vec![1.0], vec![2.0]],
        vec![0.0, 1.0, 4.0],
    )
    .unwrap();
    assert!((brute_force_ball(&p) - 2.0).abs() < 1e-12);
}

#[test]
fn strong_and_weak_duality_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let p = random_instance(&mut rng, 6, 6);
        let primal = primal_worst_case(&p).unwrap().value;
        let dual = dual_infimum(&p).unwrap();
        assert!(
            (primal - dual.value).abs() <= 1e-7,
            "{primal} vs {}",
            dual.value
        );
        for _ in 0..10 {
            let g = rng.gen_range(0.0..20.0);
            assert!(dual_value(&p, g).unwrap() >= primal - 1e-9);
        }
    }
}

#[test]
fn primal_nondecreasing_in_radius() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let mut p = random_instance(&mut rng, 5, 5);
        let mut prev = primal_worst_case(&p).unwrap().value;
        for step in 1..6 {
            p.radius += 0.3 * step as f64;
            let v = primal_worst_case(&p).unwrap().value;
            assert!(v >= prev - 1e-9);
            prev = v;
        }
    }
}

#[test]
fn unconstrained_radius_reaches_max_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let mut p = random_instance(&mut rng, 5, 5);
        p.radius = 100.0;
        let max = p.losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((primal_worst_case(&p).unwrap().value - max).abs() < 1e-9);
        assert!((dual_infimum(&p).unwrap().value - max).abs() < 1e-9);
    }
}
