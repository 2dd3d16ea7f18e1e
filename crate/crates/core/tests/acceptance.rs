//! End-to-end acceptance checks, one test per criterion. Each test prints a
//! single `criterion N: PASS|FAIL ...` line and then asserts the verdict.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use dal_core::dal::DIAGNOSTICS_HEADER;
use dal_core::eval::{auroc, fnr_at_tpr, fpr_at_tpr, ScoreKind, ScoreSet};
use dal_core::numerics::op_suite;
use dal_core::runner::{
    grad_check, run_experiment, sweep_rho, ExperimentSpec, Mode, RunRecord, SweepReport,
};
use dal_core::transport::{
    ball_interpolant, dual_infimum, mixture, primal_worst_case, random_instance, wasserstein1,
    CostSpec, DiscreteDistribution,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Serializes the criteria so every runtime is measured on an idle machine.
static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, pass: bool, detail: &str) {
    println!(
        "criterion {n}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Radius and search step of the DAL-vs-OE battery.
const BATTERY_RHO: f64 = 0.3;
const BATTERY_PS: f64 = 0.3;
/// Search step of the radius sweep.
const SWEEP_PS: f64 = 3.0;

fn random_dist(rng: &mut ChaCha8Rng, max_atoms: usize, dim: usize) -> DiscreteDistribution {
    let n = rng.gen_range(1..=max_atoms);
    let points = (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let rest: f64 = w[1..].iter().sum();
    w[0] = 1.0 - rest;
    DiscreteDistribution::new(points, w).unwrap()
}

fn w1(a: &DiscreteDistribution, b: &DiscreteDistribution) -> f64 {
    wasserstein1(a, b, &CostSpec::L1).unwrap().distance
}

#[test]
fn criterion_1_strong_duality() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let n = 150;
    for _ in 0..n {
        let p = random_instance(&mut rng, 6, 6);
        let primal = primal_worst_case(&p).unwrap().value;
        let dual = dual_infimum(&p).unwrap().value;
        worst = worst.max((primal - dual).abs());
    }
    let t = start.elapsed();
    let pass = worst <= 1e-7 && t < Duration::from_secs(5);
    verdict(
        1,
        pass,
        &format!(
            "{n} instances, max |primal - dual| = {worst:.2e}, {:.2} s",
            t.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_ball_interpolation_bound() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut pairs, mut checks, mut worst_excess, mut worst_identity) =
        (0, 0, f64::NEG_INFINITY, 0.0f64);
    for _ in 0..60 {
        let dim = rng.gen_range(1..=2);
        let d_a = random_dist(&mut rng, 6, dim);
        let d_o = random_dist(&mut rng, 6, dim);
        let w = w1(&d_a, &d_o);
        pairs += 1;
        for rho in [0.0, 0.25 * w, 0.5 * w, w, 2.0 * w, rng.gen_range(0.0..3.0)] {
            let (d_prime, _) = ball_interpolant(&d_a, &d_o, rho, &CostSpec::L1).unwrap();
            let to_center = w1(&d_prime, &d_a) - rho;
            let to_real = w1(&d_prime, &d_o) - (w - rho).max(0.0);
            worst_excess = worst_excess.max(to_center).max(to_real);
            checks += 1;
        }
    }
    // single-atom cases: the center D_A or the target D_O is a Dirac
    for _ in 0..60 {
        let dim = rng.gen_range(1..=2);
        let (d_a, d_o) = if rng.gen_bool(0.5) {
            (random_dist(&mut rng, 1, dim), random_dist(&mut rng, 6, dim))
        } else {
            (random_dist(&mut rng, 6, dim), random_dist(&mut rng, 1, dim))
        };
        let u = rng.gen_range(0.0..=1.0);
        let lhs = w1(&mixture(&d_o, &d_a, u).unwrap(), &d_a);
        worst_identity = worst_identity.max((lhs - (1.0 - u) * w1(&d_o, &d_a)).abs());
    }
    let t = start.elapsed();
    let pass = worst_excess <= 1e-9 && worst_identity <= 1e-7 && t < Duration::from_secs(10);
    verdict(
        2,
        pass,
        &format!(
            "{pairs} pairs, {checks} radii, worst bound excess {worst_excess:.2e}, mixture identity error {worst_identity:.2e}, {:.2} s",
            t.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for seed in 0..5 {
        let s = grad_check(seed).unwrap();
        worst = worst.max(s.max_rel_err);
        checks += s.reports.len();
    }
    let ops = op_suite(0).len();
    let t = start.elapsed();
    let pass = worst <= 1e-4 && t < Duration::from_secs(30);
    verdict(
        3,
        pass,
        &format!(
            "{checks} checks ({ops} ops + 3 composed per seed), max rel err {worst:.2e}, {:.2} s",
            t.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn pairwise_auroc(s: &ScoreSet) -> f64 {
    let mut credit = 0.0;
    for a in &s.id_scores {
        for b in &s.ood_scores {
            credit += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    credit / (s.id_scores.len() * s.ood_scores.len()) as f64
}

fn exhaustive_rates(s: &ScoreSet, tpr: f64) -> (f64, f64) {
    let n = s.id_scores.len() as f64;
    let lambda = s
        .id_scores
        .iter()
        .copied()
        .filter(|&l| s.id_scores.iter().filter(|&&v| v >= l).count() as f64 >= tpr * n - 1e-9)
        .fold(f64::NEG_INFINITY, f64::max);
    let fpr =
        s.ood_scores.iter().filter(|&&v| v >= lambda).count() as f64 / s.ood_scores.len() as f64;
    let fnr = s.id_scores.iter().filter(|&&v| v < lambda).count() as f64 / n;
    (fpr, fnr)
}

#[test]
fn criterion_4_metric_oracles() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut auroc_err, mut rate_mismatch) = (0.0f64, 0);
    for _ in 0..20 {
        let levels = rng.gen_range(5..200) as f64;
        let n_id = rng.gen_range(1..=1000);
        let n_ood = rng.gen_range(1..=1000);
        let mut draw = |shift: f64| (rng.gen::<f64>() * levels).floor() / levels + shift;
        let id: Vec<f64> = (0..n_id).map(|_| draw(0.2)).collect();
        let ood: Vec<f64> = (0..n_ood).map(|_| draw(0.0)).collect();
        let s = ScoreSet::new(id, ood, ScoreKind::Msp).unwrap();
        auroc_err = auroc_err.max((auroc(&s).unwrap() - pairwise_auroc(&s)).abs());
        let (fpr, fnr) = exhaustive_rates(&s, 0.95);
        if fpr_at_tpr(&s, 0.95).unwrap() != fpr || fnr_at_tpr(&s, 0.95).unwrap() != fnr {
            rate_mismatch += 1;
        }
    }
    let worked = ScoreSet::new(
        (1..=20).map(f64::from).collect(),
        vec![0.5, 5.5, 10.5, 19.5],
        ScoreKind::Msp,
    )
    .unwrap();
    let (wf, wn) = (
        fpr_at_tpr(&worked, 0.95).unwrap(),
        fnr_at_tpr(&worked, 0.95).unwrap(),
    );
    let worked_ok = wf == 0.75 && wn == 0.05 && exhaustive_rates(&worked, 0.95) == (wf, wn);
    let t = start.elapsed();
    let pass = auroc_err <= 1e-12 && rate_mismatch == 0 && worked_ok && t < Duration::from_secs(10);
    verdict(
        4,
        pass,
        &format!(
            "20 sets, AUROC max err {auroc_err:.1e}, FPR/FNR mismatches {rate_mismatch}, worked example FPR95 {wf} FNR95 {wn}, {:.2} s",
            t.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn battery_spec(mode: Mode, out: &Path) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(mode);
    spec.seeds = SEEDS.to_vec();
    spec.workers = 1;
    spec.out_dir = out.to_path_buf();
    spec.dal.rho = BATTERY_RHO;
    spec.dal.ps = BATTERY_PS;
    spec
}

struct Battery {
    dal: Vec<RunRecord>,
    oe: Vec<RunRecord>,
    erm: Vec<RunRecord>,
    dal_repeat: Vec<RunRecord>,
    /// Diagnostics CSV of every DAL and OE seed, then of the repeated DAL run.
    traces: Vec<(String, String)>,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

fn battery() -> &'static Battery {
    static CELL: OnceLock<Battery> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let dal = run_experiment(&battery_spec(Mode::TrainDal, dir.path())).unwrap();
        let oe = run_experiment(&battery_spec(Mode::TrainOe, dir.path())).unwrap();
        let mut erm_spec = battery_spec(Mode::TrainOe, dir.path());
        erm_spec.dal.alpha = 0.0;
        let erm = run_experiment(&erm_spec).unwrap();
        let elapsed = start.elapsed();
        let dal_repeat = run_experiment(&battery_spec(Mode::TrainDal, dir.path())).unwrap();
        let mut traces = Vec::new();
        for report in [&dal, &oe, &dal_repeat] {
            for r in &report.records {
                let path = report.run_dir.join(r.diagnostics_path.as_ref().unwrap());
                traces.push((
                    format!("{} seed {}", r.method, r.seed),
                    std::fs::read_to_string(path).unwrap(),
                ));
            }
        }
        Battery {
            dal: dal.records,
            oe: oe.records,
            erm: erm.records,
            dal_repeat: dal_repeat.records,
            traces,
            elapsed,
            _dir: dir,
        }
    })
}

fn real_msp(r: &RunRecord) -> (f64, f64) {
    let m = r.metrics_for(ScoreKind::Msp).expect("msp metrics");
    (m.real.fpr95, m.real.auroc)
}

#[test]
fn criterion_5_dal_beats_oe_on_real_outliers() {
    let _g = serial();
    let b = battery();
    let mut wins = 0;
    let (mut auroc_dal, mut auroc_oe) = (0.0, 0.0);
    let mut rows = Vec::new();
    for (d, o) in b.dal.iter().zip(&b.oe) {
        assert!(d.failure.is_none() && o.failure.is_none());
        let (fd, ad) = real_msp(d);
        let (fo, ao) = real_msp(o);
        if fd < fo {
            wins += 1;
        }
        auroc_dal += ad / SEEDS.len() as f64;
        auroc_oe += ao / SEEDS.len() as f64;
        rows.push(format!("seed {}: FPR95 {fd:.3} vs {fo:.3}", d.seed));
    }
    let pass = wins >= 4 && auroc_dal >= auroc_oe && b.elapsed < Duration::from_secs(240);
    verdict(
        5,
        pass,
        &format!(
            "DAL lower real FPR95 in {wins}/5 seeds [{}]; mean AUROC DAL {auroc_dal:.4} vs OE {auroc_oe:.4}; battery {:.1} s",
            rows.join(", "),
            b.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn sweep() -> SweepReport {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::new(Mode::SweepRho);
    spec.seeds = SEEDS.to_vec();
    spec.workers = 1;
    spec.out_dir = dir.path().to_path_buf();
    spec.rho_grid = vec![0.01, 0.1, 1.0, 10.0, 100.0];
    spec.dal.ps = SWEEP_PS;
    sweep_rho(&spec).unwrap()
}

#[test]
fn criterion_6_radius_trade_off() {
    let _g = serial();
    let start = Instant::now();
    let report = sweep();
    let t = start.elapsed();
    let grid = [0.01, 0.1, 1.0, 10.0, 100.0];
    let mut holds = 0;
    let mut rows = Vec::new();
    for &seed in &SEEDS {
        let curve: Vec<f64> = grid
            .iter()
            .map(|&rho| {
                report
                    .rows
                    .iter()
                    .find(|r| r.seed == seed && r.rho == rho)
                    .unwrap()
                    .fpr95_real
            })
            .collect();
        let interior = curve[1..4].iter().copied().fold(f64::INFINITY, f64::min);
        if interior <= curve[0] && interior <= curve[4] {
            holds += 1;
        }
        rows.push(format!(
            "seed {seed}: {}",
            curve
                .iter()
                .map(|v| format!("{v:.3}"))
                .collect::<Vec<_>>()
                .join("/")
        ));
    }
    let pass = holds >= 4 && t < Duration::from_secs(600);
    verdict(
        6,
        pass,
        &format!(
            "best interior radius no worse than both extremes in {holds}/5 seeds [{}]; {:.1} s",
            rows.join("; "),
            t.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_id_accuracy_preserved() {
    let _g = serial();
    let b = battery();
    let mut worst_gap = f64::NEG_INFINITY;
    let mut rows = Vec::new();
    for (d, e) in b.dal.iter().zip(&b.erm) {
        let (ad, ae) = (d.id_accuracy.unwrap(), e.id_accuracy.unwrap());
        worst_gap = worst_gap.max(ae - ad);
        rows.push(format!("seed {}: {ad:.3} vs {ae:.3}", d.seed));
    }
    let pass = worst_gap <= 0.03;
    verdict(
        7,
        pass,
        &format!(
            "DAL vs ERM ID accuracy [{}]; largest shortfall {:.1} points",
            rows.join(", "),
            100.0 * worst_gap
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_training_invariants() {
    let _g = serial();
    let b = battery();
    let gamma_max = battery_spec(Mode::TrainDal, Path::new(".")).dal.gamma_max;
    let (mut steps, mut violations) = (0, Vec::new());
    for (name, csv) in &b.traces {
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(DIAGNOSTICS_HEADER));
        for line in lines {
            let v: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
            let (gamma, pre, post) = (v[1], v[3], v[4]);
            if !(0.0..=gamma_max).contains(&gamma) {
                violations.push(format!("{name} step {}: gamma {gamma}", v[0]));
            }
            if post < pre - 1e-12 {
                violations.push(format!(
                    "{name} step {}: inner objective {post} < {pre}",
                    v[0]
                ));
            }
            steps += 1;
        }
    }
    let n = SEEDS.len();
    let same_traces = b.traces[..n] == b.traces[2 * n..];
    let same_records = b
        .dal
        .iter()
        .zip(&b.dal_repeat)
        .all(|(a, r)| a.same_results(r));
    let deterministic = same_traces && same_records && b.dal_repeat.len() == n;
    let pass = violations.is_empty() && deterministic;
    verdict(
        8,
        pass,
        &format!(
            "{} traces, {steps} steps, {} violations{}; DAL rerun of {n} seeds bit-identical: {deterministic}",
            b.traces.len(),
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default(),
        ),
    );
    assert!(pass);
}
