use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fresh_run_dir, read_file, write_file, ExperimentSpec, RunnerError};
use crate::dal::{check_perturbation_gradient, check_training_gradient, init_perturbations, Batch};
use crate::model::{Architecture, ModelParams};
use crate::numerics::{gaussian_vec, op_suite, run_case, DenseTensor, GradCheckReport};
use crate::transport::{dual_infimum, primal_worst_case, random_instance, BallProblem};

/// Largest accepted `|primal − dual|`.
pub const DUALITY_TOL: f64 = 1e-7;
/// Largest accepted relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityInstanceReport {
    pub primal: f64,
    pub dual: f64,
    pub gamma: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub instances: Vec<DualityInstanceReport>,
    pub max_gap: f64,
    pub passed: bool,
    #[serde(skip)]
    pub run_dir: Option<PathBuf>,
}

/// Compares the worst-case primal LP with the one-dimensional dual on every
/// instance of `problems`.
pub fn duality_report(problems: &[BallProblem]) -> Result<DualityReport, RunnerError> {
    let instances = problems
        .iter()
        .map(|p| {
            let primal = primal_worst_case(p)?.value;
            let dual = dual_infimum(p)?;
            Ok(DualityInstanceReport {
                primal,
                dual: dual.value,
                gamma: dual.gamma,
                gap: (primal - dual.value).abs(),
            })
        })
        .collect::<Result<Vec<_>, RunnerError>>()?;
    let max_gap = instances.iter().map(|r| r.gap).fold(0.0, f64::max);
    Ok(DualityReport {
        instances,
        max_gap,
        passed: max_gap <= DUALITY_TOL,
        run_dir: None,
    })
}

/// Loads instances from `spec.instances` (a JSON array of ball problems) or
/// draws `spec.random_instances` random ones with at most six atoms and six
/// targets from the first seed, then writes `duality.json`.
pub fn duality_check(spec: &ExperimentSpec) -> Result<DualityReport, RunnerError> {
    let problems: Vec<BallProblem> = match &spec.instances {
        Some(path) => serde_json::from_str(&read_file(path)?).map_err(|e| RunnerError::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?,
        None => {
            let seed = spec.seeds.first().copied().unwrap_or(0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..spec.random_instances)
                .map(|_| random_instance(&mut rng, 6, 6))
                .collect()
        }
    };
    if problems.is_empty() {
        return Err(RunnerError::Config {
            key: "instances".into(),
            msg: "no instances to check".into(),
        });
    }
    for p in &problems {
        p.validate()?;
    }
    let mut report = duality_report(&problems)?;
    let dir = fresh_run_dir(spec)?;
    write_file(
        &dir.join("duality.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    report.run_dir = Some(dir);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSummary {
    pub reports: Vec<GradCheckReport>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckSummary {
    pub fn render(&self) -> String {
        let mut out = String::from("check,coords,max_rel_err\n");
        for r in &self.reports {
            out.push_str(&format!("{},{},{:e}\n", r.name, r.coords, r.max_rel_err));
        }
        out
    }
}

/// Every tape op, then the composed DAL gradients (model parameters through
/// the full training loss, and the perturbation through the inner objective)
/// on a random tiny network.
pub fn grad_check(seed: u64) -> Result<GradCheckSummary, RunnerError> {
    let mut reports = Vec::new();
    for case in op_suite(seed) {
        reports.push(run_case(&case, FD_STEP, None)?);
    }
    let arch = Architecture::new(2, &[6, 5], 4, 3);
    let params = ModelParams::init(&arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x_id = DenseTensor::matrix(5, 2, gaussian_vec(&mut rng, 10, 1.5))?;
    let y_id = [0, 1, 2, 1, 0];
    let x_ood = DenseTensor::matrix(4, 2, gaussian_vec(&mut rng, 8, 3.0))?;
    let p = init_perturbations(4, 4, 0.3, &mut rng).p;
    let batch = Batch {
        x_id: &x_id,
        y_id: &y_id,
        x_ood: &x_ood,
    };

    let mut oe = check_training_gradient(&params, batch, None, (1.0, 0.7), FD_STEP)?;
    oe.name = "oe_loss_wrt_params".into();
    reports.push(oe);
    let mut dal = check_training_gradient(&params, batch, Some(&p), (1.0, 0.7), FD_STEP)?;
    dal.name = "dal_loss_wrt_params".into();
    reports.push(dal);
    let emb = params.extract(&x_ood)?;
    let mut pert = check_perturbation_gradient(&params, emb.tensor(), &p, 0.4, FD_STEP)?;
    pert.name = "dal_inner_objective_wrt_p".into();
    reports.push(pert);

    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckSummary {
        reports,
        max_rel_err,
        passed: max_rel_err <= GRAD_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_duality_instance() {
        let p = BallProblem::new(
            crate::transport::DiscreteDistribution::dirac(vec![0.0]).unwrap(),
            1.0,
            vec![vec![0.0], vec![1.0], vec![2.0]],
            vec![0.0, 1.0, 4.0],
        )
        .unwrap();
        let r = duality_report(&[p]).unwrap();
        assert!((r.instances[0].primal - 2.0).abs() < 1e-9);
        assert!(r.max_gap < 1e-9);
        assert!(r.passed);
    }

    #[test]
    fn gradient_suite_passes() {
        let s = grad_check(3).unwrap();
        assert!(s.passed, "{}", s.render());
        assert!(s.reports.iter().any(|r| r.name == "dal_loss_wrt_params"));
        assert_eq!(s.render().lines().count(), s.reports.len() + 1);
    }
}
