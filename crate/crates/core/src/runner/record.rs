use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentSpec, RunnerError};
use crate::dal::Method;
use crate::eval::{detection_metrics, DetectionMetrics, ScoreKind, ScoreSet};
use crate::model::ModelParams;
use crate::synthdata::{points_of, points_of_labeled, DiscrepancyEstimate, SceneData};

pub const RECORD_FILE: &str = "record.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SWEEP_HEADER: &str = "rho,seed,fpr95_aux,fpr95_real,auroc_real";

/// Detection quality of one scoring function against both OOD test splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreMetrics {
    pub score: ScoreKind,
    pub aux: DetectionMetrics,
    pub real: DetectionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub id_accuracy: f64,
    pub metrics: Vec<ScoreMetrics>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// ID test accuracy plus FPR95/AUROC/FNR95 on the auxiliary and real OOD test
/// splits for every requested scoring function.
pub fn evaluate_model(
    params: &ModelParams,
    data: &SceneData,
    scores: &[ScoreKind],
) -> Result<ModelEvaluation, RunnerError> {
    let id_logits = params.logits(&points_of_labeled(&data.id_test))?;
    let correct = data
        .id_test
        .iter()
        .enumerate()
        .filter(|(i, s)| argmax(id_logits.row(*i)) == s.label)
        .count();
    let id_accuracy = correct as f64 / data.id_test.len().max(1) as f64;
    let aux_logits = params.logits(&points_of(&data.aux_test))?;
    let real_logits = params.logits(&points_of(&data.real_test))?;
    let metrics = scores
        .iter()
        .map(|&kind| {
            let id = kind.score(&id_logits)?;
            let aux = ScoreSet::new(id.clone(), kind.score(&aux_logits)?, kind)?;
            let real = ScoreSet::new(id, kind.score(&real_logits)?, kind)?;
            Ok(ScoreMetrics {
                score: kind,
                aux: detection_metrics(&aux)?,
                real: detection_metrics(&real)?,
            })
        })
        .collect::<Result<Vec<_>, RunnerError>>()?;
    Ok(ModelEvaluation {
        id_accuracy,
        metrics,
    })
}

/// Persisted outcome of one seed. Paths are relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec_hash: String,
    pub mode: String,
    pub method: String,
    pub seed: u64,
    pub rho: f64,
    pub id_accuracy: Option<f64>,
    pub metrics: Vec<ScoreMetrics>,
    pub discrepancy: Option<DiscrepancyEstimate>,
    pub final_gamma: Option<f64>,
    pub wall_time_secs: f64,
    pub diagnostics_path: Option<String>,
    pub checkpoint_path: Option<String>,
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn new(spec: &ExperimentSpec, method: Method, seed: u64, rel_dir: &Path) -> Self {
        let rel = |f: &str| Some(rel_dir.join(f).to_string_lossy().into_owned());
        Self {
            spec_hash: spec.hash(),
            mode: spec.mode.name().to_string(),
            method: method.name().to_string(),
            seed,
            rho: spec.dal.rho,
            id_accuracy: None,
            metrics: Vec::new(),
            discrepancy: None,
            final_gamma: None,
            wall_time_secs: 0.0,
            diagnostics_path: rel(DIAGNOSTICS_FILE),
            checkpoint_path: rel(CHECKPOINT_FILE),
            failure: None,
        }
    }

    pub fn set_evaluation(&mut self, eval: ModelEvaluation) {
        self.id_accuracy = Some(eval.id_accuracy);
        self.metrics = eval.metrics;
    }

    pub fn clear_metrics(&mut self) {
        self.id_accuracy = None;
        self.metrics.clear();
    }

    pub fn metrics_for(&self, kind: ScoreKind) -> Option<&ScoreMetrics> {
        self.metrics.iter().find(|m| m.score == kind)
    }

    /// Rates and AUROC must lie in `[0, 1]`.
    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |msg: String| Err(RunnerError::CheckFailed(msg));
        if let Some(a) = self.id_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("seed {}: accuracy {a} out of range", self.seed));
            }
        }
        for m in &self.metrics {
            if !m.aux.in_range() || !m.real.in_range() {
                return bad(format!(
                    "seed {}: {} metrics out of range",
                    self.seed, m.score
                ));
            }
        }
        Ok(())
    }

    /// Equality of everything except wall time.
    pub fn same_results(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self {
            wall_time_secs: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, String> {
        serde_json::from_str(s).map_err(|e| e.to_string())
    }
}

/// One line of the ρ-sweep curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub seed: u64,
    pub fpr95_aux: f64,
    pub fpr95_real: f64,
    pub auroc_real: f64,
}

impl SweepRow {
    /// Failed runs become rows of NaN so the grid stays rectangular.
    pub fn from_record(rho: f64, rec: &RunRecord, kind: ScoreKind) -> Self {
        match rec.metrics_for(kind) {
            Some(m) => Self {
                rho,
                seed: rec.seed,
                fpr95_aux: m.aux.fpr95,
                fpr95_real: m.real.fpr95,
                auroc_real: m.real.auroc,
            },
            None => Self {
                rho,
                seed: rec.seed,
                fpr95_aux: f64::NAN,
                fpr95_real: f64::NAN,
                auroc_real: f64::NAN,
            },
        }
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{:?},{},{:?},{:?},{:?}\n",
            r.rho, r.seed, r.fpr95_aux, r.fpr95_real, r.auroc_real
        ));
    }
    out
}
