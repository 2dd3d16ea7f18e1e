//! OOD scoring functions and threshold-free detection metrics.
//!
//! Every score follows the convention "higher means more in-distribution"; an
//! input is flagged ID when its score is at least the threshold.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{logsumexp_slice, DenseTensor, NumericsError};

pub const DEFAULT_TPR: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("empty {0} score list")]
    Empty(&'static str),
    #[error("non-finite score")]
    NonFinite,
    #[error("tpr target {0} outside (0, 1]")]
    Target(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("unknown scoring function {0:?}")]
    UnknownScore(String),
    #[error("score csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Maximum softmax probability.
    Msp,
    /// `logsumexp` of the logits (negative free energy).
    FreeEnergy,
    MaxLogit,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::Msp, ScoreKind::FreeEnergy, ScoreKind::MaxLogit];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Msp => "msp",
            ScoreKind::FreeEnergy => "free_energy",
            ScoreKind::MaxLogit => "max_logit",
        }
    }

    pub fn score(self, logits: &DenseTensor) -> Result<Vec<f64>, EvalError> {
        match self {
            ScoreKind::Msp => score_msp(logits),
            ScoreKind::FreeEnergy => score_free_energy(logits),
            ScoreKind::MaxLogit => score_max_logit(logits),
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EvalError::UnknownScore(s.to_string()))
    }
}

fn rows(logits: &DenseTensor) -> Result<impl Iterator<Item = &[f64]>, EvalError> {
    let (_, c) = logits.dims2()?;
    Ok(logits.data().chunks(c))
}

/// `max_k softmax_k(z) = exp(max z − logsumexp z)`.
pub fn score_msp(logits: &DenseTensor) -> Result<Vec<f64>, EvalError> {
    rows(logits)?
        .map(|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok((m - logsumexp_slice(r)?).exp())
        })
        .collect()
}

pub fn score_free_energy(logits: &DenseTensor) -> Result<Vec<f64>, EvalError> {
    rows(logits)?.map(|r| Ok(logsumexp_slice(r)?)).collect()
}

pub fn score_max_logit(logits: &DenseTensor) -> Result<Vec<f64>, EvalError> {
    Ok(rows(logits)?
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Scores of ID and OOD inputs under one scoring function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
    pub kind: ScoreKind,
}

impl ScoreSet {
    pub fn new(
        id_scores: Vec<f64>,
        ood_scores: Vec<f64>,
        kind: ScoreKind,
    ) -> Result<Self, EvalError> {
        let s = Self {
            id_scores,
            ood_scores,
            kind,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.id_scores.is_empty() {
            return Err(EvalError::Empty("id"));
        }
        if self.ood_scores.is_empty() {
            return Err(EvalError::Empty("ood"));
        }
        if self
            .id_scores
            .iter()
            .chain(&self.ood_scores)
            .any(|v| !v.is_finite())
        {
            return Err(EvalError::NonFinite);
        }
        Ok(())
    }

    /// Lines of `score,role` with role `id` or `ood`, preceded by a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("score,role\n");
        for s in &self.id_scores {
            out.push_str(&format!("{s:?},id\n"));
        }
        for s in &self.ood_scores {
            out.push_str(&format!("{s:?},ood\n"));
        }
        out
    }

    pub fn from_csv(text: &str, kind: ScoreKind) -> Result<Self, EvalError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "score,role")) => {}
            _ => {
                return Err(EvalError::Csv {
                    line: 1,
                    msg: "expected header `score,role`".into(),
                })
            }
        }
        let (mut id, mut ood) = (Vec::new(), Vec::new());
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| EvalError::Csv {
                line: i + 1,
                msg: msg.into(),
            };
            let (score, role) = line
                .split_once(',')
                .ok_or_else(|| bad("expected two fields"))?;
            let v: f64 = score.trim().parse().map_err(|_| bad("unparsable score"))?;
            match role.trim() {
                "id" => id.push(v),
                "ood" => ood.push(v),
                _ => return Err(bad("role must be `id` or `ood`")),
            }
        }
        Self::new(id, ood, kind)
    }
}

/// Threshold `λ`: the `k`-th smallest ID score with `k = ⌊(1 − tpr)·n⌋ + 1`,
/// i.e. the largest ID score that still keeps at least `tpr` of ID inputs at
/// or above it.
pub fn tpr_threshold(id_scores: &[f64], tpr_target: f64) -> Result<f64, EvalError> {
    if id_scores.is_empty() {
        return Err(EvalError::Empty("id"));
    }
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(EvalError::Target(tpr_target));
    }
    let n = id_scores.len();
    // the small slack absorbs representation error in (1 - tpr)·n, e.g. 0.05·20
    let k = (((1.0 - tpr_target) * n as f64 + 1e-9).floor() as usize + 1).min(n);
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

/// Fraction of OOD inputs accepted as ID at the `tpr_target` threshold.
pub fn fpr_at_tpr(scores: &ScoreSet, tpr_target: f64) -> Result<f64, EvalError> {
    scores.validate()?;
    let lambda = tpr_threshold(&scores.id_scores, tpr_target)?;
    let accepted = scores.ood_scores.iter().filter(|&&s| s >= lambda).count();
    Ok(accepted as f64 / scores.ood_scores.len() as f64)
}

/// Fraction of ID inputs rejected at the `tpr_target` threshold.
pub fn fnr_at_tpr(scores: &ScoreSet, tpr_target: f64) -> Result<f64, EvalError> {
    scores.validate()?;
    let lambda = tpr_threshold(&scores.id_scores, tpr_target)?;
    let rejected = scores.id_scores.iter().filter(|&&s| s < lambda).count();
    Ok(rejected as f64 / scores.id_scores.len() as f64)
}

/// Probability that an ID score exceeds an OOD score, ties counting one half.
///
/// Computed from mid-ranks of the pooled sample (Mann–Whitney U).
pub fn auroc(scores: &ScoreSet) -> Result<f64, EvalError> {
    scores.validate()?;
    let (n_id, n_ood) = (scores.id_scores.len(), scores.ood_scores.len());
    let mut pooled: Vec<(f64, bool)> = scores
        .id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.ood_scores.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_id = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid_rank = (i + j + 2) as f64 / 2.0;
        let ids = pooled[i..=j].iter().filter(|p| p.1).count();
        rank_sum_id += mid_rank * ids as f64;
        i = j + 1;
    }
    let u = rank_sum_id - (n_id * (n_id + 1)) as f64 / 2.0;
    Ok(u / (n_id as f64 * n_ood as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub fpr95: f64,
    pub auroc: f64,
    pub fnr95: f64,
}

impl DetectionMetrics {
    pub fn in_range(&self) -> bool {
        [self.fpr95, self.auroc, self.fnr95]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
    }
}

pub fn detection_metrics(scores: &ScoreSet) -> Result<DetectionMetrics, EvalError> {
    Ok(DetectionMetrics {
        fpr95: fpr_at_tpr(scores, DEFAULT_TPR)?,
        auroc: auroc(scores)?,
        fnr95: fnr_at_tpr(scores, DEFAULT_TPR)?,
    })
}
