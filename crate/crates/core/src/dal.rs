//! The DAL trainer and the plain outlier-exposure baseline.
//!
//! Every DAL step searches for a worst-case additive perturbation of the
//! auxiliary outliers' embeddings, moves the dual variable `γ` toward the
//! radius constraint, and then takes one SGD step on
//! `id_loss + α·oe_loss(h(e(x) + p))` with `p` treated as a constant.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{id_loss_on_tape, oe_loss_on_tape, ModelError, ModelParams};
use crate::numerics::{
    central_difference, gaussian_vec, relative_error, DenseTensor, GradCheckReport, NumericsError,
    Tape,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DalError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, DalError>;

/// Which risk term the trade-off weight `α` multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaOn {
    #[default]
    OodTerm,
    IdTerm,
}

impl AlphaOn {
    pub fn name(self) -> &'static str {
        match self {
            AlphaOn::OodTerm => "ood_term",
            AlphaOn::IdTerm => "id_term",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DalConfig {
    pub rho: f64,
    pub gamma_max: f64,
    pub beta: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub ps: f64,
    pub num_search: usize,
    pub lr0: f64,
    pub id_batch: usize,
    pub ood_batch: usize,
    pub num_epochs: usize,
    pub seed: u64,
    pub alpha_on: AlphaOn,
    /// Value of `γ` before the first step.
    pub gamma_init: f64,
}

impl Default for DalConfig {
    fn default() -> Self {
        Self {
            rho: 10.0,
            gamma_max: 10.0,
            beta: 0.005,
            alpha: 1.0,
            sigma: 0.001,
            ps: 1.0,
            num_search: 10,
            lr0: 0.07,
            id_batch: 128,
            ood_batch: 256,
            num_epochs: 50,
            seed: 0,
            alpha_on: AlphaOn::OodTerm,
            gamma_init: 0.0,
        }
    }
}

impl DalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DalError::Config(m.to_string()));
        let reals = [
            self.rho,
            self.gamma_max,
            self.beta,
            self.alpha,
            self.sigma,
            self.ps,
            self.lr0,
            self.gamma_init,
        ];
        if reals.iter().any(|v| !v.is_finite()) {
            return bad("all real-valued settings must be finite");
        }
        if self.rho < 0.0 {
            return bad("rho must be >= 0");
        }
        if self.gamma_max <= 0.0 {
            return bad("gamma_max must be > 0");
        }
        if self.beta <= 0.0 {
            return bad("beta must be > 0");
        }
        if self.alpha < 0.0 {
            return bad("alpha must be >= 0");
        }
        if self.sigma <= 0.0 {
            return bad("sigma must be > 0");
        }
        if self.ps < 0.0 {
            return bad("ps must be >= 0");
        }
        if self.lr0 < 0.0 {
            return bad("lr0 must be >= 0");
        }
        if self.id_batch == 0 || self.ood_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if !(0.0..=self.gamma_max).contains(&self.gamma_init) {
            return bad("gamma_init must lie in [0, gamma_max]");
        }
        Ok(())
    }

    /// `(id weight, ood weight)` of the training loss.
    pub fn loss_weights(&self) -> (f64, f64) {
        match self.alpha_on {
            AlphaOn::OodTerm => (1.0, self.alpha),
            AlphaOn::IdTerm => (self.alpha, 1.0),
        }
    }
}

/// The dual variable `γ`, kept inside `[0, γ_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub gamma: f64,
}

impl DualState {
    pub fn new(gamma: f64, gamma_max: f64) -> Self {
        Self {
            gamma: gamma.clamp(0.0, gamma_max),
        }
    }
}

/// `γ ← clip(γ − β(ρ − mean‖p‖₁), 0, γ_max)`.
pub fn update_gamma(
    state: DualState,
    rho: f64,
    beta: f64,
    mean_l1_norm: f64,
    gamma_max: f64,
) -> DualState {
    DualState {
        gamma: (state.gamma - beta * (rho - mean_l1_norm)).clamp(0.0, gamma_max),
    }
}

/// Embedding perturbations for one OOD mini-batch, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBatch {
    pub p: DenseTensor,
    /// Inner objective of each row at the returned perturbation.
    pub objective: Vec<f64>,
    /// Inner objective of each row at the Gaussian initialization.
    pub initial_objective: Vec<f64>,
}

impl PerturbationBatch {
    pub fn batch_size(&self) -> usize {
        self.p.rows()
    }

    pub fn l1_norms(&self) -> Vec<f64> {
        (0..self.p.rows())
            .map(|i| self.p.row(i).iter().map(|v| v.abs()).sum())
            .collect()
    }

    pub fn mean_l1(&self) -> f64 {
        let n = self.l1_norms();
        n.iter().sum::<f64>() / n.len() as f64
    }
}

/// I.i.d. `N(0, σ²)` entries. The objectives are left empty.
pub fn init_perturbations<R: Rng + ?Sized>(
    batch_size: usize,
    emb_dim: usize,
    sigma: f64,
    rng: &mut R,
) -> PerturbationBatch {
    let data = gaussian_vec(rng, batch_size * emb_dim, sigma);
    PerturbationBatch {
        p: DenseTensor::matrix(batch_size, emb_dim, data).expect("finite gaussian draws"),
        objective: Vec::new(),
        initial_objective: Vec::new(),
    }
}

/// Per-row `oe_loss(h(emb + p)) − γ‖p‖₁` and its gradient with respect to `p`.
pub fn inner_objective_with_grad(
    params: &ModelParams,
    emb: &DenseTensor,
    p: &DenseTensor,
    gamma: f64,
) -> Result<(Vec<f64>, DenseTensor)> {
    if emb.shape() != p.shape() {
        return Err(DalError::Batch(format!(
            "perturbation {:?} vs embedding {:?}",
            p.shape(),
            emb.shape()
        )));
    }
    let mut tape = Tape::new();
    let e = tape.constant(emb.clone());
    let pv = tape.param(p.clone());
    let w = tape.constant(params.head.weight.clone());
    let b = tape.constant(params.head.bias.clone());
    let z = tape.add(e, pv)?;
    let z = tape.matmul(z, w)?;
    let logits = tape.add_bias(z, b)?;
    let loss = tape.uniform_kl_rows(logits)?;
    let norms = tape.l1_rows(pv)?;
    let penalty = tape.scale(norms, -gamma)?;
    let rows = tape.add(loss, penalty)?;
    let total = tape.sum(rows)?;
    let grad = tape.backward(total)?.wrt(&tape, pv)?;
    if grad.data().iter().any(|g| !g.is_finite()) {
        return Err(DalError::NonFinite("perturbation gradient"));
    }
    Ok((tape.value(rows)?.data().to_vec(), grad))
}

/// Batch mean of the inner objective at the embeddings of `x_ood`.
pub fn inner_objective(
    params: &ModelParams,
    x_ood: &DenseTensor,
    p: &DenseTensor,
    gamma: f64,
) -> Result<f64> {
    let emb = params.extract(x_ood)?;
    let (rows, _) = inner_objective_with_grad(params, emb.tensor(), p, gamma)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Gradient ascent on the inner objective from a Gaussian start, keeping for
/// each example the best iterate seen (the start included).
pub fn search_worst_perturbation<R: Rng + ?Sized>(
    params: &ModelParams,
    x_ood: &DenseTensor,
    gamma: f64,
    cfg: &DalConfig,
    rng: &mut R,
) -> Result<PerturbationBatch> {
    let emb = params.extract(x_ood)?;
    let emb = emb.tensor();
    let (n, d) = emb.dims2()?;
    let mut current = init_perturbations(n, d, cfg.sigma, rng).p;
    let (initial, mut grad) = inner_objective_with_grad(params, emb, &current, gamma)?;
    let mut best = current.clone();
    let mut best_obj = initial.clone();
    for _ in 0..cfg.num_search {
        current.axpy(cfg.ps, &grad)?;
        let (obj, g) = inner_objective_with_grad(params, emb, &current, gamma)?;
        for i in 0..n {
            if obj[i] > best_obj[i] {
                best_obj[i] = obj[i];
                best.data_mut()[i * d..(i + 1) * d].copy_from_slice(current.row(i));
            }
        }
        grad = g;
    }
    Ok(PerturbationBatch {
        p: best,
        objective: best_obj,
        initial_objective: initial,
    })
}

/// One labeled ID mini-batch paired with one auxiliary-OOD mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x_id: &'a DenseTensor,
    pub y_id: &'a [usize],
    pub x_ood: &'a DenseTensor,
}

impl Batch<'_> {
    fn validate(&self) -> Result<()> {
        if self.x_id.rows() == 0 || self.x_ood.rows() == 0 {
            return Err(DalError::Batch("empty mini-batch".into()));
        }
        if self.y_id.len() != self.x_id.rows() {
            return Err(DalError::Batch(format!(
                "{} labels for {} ID rows",
                self.y_id.len(),
                self.x_id.rows()
            )));
        }
        Ok(())
    }
}

/// Value and parameter gradient of the training loss.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub total: f64,
    pub id_loss: f64,
    pub ood_loss: f64,
    pub grad: ModelParams,
}

/// `w_id·id_loss + w_ood·oe_loss(h(e(x_ood) + p))` with `p` a constant
/// (absent means zero), differentiated with respect to every parameter.
pub fn training_loss(
    params: &ModelParams,
    batch: Batch<'_>,
    p: Option<&DenseTensor>,
    weights: (f64, f64),
) -> Result<LossEvaluation> {
    batch.validate()?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let x_id = tape.constant(batch.x_id.clone());
    let e_id = params.extract_on_tape(&mut tape, &vars, x_id)?;
    let z_id = params.classify_on_tape(&mut tape, &vars, e_id)?;
    let id = id_loss_on_tape(&mut tape, z_id, batch.y_id)?;
    let x_ood = tape.constant(batch.x_ood.clone());
    let mut e_ood = params.extract_on_tape(&mut tape, &vars, x_ood)?;
    if let Some(p) = p {
        let pv = tape.constant(p.clone());
        e_ood = tape.add(e_ood, pv)?;
    }
    let z_ood = params.classify_on_tape(&mut tape, &vars, e_ood)?;
    let ood = oe_loss_on_tape(&mut tape, z_ood)?;
    let a = tape.scale(id, weights.0)?;
    let b = tape.scale(ood, weights.1)?;
    let total = tape.add(a, b)?;
    let grads = tape.backward(total)?;
    let value = |v| -> Result<f64> { Ok(tape.value(v)?.item()?) };
    let eval = LossEvaluation {
        total: value(total)?,
        id_loss: value(id)?,
        ood_loss: value(ood)?,
        grad: params.gradients(&tape, &vars, &grads)?,
    };
    if !eval.total.is_finite() {
        return Err(DalError::NonFinite("training loss"));
    }
    Ok(eval)
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub gamma: f64,
    pub mean_p_l1: f64,
    pub inner_obj_pre: f64,
    pub inner_obj_post: f64,
    pub id_loss: f64,
    pub ood_loss: f64,
    pub lr: f64,
}

pub const DIAGNOSTICS_HEADER: &str =
    "step,gamma,mean_p_l1,inner_obj_pre,inner_obj_post,id_loss,ood_loss,lr";

/// Append-only per-step trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    records: Vec<StepRecord>,
}

impl TrainDiagnostics {
    pub fn push(&mut self, record: StepRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn csv_row(r: &StepRecord) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.step,
            r.gamma,
            r.mean_p_l1,
            r.inner_obj_pre,
            r.inner_obj_post,
            r.id_loss,
            r.ood_loss,
            r.lr
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(DIAGNOSTICS_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&Self::csv_row(r));
            out.push('\n');
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub params: ModelParams,
    pub dual: DualState,
    pub record: StepRecord,
    pub perturbation: Option<PerturbationBatch>,
}

/// Search, dual update and model update, in that order.
pub fn dal_step<R: Rng + ?Sized>(
    params: &ModelParams,
    dual: DualState,
    batch: Batch<'_>,
    cfg: &DalConfig,
    lr: f64,
    rng: &mut R,
) -> Result<StepOutput> {
    batch.validate()?;
    let pert = search_worst_perturbation(params, batch.x_ood, dual.gamma, cfg, rng)?;
    let mean_p_l1 = pert.mean_l1();
    let dual = update_gamma(dual, cfg.rho, cfg.beta, mean_p_l1, cfg.gamma_max);
    let eval = training_loss(params, batch, Some(&pert.p), cfg.loss_weights())?;
    let mut next = params.clone();
    next.axpy(-lr, &eval.grad)?;
    let record = StepRecord {
        step: 0,
        gamma: dual.gamma,
        mean_p_l1,
        inner_obj_pre: mean(&pert.initial_objective),
        inner_obj_post: mean(&pert.objective),
        id_loss: eval.id_loss,
        ood_loss: eval.ood_loss,
        lr,
    };
    Ok(StepOutput {
        params: next,
        dual,
        record,
        perturbation: Some(pert),
    })
}

/// One SGD step on `id_loss + α·oe_loss` without perturbation.
pub fn oe_step(
    params: &ModelParams,
    batch: Batch<'_>,
    cfg: &DalConfig,
    lr: f64,
) -> Result<StepOutput> {
    let eval = training_loss(params, batch, None, cfg.loss_weights())?;
    let mut next = params.clone();
    next.axpy(-lr, &eval.grad)?;
    let record = StepRecord {
        step: 0,
        gamma: 0.0,
        mean_p_l1: 0.0,
        inner_obj_pre: eval.ood_loss,
        inner_obj_post: eval.ood_loss,
        id_loss: eval.id_loss,
        ood_loss: eval.ood_loss,
        lr,
    };
    Ok(StepOutput {
        params: next,
        dual: DualState { gamma: 0.0 },
        record,
        perturbation: None,
    })
}

/// `lr0·(1 + cos(π·t/T))/2`; a zero-length schedule stays at `lr0`.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (PI * t as f64 / total as f64).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dal,
    Oe,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dal => "dal",
            Method::Oe => "oe",
        }
    }
}

/// Training inputs: labeled ID points and unlabeled auxiliary outliers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub x_id: DenseTensor,
    pub y_id: Vec<usize>,
    pub x_ood: DenseTensor,
}

impl TrainData {
    pub fn validate(&self) -> Result<()> {
        if self.x_id.rows() == 0 || self.x_ood.rows() == 0 {
            return Err(DalError::Batch("training sets must be non-empty".into()));
        }
        if self.y_id.len() != self.x_id.rows() {
            return Err(DalError::Batch("one label per ID point required".into()));
        }
        Ok(())
    }
}

/// Steps per epoch: the longer stream sets the pace, the shorter one cycles.
pub fn steps_per_epoch(cfg: &DalConfig, n_id: usize, n_ood: usize) -> usize {
    n_id.div_ceil(cfg.id_batch)
        .max(n_ood.div_ceil(cfg.ood_batch))
}

/// Endless reshuffled pass over `0..n`.
struct IndexStream {
    order: Vec<usize>,
    cursor: usize,
}

impl IndexStream {
    fn new<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, cursor: 0 }
    }

    /// Up to `size` indices; a pass never spills into the next shuffle.
    fn next<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        if self.cursor == self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let end = (self.cursor + size).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub dual: DualState,
    pub diagnostics: TrainDiagnostics,
}

/// A failed run keeps the trace recorded up to the failing step.
#[derive(Debug, Clone, Error)]
#[error("training failed at step {step}: {error}")]
pub struct TrainFailure {
    pub step: usize,
    pub error: DalError,
    pub diagnostics: TrainDiagnostics,
}

const SHUFFLE_STREAM: u64 = 11;
const PERTURB_STREAM: u64 = 12;

/// Runs `num_epochs` of DAL or OE from `init` under a cosine learning rate.
///
/// Batch order depends only on the seed, so DAL and OE runs with equal seeds
/// see identical mini-batches.
pub fn train(
    cfg: &DalConfig,
    method: Method,
    init: ModelParams,
    data: &TrainData,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let fail = |step, error, diagnostics| TrainFailure {
        step,
        error,
        diagnostics,
    };
    if let Err(e) = cfg.validate().and_then(|_| data.validate()) {
        return Err(fail(0, e, TrainDiagnostics::default()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut perturb_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    perturb_rng.set_stream(PERTURB_STREAM);

    let (n_id, n_ood) = (data.x_id.rows(), data.x_ood.rows());
    let total = cfg.num_epochs * steps_per_epoch(cfg, n_id, n_ood);
    let mut id_stream = IndexStream::new(n_id, &mut shuffle_rng);
    let mut ood_stream = IndexStream::new(n_ood, &mut shuffle_rng);

    let mut params = init;
    let mut dual = DualState::new(cfg.gamma_init, cfg.gamma_max);
    let mut diagnostics = TrainDiagnostics::default();
    for t in 0..total {
        let lr = cosine_lr(cfg.lr0, t, total);
        let id_idx = id_stream.next(cfg.id_batch, &mut shuffle_rng);
        let ood_idx = ood_stream.next(cfg.ood_batch, &mut shuffle_rng);
        let mut step = || -> Result<StepOutput> {
            let x_id = data.x_id.select_rows(&id_idx)?;
            let y_id: Vec<usize> = id_idx.iter().map(|&i| data.y_id[i]).collect();
            let x_ood = data.x_ood.select_rows(&ood_idx)?;
            let batch = Batch {
                x_id: &x_id,
                y_id: &y_id,
                x_ood: &x_ood,
            };
            match method {
                Method::Dal => dal_step(&params, dual, batch, cfg, lr, &mut perturb_rng),
                Method::Oe => oe_step(&params, batch, cfg, lr),
            }
        };
        match step() {
            Ok(out) => {
                params = out.params;
                dual = out.dual;
                diagnostics.push(StepRecord {
                    step: t,
                    ..out.record
                });
            }
            Err(e) => return Err(fail(t, e, diagnostics)),
        }
    }
    Ok(TrainOutcome {
        params,
        dual,
        diagnostics,
    })
}

fn compare(name: &str, analytic: &DenseTensor, numeric: &DenseTensor) -> GradCheckReport {
    let max_rel_err = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    GradCheckReport {
        name: name.to_string(),
        max_rel_err,
        coords: analytic.len(),
    }
}

/// Central-difference check of the parameter gradient of [`training_loss`].
pub fn check_training_gradient(
    params: &ModelParams,
    batch: Batch<'_>,
    p: Option<&DenseTensor>,
    weights: (f64, f64),
    h: f64,
) -> Result<GradCheckReport> {
    let eval = training_loss(params, batch, p, weights)?;
    let analytic = DenseTensor::vector(eval.grad.flatten())?;
    let x = DenseTensor::vector(params.flatten())?;
    let numeric = central_difference(
        |v| {
            let probe = params
                .unflatten(v.data())
                .map_err(|_| NumericsError::NonFinite("probe"))?;
            training_loss(&probe, batch, p, weights)
                .map(|e| e.total)
                .map_err(|_| NumericsError::NonFinite("training loss"))
        },
        &x,
        h,
    )?;
    Ok(compare("training_loss_wrt_params", &analytic, &numeric))
}

/// Central-difference check of the perturbation gradient of the summed inner objective.
pub fn check_perturbation_gradient(
    params: &ModelParams,
    emb: &DenseTensor,
    p: &DenseTensor,
    gamma: f64,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = inner_objective_with_grad(params, emb, p, gamma)?;
    let numeric = central_difference(
        |v| {
            inner_objective_with_grad(params, emb, v, gamma)
                .map(|(rows, _)| rows.iter().sum())
                .map_err(|_| NumericsError::NonFinite("inner objective"))
        },
        p,
        h,
    )?;
    Ok(compare(
        "inner_objective_wrt_perturbation",
        &analytic,
        &numeric,
    ))
}
