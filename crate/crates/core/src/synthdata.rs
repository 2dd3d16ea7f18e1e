//! Two-dimensional synthetic scenes: a ring of Gaussian class blobs (ID), a
//! surrounding annulus (auxiliary OOD) and a translated copy of the annulus
//! (real OOD). The translation `δ` controls how far the real outliers drift
//! from the auxiliary ones.

use std::f64::consts::TAU;
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{gaussian_vec, DenseTensor};
use crate::transport::{wasserstein1, CostSpec, DiscreteDistribution, TransportError, MAX_SUPPORT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Config(String),
    #[error("subsample size {k} exceeds available samples ({available})")]
    Subsample { k: usize, available: usize },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Auxiliary outliers available for training.
    pub m_aux: usize,
    /// Held-out outliers per OOD test split (auxiliary and real).
    pub m_real: usize,
    pub id_radius: f64,
    pub class_std: f64,
    pub r_lo: f64,
    pub r_hi: f64,
    pub delta: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            n_train: 2000,
            n_test: 1000,
            m_aux: 2000,
            m_real: 1000,
            id_radius: 1.0,
            class_std: 0.3,
            r_lo: 4.0,
            r_hi: 5.0,
            delta: 2.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        let finite = [
            self.id_radius,
            self.class_std,
            self.r_lo,
            self.r_hi,
            self.delta,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("geometry values must be finite");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.class_std < 0.0 || self.id_radius < 0.0 || self.r_lo < 0.0 {
            return bad("radii and class_std must be non-negative");
        }
        if self.r_lo > self.r_hi {
            return bad("r_lo must not exceed r_hi");
        }
        if self.id_radius >= self.r_lo {
            return bad("id_radius must be smaller than r_lo");
        }
        if self.delta < 0.0 {
            return bad("delta must be non-negative");
        }
        Ok(())
    }

    /// ID blobs lie at least four standard deviations inside the annulus.
    pub fn is_separated(&self) -> bool {
        self.id_radius + 4.0 * self.class_std < self.r_lo
    }

    pub fn class_center(&self, k: usize) -> [f64; 2] {
        let a = TAU * k as f64 / self.num_classes as f64;
        [self.id_radius * a.cos(), self.id_radius * a.sin()]
    }

    fn rng(&self, stream: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream as u64);
        rng
    }
}

#[derive(Clone, Copy)]
enum Stream {
    IdTrain = 1,
    IdTest = 2,
    AuxTrain = 3,
    AuxTest = 4,
    Real = 5,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub point: [f64; 2],
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledSample {
    pub point: [f64; 2],
}

/// Balanced class mixture: sample `i` belongs to class `i mod C`.
pub fn sample_id(cfg: &SceneConfig, split: Split) -> Result<Vec<LabeledSample>, SynthError> {
    cfg.validate()?;
    let (n, stream) = match split {
        Split::Train => (cfg.n_train, Stream::IdTrain),
        Split::Test => (cfg.n_test, Stream::IdTest),
    };
    let mut rng = cfg.rng(stream);
    let noise = gaussian_vec(&mut rng, 2 * n, cfg.class_std);
    Ok((0..n)
        .map(|i| {
            let label = i % cfg.num_classes;
            let c = cfg.class_center(label);
            LabeledSample {
                point: [c[0] + noise[2 * i], c[1] + noise[2 * i + 1]],
                label,
            }
        })
        .collect())
}

fn annulus<R: Rng>(
    rng: &mut R,
    n: usize,
    r_lo: f64,
    r_hi: f64,
    shift: f64,
) -> Vec<UnlabeledSample> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            let r = (r_lo * r_lo + u * (r_hi * r_hi - r_lo * r_lo)).sqrt();
            let a = TAU * rng.gen::<f64>();
            UnlabeledSample {
                point: [shift + r * a.cos(), r * a.sin()],
            }
        })
        .collect()
}

/// Area-uniform draws from the annulus `r_lo ≤ |x| ≤ r_hi`. The train split
/// holds `m_aux` points and the test split `m_real`.
pub fn sample_aux_ood(cfg: &SceneConfig, split: Split) -> Result<Vec<UnlabeledSample>, SynthError> {
    cfg.validate()?;
    let (n, stream) = match split {
        Split::Train => (cfg.m_aux, Stream::AuxTrain),
        Split::Test => (cfg.m_real, Stream::AuxTest),
    };
    Ok(annulus(&mut cfg.rng(stream), n, cfg.r_lo, cfg.r_hi, 0.0))
}

/// The auxiliary annulus translated by `(δ, 0)`; only ever used for testing.
pub fn sample_real_ood(cfg: &SceneConfig) -> Result<Vec<UnlabeledSample>, SynthError> {
    cfg.validate()?;
    Ok(annulus(
        &mut cfg.rng(Stream::Real),
        cfg.m_real,
        cfg.r_lo,
        cfg.r_hi,
        cfg.delta,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyEstimate {
    pub mean: f64,
    pub std: f64,
    pub repeats: usize,
}

/// Averages the l1-cost `W₁` between uniform `k`-subsamples of both sets over
/// `repeats` independent draws.
pub fn estimate_discrepancy<R: Rng>(
    aux: &[UnlabeledSample],
    real: &[UnlabeledSample],
    k: usize,
    repeats: usize,
    rng: &mut R,
) -> Result<DiscrepancyEstimate, SynthError> {
    let available = aux.len().min(real.len());
    if k == 0 || k > available {
        return Err(SynthError::Subsample { k, available });
    }
    if k > MAX_SUPPORT {
        return Err(SynthError::Subsample {
            k,
            available: MAX_SUPPORT,
        });
    }
    if repeats == 0 {
        return Err(SynthError::Config("repeats must be positive".into()));
    }
    let pick = |set: &[UnlabeledSample], rng: &mut R| -> Result<DiscreteDistribution, SynthError> {
        let idx = index::sample(rng, set.len(), k);
        Ok(DiscreteDistribution::uniform(
            idx.iter().map(|i| set[i].point.to_vec()).collect(),
        )?)
    };
    let mut values = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let a = pick(aux, rng)?;
        let b = pick(real, rng)?;
        values.push(wasserstein1(&a, &b, &CostSpec::L1)?.distance);
    }
    let n = repeats as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if repeats > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(DiscrepancyEstimate { mean, std, repeats })
}

/// Every split of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub config: SceneConfig,
    pub id_train: Vec<LabeledSample>,
    pub id_test: Vec<LabeledSample>,
    pub aux_train: Vec<UnlabeledSample>,
    pub aux_test: Vec<UnlabeledSample>,
    pub real_test: Vec<UnlabeledSample>,
}

impl SceneData {
    pub fn generate(cfg: &SceneConfig) -> Result<Self, SynthError> {
        Ok(Self {
            config: cfg.clone(),
            id_train: sample_id(cfg, Split::Train)?,
            id_test: sample_id(cfg, Split::Test)?,
            aux_train: sample_aux_ood(cfg, Split::Train)?,
            aux_test: sample_aux_ood(cfg, Split::Test)?,
            real_test: sample_real_ood(cfg)?,
        })
    }

    /// Header `x1,x2,label,split,role`; outliers leave `label` empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x1,x2,label,split,role\n");
        let mut labeled = |set: &[LabeledSample], split: Split| {
            for s in set {
                out.push_str(&format!(
                    "{:?},{:?},{},{},id\n",
                    s.point[0], s.point[1], s.label, split
                ));
            }
        };
        labeled(&self.id_train, Split::Train);
        labeled(&self.id_test, Split::Test);
        let mut unlabeled = |set: &[UnlabeledSample], split: Split, role: &str| {
            for s in set {
                out.push_str(&format!(
                    "{:?},{:?},,{},{}\n",
                    s.point[0], s.point[1], split, role
                ));
            }
        };
        unlabeled(&self.aux_train, Split::Train, "aux");
        unlabeled(&self.aux_test, Split::Test, "aux");
        unlabeled(&self.real_test, Split::Test, "real");
        out
    }
}

pub fn points_of_labeled(set: &[LabeledSample]) -> DenseTensor {
    let data = set.iter().flat_map(|s| s.point).collect();
    DenseTensor::matrix(set.len(), 2, data).expect("finite sample coordinates")
}

pub fn labels_of(set: &[LabeledSample]) -> Vec<usize> {
    set.iter().map(|s| s.label).collect()
}

pub fn points_of(set: &[UnlabeledSample]) -> DenseTensor {
    let data = set.iter().flat_map(|s| s.point).collect();
    DenseTensor::matrix(set.len(), 2, data).expect("finite sample coordinates")
}
