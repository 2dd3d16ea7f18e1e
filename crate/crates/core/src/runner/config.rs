//! Flat `key = value` experiment configuration.
//!
//! Lines are trimmed; blank lines and lines starting with `#` are skipped.
//! A file must declare `schema_version = 1` before any other key. Command-line
//! overrides go through [`ExperimentSpec::set`] as well, so every key accepted
//! in a file is also a flag and vice versa.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunnerError;
use crate::dal::{AlphaOn, DalConfig};
use crate::eval::ScoreKind;
use crate::model::Architecture;
use crate::synthdata::SceneConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TrainDal,
    TrainOe,
    SweepRho,
    DualityCheck,
    GradCheck,
    EvalOnly,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::TrainDal,
        Mode::TrainOe,
        Mode::SweepRho,
        Mode::DualityCheck,
        Mode::GradCheck,
        Mode::EvalOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::TrainDal => "train-dal",
            Mode::TrainOe => "train-oe",
            Mode::SweepRho => "sweep-rho",
            Mode::DualityCheck => "duality-check",
            Mode::GradCheck => "grad-check",
            Mode::EvalOnly => "eval-only",
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// Everything one invocation of the runner needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub mode: Mode,
    pub dal: DalConfig,
    pub scene: SceneConfig,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub seeds: Vec<u64>,
    pub scores: Vec<ScoreKind>,
    pub out_dir: PathBuf,
    pub rho_grid: Vec<f64>,
    pub workers: usize,
    pub checkpoint: Option<PathBuf>,
    pub instances: Option<PathBuf>,
    pub random_instances: usize,
    pub discrepancy_k: usize,
    pub discrepancy_repeats: usize,
}

impl ExperimentSpec {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            dal: DalConfig::default(),
            scene: SceneConfig::default(),
            hidden: vec![64, 64],
            embedding_dim: 8,
            seeds: vec![0],
            scores: vec![ScoreKind::Msp],
            out_dir: PathBuf::from("runs"),
            rho_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            workers: 1,
            checkpoint: None,
            instances: None,
            random_instances: 100,
            discrepancy_k: 64,
            discrepancy_repeats: 10,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::new(2, &self.hidden, self.embedding_dim, self.scene.num_classes)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), RunnerError> {
        let v = value.trim();
        let bad = |msg: String| RunnerError::Config {
            key: key.to_string(),
            msg,
        };
        fn num<T: FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?}"))
        }
        fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
            v.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| num(s.trim()))
                .collect()
        }
        let d = &mut self.dal;
        let s = &mut self.scene;
        let r: Result<(), String> = match key {
            "schema_version" => match num::<u32>(v) {
                Ok(SCHEMA_VERSION) => Ok(()),
                Ok(other) => Err(format!("unsupported schema version {other}")),
                Err(e) => Err(e),
            },
            "mode" => v.parse().map(|m| self.mode = m),
            "rho" => num(v).map(|x| d.rho = x),
            "gamma_max" => num(v).map(|x| d.gamma_max = x),
            "gamma_init" => num(v).map(|x| d.gamma_init = x),
            "beta" => num(v).map(|x| d.beta = x),
            "alpha" => num(v).map(|x| d.alpha = x),
            "alpha_on" => match v {
                "ood_term" => {
                    d.alpha_on = AlphaOn::OodTerm;
                    Ok(())
                }
                "id_term" => {
                    d.alpha_on = AlphaOn::IdTerm;
                    Ok(())
                }
                _ => Err(format!("alpha_on must be ood_term or id_term, got {v:?}")),
            },
            "sigma" => num(v).map(|x| d.sigma = x),
            "ps" => num(v).map(|x| d.ps = x),
            "num_search" => num(v).map(|x| d.num_search = x),
            "lr0" => num(v).map(|x| d.lr0 = x),
            "id_batch" => num(v).map(|x| d.id_batch = x),
            "ood_batch" => num(v).map(|x| d.ood_batch = x),
            "num_epochs" => num(v).map(|x| d.num_epochs = x),
            "num_classes" => num(v).map(|x| s.num_classes = x),
            "n_train" => num(v).map(|x| s.n_train = x),
            "n_test" => num(v).map(|x| s.n_test = x),
            "m_aux" => num(v).map(|x| s.m_aux = x),
            "m_real" => num(v).map(|x| s.m_real = x),
            "id_radius" => num(v).map(|x| s.id_radius = x),
            "class_std" => num(v).map(|x| s.class_std = x),
            "r_lo" => num(v).map(|x| s.r_lo = x),
            "r_hi" => num(v).map(|x| s.r_hi = x),
            "delta" => num(v).map(|x| s.delta = x),
            "hidden" => list(v).map(|x| self.hidden = x),
            "embedding_dim" => num(v).map(|x| self.embedding_dim = x),
            "seeds" => list(v).map(|x| self.seeds = x),
            "scores" => list(v).map(|x| self.scores = x),
            "out_dir" => {
                self.out_dir = PathBuf::from(v);
                Ok(())
            }
            "rho_grid" => list(v).map(|x| self.rho_grid = x),
            "workers" => num(v).map(|x| self.workers = x),
            "checkpoint" => {
                self.checkpoint = Some(PathBuf::from(v));
                Ok(())
            }
            "instances" => {
                self.instances = Some(PathBuf::from(v));
                Ok(())
            }
            "random_instances" => num(v).map(|x| self.random_instances = x),
            "discrepancy_k" => num(v).map(|x| self.discrepancy_k = x),
            "discrepancy_repeats" => num(v).map(|x| self.discrepancy_repeats = x),
            _ => return Err(RunnerError::UnknownKey(key.to_string())),
        };
        r.map_err(bad)
    }

    /// Parses a config file body on top of the defaults for `mode`.
    pub fn parse(text: &str, mode: Mode) -> Result<Self, RunnerError> {
        let mut spec = Self::new(mode);
        spec.apply_text(text)?;
        Ok(spec)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), RunnerError> {
        let mut versioned = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| RunnerError::Config {
                key: format!("line {}", i + 1),
                msg: "expected key = value".into(),
            })?;
            let k = k.trim();
            if !versioned && k != "schema_version" {
                return Err(RunnerError::Config {
                    key: k.to_string(),
                    msg: "schema_version must come first".into(),
                });
            }
            versioned = true;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |key: &str, msg: &str| {
            Err(RunnerError::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed required");
        }
        if self.scores.is_empty() {
            return bad("scores", "at least one scoring function required");
        }
        if self.workers == 0 {
            return bad("workers", "must be positive");
        }
        if self.discrepancy_k == 0 || self.discrepancy_repeats == 0 {
            return bad(
                "discrepancy_k",
                "subsample size and repeats must be positive",
            );
        }
        match self.mode {
            Mode::SweepRho if self.rho_grid.is_empty() => {
                return bad("rho_grid", "grid must be non-empty")
            }
            Mode::SweepRho if self.rho_grid.iter().any(|r| !r.is_finite() || *r < 0.0) => {
                return bad("rho_grid", "radii must be finite and >= 0")
            }
            Mode::EvalOnly if self.checkpoint.is_none() => {
                return bad("checkpoint", "eval-only needs a checkpoint")
            }
            _ => {}
        }
        if matches!(
            self.mode,
            Mode::TrainDal | Mode::TrainOe | Mode::SweepRho | Mode::EvalOnly
        ) {
            self.dal.validate()?;
            self.scene.validate()?;
            self.architecture().validate()?;
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; parsing it back yields `self`.
    pub fn to_config_string(&self) -> String {
        fn join<T: ToString>(v: &[T]) -> String {
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        }
        let d = &self.dal;
        let s = &self.scene;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("schema_version", SCHEMA_VERSION.to_string());
        kv("mode", self.mode.name().into());
        kv("rho", format!("{:?}", d.rho));
        kv("gamma_max", format!("{:?}", d.gamma_max));
        kv("gamma_init", format!("{:?}", d.gamma_init));
        kv("beta", format!("{:?}", d.beta));
        kv("alpha", format!("{:?}", d.alpha));
        kv("alpha_on", d.alpha_on.name().into());
        kv("sigma", format!("{:?}", d.sigma));
        kv("ps", format!("{:?}", d.ps));
        kv("num_search", d.num_search.to_string());
        kv("lr0", format!("{:?}", d.lr0));
        kv("id_batch", d.id_batch.to_string());
        kv("ood_batch", d.ood_batch.to_string());
        kv("num_epochs", d.num_epochs.to_string());
        kv("num_classes", s.num_classes.to_string());
        kv("n_train", s.n_train.to_string());
        kv("n_test", s.n_test.to_string());
        kv("m_aux", s.m_aux.to_string());
        kv("m_real", s.m_real.to_string());
        kv("id_radius", format!("{:?}", s.id_radius));
        kv("class_std", format!("{:?}", s.class_std));
        kv("r_lo", format!("{:?}", s.r_lo));
        kv("r_hi", format!("{:?}", s.r_hi));
        kv("delta", format!("{:?}", s.delta));
        kv("hidden", join(&self.hidden));
        kv("embedding_dim", self.embedding_dim.to_string());
        kv("seeds", join(&self.seeds));
        kv("scores", join(&self.scores));
        kv("out_dir", self.out_dir.display().to_string());
        kv(
            "rho_grid",
            self.rho_grid
                .iter()
                .map(|r| format!("{r:?}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("workers", self.workers.to_string());
        if let Some(c) = &self.checkpoint {
            kv("checkpoint", c.display().to_string());
        }
        if let Some(c) = &self.instances {
            kv("instances", c.display().to_string());
        }
        kv("random_instances", self.random_instances.to_string());
        kv("discrepancy_k", self.discrepancy_k.to_string());
        kv("discrepancy_repeats", self.discrepancy_repeats.to_string());
        out
    }

    /// SHA-256 of the canonical rendering, excluding `out_dir` and `workers`
    /// (neither changes any result).
    pub fn hash(&self) -> String {
        let canonical: String = self
            .to_config_string()
            .lines()
            .filter(|l| !l.starts_with("out_dir") && !l.starts_with("workers"))
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
