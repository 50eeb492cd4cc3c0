//! Flat `key = value` run configuration. Files and command-line overrides go
//! through the same setter; `dump` writes every key so a run can be replayed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{FdrlError, Result};
use crate::fdn::DEFAULT_CENTER_RATE;
use crate::model::{ExecMode, HyperParams};
use crate::trainer::{Schedule, Trainer};

/// Environment variable naming a config file read when none is given.
pub const CONFIG_ENV: &str = "FDRL_CONFIG";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub cls_weight: f64,
    pub delta: f64,
    pub n_latent: usize,
    pub latent_dim: usize,
    pub center_rate: f64,

    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub lr_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub seed: u64,
    /// `1` runs sequentially; anything else uses the thread pool, `0` sizing
    /// it automatically.
    pub threads: usize,
    /// Class count assumed when reading CSV datasets.
    pub classes: usize,

    /// Path keys take an empty value to mean "not set".
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub eval_csv: Option<PathBuf>,
    pub intra_w_csv: Option<PathBuf>,
    pub pca_csv: Option<PathBuf>,
    pub relations_csv: Option<PathBuf>,
    pub relations_limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hp = HyperParams::standard(0, 0);
        let s = Schedule::default();
        Self {
            lambda1: hp.lambda1,
            lambda2: hp.lambda2,
            lambda3: hp.lambda3,
            cls_weight: hp.cls_weight,
            delta: hp.delta,
            n_latent: hp.n_latent,
            latent_dim: hp.latent_dim,
            center_rate: DEFAULT_CENTER_RATE,
            base_lr: s.base_lr,
            decay_epochs: s.decay_epochs,
            lr_factor: s.factor,
            epochs: s.total_epochs,
            batch_size: s.batch_size,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            threads: 1,
            classes: 7,
            train: None,
            test: None,
            checkpoint: Some("model.fdrm".into()),
            log: Some("train_log.csv".into()),
            eval_csv: Some("eval.csv".into()),
            intra_w_csv: Some("intra_w.csv".into()),
            pca_csv: Some("pca.csv".into()),
            relations_csv: None,
            relations_limit: 16,
        }
    }
}

pub const KEYS: [&str; 28] = [
    "lambda1",
    "lambda2",
    "lambda3",
    "cls_weight",
    "delta",
    "n_latent",
    "latent_dim",
    "center_rate",
    "base_lr",
    "decay_epochs",
    "lr_factor",
    "epochs",
    "batch_size",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "threads",
    "classes",
    "train",
    "test",
    "checkpoint",
    "log",
    "eval_csv",
    "intra_w_csv",
    "pca_csv",
    "relations_csv",
    "relations_limit",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| FdrlError::Config(format!("{key}: cannot parse {value:?}")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "lambda1" => self.lambda1 = num(key, v)?,
            "lambda2" => self.lambda2 = num(key, v)?,
            "lambda3" => self.lambda3 = num(key, v)?,
            "cls_weight" => self.cls_weight = num(key, v)?,
            "delta" => self.delta = num(key, v)?,
            "n_latent" => self.n_latent = num(key, v)?,
            "latent_dim" => self.latent_dim = num(key, v)?,
            "center_rate" => self.center_rate = num(key, v)?,
            "base_lr" => self.base_lr = num(key, v)?,
            "decay_epochs" => {
                self.decay_epochs = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "lr_factor" => self.lr_factor = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "adam_eps" => self.adam_eps = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "threads" => self.threads = num(key, v)?,
            "classes" => self.classes = num(key, v)?,
            "train" => self.train = path(v),
            "test" => self.test = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "log" => self.log = path(v),
            "eval_csv" => self.eval_csv = path(v),
            "intra_w_csv" => self.intra_w_csv = path(v),
            "pca_csv" => self.pca_csv = path(v),
            "relations_csv" => self.relations_csv = path(v),
            "relations_limit" => self.relations_limit = num(key, v)?,
            "input_dim" | "n_classes" => {
                return Err(FdrlError::Config(format!(
                    "{key} is taken from the dataset and cannot be set"
                )))
            }
            _ => return Err(FdrlError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| FdrlError::Parse {
                path: origin.to_path_buf(),
                line: n as u64 + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            self.set(k.trim(), v).map_err(|e| FdrlError::Parse {
                path: origin.to_path_buf(),
                line: n as u64 + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&fs::read_to_string(path)?, path)?;
        Ok(cfg)
    }

    /// `key=value` overrides in order, e.g. from repeated `--set` flags.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let p = p.as_ref();
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| FdrlError::Config(format!("override {p:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Every settable key, one per line, in a fixed order.
    pub fn dump(&self) -> String {
        let decays: Vec<String> = self.decay_epochs.iter().map(|e| e.to_string()).collect();
        let pairs: [(&str, String); 28] = [
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("lambda3", self.lambda3.to_string()),
            ("cls_weight", self.cls_weight.to_string()),
            ("delta", self.delta.to_string()),
            ("n_latent", self.n_latent.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("center_rate", self.center_rate.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("decay_epochs", decays.join(",")),
            ("lr_factor", self.lr_factor.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("classes", self.classes.to_string()),
            ("train", show_path(&self.train)),
            ("test", show_path(&self.test)),
            ("checkpoint", show_path(&self.checkpoint)),
            ("log", show_path(&self.log)),
            ("eval_csv", show_path(&self.eval_csv)),
            ("intra_w_csv", show_path(&self.intra_w_csv)),
            ("pca_csv", show_path(&self.pca_csv)),
            ("relations_csv", show_path(&self.relations_csv)),
            ("relations_limit", self.relations_limit.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn hyper_params(&self, input_dim: usize, n_classes: usize) -> Result<HyperParams> {
        let hp = HyperParams {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            cls_weight: self.cls_weight,
            delta: self.delta,
            n_latent: self.n_latent,
            latent_dim: self.latent_dim,
            input_dim,
            n_classes,
            center_rate: self.center_rate,
        };
        hp.validate().map_err(|e| FdrlError::Config(e.to_string()))?;
        Ok(hp)
    }

    /// Decay boundaries at or past the final epoch are dropped, so short runs
    /// keep the default schedule's prefix.
    pub fn schedule(&self) -> Result<Schedule> {
        let mut s = Schedule {
            base_lr: self.base_lr,
            decay_epochs: self.decay_epochs.clone(),
            factor: self.lr_factor,
            total_epochs: self.epochs,
            batch_size: self.batch_size,
        };
        s.truncate_decays();
        s.validate().map_err(|e| FdrlError::Config(e.to_string()))?;
        Ok(s)
    }

    /// A fresh trainer with this config's schedule and Adam constants.
    pub fn trainer(&self, hp: HyperParams) -> Result<Trainer> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(FdrlError::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(FdrlError::Config("adam_eps must be positive".into()));
        }
        let mut t = Trainer::new(hp, self.schedule()?, self.seed, self.mode())?;
        t.adam.beta1 = self.beta1;
        t.adam.beta2 = self.beta2;
        t.adam.eps = self.adam_eps;
        Ok(t)
    }

    pub fn mode(&self) -> ExecMode {
        if self.threads == 1 {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        }
    }
}
