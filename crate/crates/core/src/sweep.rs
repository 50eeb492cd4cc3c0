//! Ablation runs: train once per value of one hyperparameter and collect a
//! summary row per run.

use std::path::Path;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::data::FeatureDataset;
use crate::error::{FdrlError, Result};
use crate::inspect::balance_distance;
use crate::trainer::mean_intra_weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    NLatent,
    Lambda1,
    Lambda2,
    Lambda3,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::NLatent => "n_latent",
            SweepParam::Lambda1 => "lambda1",
            SweepParam::Lambda2 => "lambda2",
            SweepParam::Lambda3 => "lambda3",
        }
    }

    /// The standard grid for this parameter.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParam::NLatent => vec![3.0, 6.0, 9.0, 12.0],
            SweepParam::Lambda1 | SweepParam::Lambda3 => vec![0.0, 1e-5, 1e-4, 1e-3, 1e-2],
            SweepParam::Lambda2 => vec![0.0, 0.5, 1.0, 1.5, 2.0],
        }
    }

    /// The other λ are fixed per grid: λ2 = 1 while sweeping λ1 or λ3, and
    /// λ1 = λ3 = 1e-4 while sweeping λ2.
    pub fn base_config(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            SweepParam::Lambda1 => {
                c.lambda2 = 1.0;
                c.lambda3 = 1e-4;
            }
            SweepParam::Lambda2 => {
                c.lambda1 = 1e-4;
                c.lambda3 = 1e-4;
            }
            SweepParam::Lambda3 => {
                c.lambda1 = 1e-4;
                c.lambda2 = 1.0;
            }
            SweepParam::NLatent => {}
        }
        c
    }
}

impl FromStr for SweepParam {
    type Err = FdrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" | "n_latent" => Ok(SweepParam::NLatent),
            "lambda1" => Ok(SweepParam::Lambda1),
            "lambda2" => Ok(SweepParam::Lambda2),
            "lambda3" => Ok(SweepParam::Lambda3),
            _ => Err(FdrlError::Config(format!(
                "cannot sweep {s:?}; expected m, lambda1, lambda2 or lambda3"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub n_latent: usize,
    pub lambdas: [f64; 3],
    pub final_loss: f64,
    pub train_accuracy: f64,
    /// Accuracy on the held-out set, when one is given.
    pub test_accuracy: Option<f64>,
    /// `‖w̄ − 1/M‖₁` on the training set.
    pub balance_distance: f64,
}

pub fn run_sweep(
    base: &RunConfig,
    param: SweepParam,
    values: &[f64],
    train: &FeatureDataset,
    test: Option<&FeatureDataset>,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(FdrlError::Config("sweep needs at least one value".into()));
    }
    let base = param.base_config(base);
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        match param {
            SweepParam::NLatent => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(FdrlError::Config(format!("M must be a positive integer, got {value}")));
                }
                cfg.n_latent = value as usize;
            }
            SweepParam::Lambda1 => cfg.lambda1 = value,
            SweepParam::Lambda2 => cfg.lambda2 = value,
            SweepParam::Lambda3 => cfg.lambda3 = value,
        }
        let hp = cfg.hyper_params(train.dim(), train.n_classes())?;
        let mut t = cfg.trainer(hp.clone())?;
        let summaries = t.fit(train)?;
        let final_loss = summaries.last().map_or(f64::NAN, |s| s.loss.total);
        let w = mean_intra_weights(&t.params, train, &hp, t.mode)?;
        rows.push(SweepRow {
            param,
            value,
            n_latent: hp.n_latent,
            lambdas: [hp.lambda1, hp.lambda2, hp.lambda3],
            final_loss,
            train_accuracy: t.evaluate(train)?.accuracy,
            test_accuracy: test.map(|d| t.evaluate(d)).transpose()?.map(|r| r.accuracy),
            balance_distance: balance_distance(&w),
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "param",
        "value",
        "n_latent",
        "lambda1",
        "lambda2",
        "lambda3",
        "final_loss",
        "train_accuracy",
        "test_accuracy",
        "balance_distance",
    ])?;
    for r in rows {
        w.write_record([
            r.param.key().to_string(),
            r.value.to_string(),
            r.n_latent.to_string(),
            r.lambdas[0].to_string(),
            r.lambdas[1].to_string(),
            r.lambdas[2].to_string(),
            r.final_loss.to_string(),
            r.train_accuracy.to_string(),
            r.test_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            r.balance_distance.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthOptions, SynthSpec};

    fn tiny() -> (RunConfig, FeatureDataset) {
        let spec = SynthSpec::random(&SynthOptions {
            n_classes: 3,
            n_actions: 4,
            dim: 12,
            samples_per_class: 6,
            ..SynthOptions::default()
        })
        .unwrap();
        let cfg = RunConfig {
            latent_dim: 4,
            n_latent: 3,
            epochs: 2,
            batch_size: 5,
            ..RunConfig::default()
        };
        (cfg, generate(&spec).unwrap())
    }

    #[test]
    fn one_row_per_value() {
        let (cfg, data) = tiny();
        let rows = run_sweep(&cfg, SweepParam::NLatent, &[2.0, 3.0], &data, Some(&data)).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].n_latent, 2);
        assert_eq!(rows[1].test_accuracy, Some(rows[1].train_accuracy));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_sweep_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("n_latent,2,2,0.0001,1,0.0001,"));
    }

    #[test]
    fn lambda_grids_pin_the_other_weights() {
        let (mut cfg, data) = tiny();
        cfg.lambda1 = 0.5;
        cfg.lambda2 = 0.25;
        let rows = run_sweep(&cfg, SweepParam::Lambda2, &[0.0], &data, None).unwrap();
        assert_eq!(rows[0].lambdas, [1e-4, 0.0, 1e-4]);
        assert_eq!(rows[0].test_accuracy, None);
        let rows = run_sweep(&cfg, SweepParam::Lambda3, &[1e-2], &data, None).unwrap();
        assert_eq!(rows[0].lambdas, [1e-4, 1.0, 1e-2]);
    }

    #[test]
    fn bad_requests_are_rejected() {
        let (cfg, data) = tiny();
        assert!("gamma".parse::<SweepParam>().is_err());
        assert_eq!("m".parse::<SweepParam>().unwrap(), SweepParam::NLatent);
        assert!(run_sweep(&cfg, SweepParam::NLatent, &[2.5], &data, None).is_err());
        assert!(run_sweep(&cfg, SweepParam::Lambda1, &[], &data, None).is_err());
    }

    #[test]
    fn default_grids() {
        assert_eq!(SweepParam::NLatent.default_grid(), vec![3.0, 6.0, 9.0, 12.0]);
        assert_eq!(SweepParam::Lambda2.default_grid().len(), 5);
    }
}
