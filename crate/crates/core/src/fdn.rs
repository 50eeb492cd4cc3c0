//! Feature decomposition: a basic feature is split into `M` non-negative latent
//! features, each pulled toward a shared, rule-updated center.

use crate::error::{contract, Result};
use crate::numerics::{linear_forward, sq_dist, DenseMatrix};

pub const DEFAULT_CENTER_RATE: f64 = 0.5;

/// `M × D`; row `j` is latent feature `l_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBank {
    pub features: DenseMatrix,
}

impl LatentBank {
    pub fn n_latent(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn latent(&self, j: usize) -> &[f64] {
        self.features.row(j)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCenters {
    /// `M × D`
    pub centers: DenseMatrix,
    pub update_rate: f64,
}

impl LatentCenters {
    /// Zero-initialised centers.
    pub fn new(n_latent: usize, dim: usize, update_rate: f64) -> Self {
        Self {
            centers: DenseMatrix::zeros(n_latent, dim),
            update_rate,
        }
    }

    /// `c_j ← c_j − γ·(1/N)·Σ_i (c_j − l_{i,j})`.
    pub fn update(&mut self, batch: &[LatentBank]) -> Result<()> {
        if batch.is_empty() {
            return contract("update_latent_centers: empty batch");
        }
        let mut mean = DenseMatrix::zeros(self.centers.rows(), self.centers.cols());
        for bank in batch {
            check_bank(bank, &self.centers)?;
            mean.add_scaled(&bank.features, 1.0);
        }
        mean.scale(1.0 / batch.len() as f64);
        self.step_toward(&mean);
        Ok(())
    }

    /// Same rule, given the batch mean of each latent feature as row `j` of `means`.
    pub fn step_toward(&mut self, means: &DenseMatrix) {
        let rate = self.update_rate;
        for (c, m) in self.centers.data_mut().iter_mut().zip(means.data()) {
            *c -= rate * (*c - m);
        }
    }
}

fn check_bank(bank: &LatentBank, centers: &DenseMatrix) -> Result<()> {
    if bank.features.shape() != centers.shape() {
        return contract(format!(
            "latent bank is {:?}, centers are {:?}",
            bank.features.shape(),
            centers.shape()
        ));
    }
    Ok(())
}

/// `l_j = relu(W_{d_j}ᵀ x)` for every `j`; each `W_{d_j}` is `P × D`.
pub fn decompose(x: &[f64], w_d: &[DenseMatrix]) -> Result<LatentBank> {
    let Some(first) = w_d.first() else {
        return contract("decompose: no decomposition matrices");
    };
    let dim = first.cols();
    let mut features = DenseMatrix::zeros(w_d.len(), dim);
    for (j, w) in w_d.iter().enumerate() {
        if w.cols() != dim {
            return contract("decompose: matrices disagree on latent dimension");
        }
        let z = linear_forward(w, x)?;
        for (dst, v) in features.row_mut(j).iter_mut().zip(z) {
            *dst = v.max(0.0);
        }
    }
    Ok(LatentBank { features })
}

/// `(1/N)·Σ_i Σ_j ‖l_{i,j} − c_j‖²`
pub fn compactness_loss(batch: &[LatentBank], centers: &LatentCenters) -> Result<f64> {
    if batch.is_empty() {
        return contract("compactness_loss: empty batch");
    }
    let mut total = 0.0;
    for bank in batch {
        check_bank(bank, &centers.centers)?;
        total += sq_dist(bank.features.data(), centers.centers.data());
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`compactness_loss`] with respect to one sample's bank:
/// `(2/N)(l_{i,j} − c_j)`. Centers get none.
pub fn compactness_grad(bank: &LatentBank, centers: &LatentCenters, batch_len: usize) -> DenseMatrix {
    let mut g = bank.features.clone();
    g.add_scaled(&centers.centers, -1.0);
    g.scale(2.0 / batch_len as f64);
    g
}
