//! Intra-feature relation modeling: sigmoid gates per latent feature, their L1
//! norms as scalar importance weights (Intra-Ws), the distribution and balance
//! regularizers on those weights, and intra-aware feature scaling.

use crate::error::{contract, Result};
use crate::fdn::LatentBank;
use crate::numerics::{linear_forward, sigmoid, sq_dist, DenseMatrix};

/// `M × D`, entries in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraGateBank {
    pub gates: DenseMatrix,
}

/// One Intra-W per latent feature, each in `[0, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraWeightVector(pub Vec<f64>);

/// `M × D`; `f_j = α_j · l_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraAwareBank {
    pub features: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters {
    /// `K × M`
    pub centers: DenseMatrix,
    pub update_rate: f64,
}

impl ClassCenters {
    pub fn new(n_classes: usize, n_latent: usize, update_rate: f64) -> Self {
        Self {
            centers: DenseMatrix::zeros(n_classes, n_latent),
            update_rate,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.centers.rows()
    }

    /// Moves each class present in the batch toward that class's mean Intra-W
    /// vector by `γ`. Classes absent from the batch are left alone.
    pub fn update(&mut self, batch: &[IntraWeightVector], labels: &[usize]) -> Result<()> {
        let rows: Vec<Vec<f64>> = batch.iter().map(|w| w.0.clone()).collect();
        if rows.is_empty() {
            return contract("update_class_centers: empty batch");
        }
        self.update_rows(&DenseMatrix::from_rows(&rows)?, labels)
    }

    /// Same as [`ClassCenters::update`] with the batch stored as `N × M` rows.
    pub fn update_rows(&mut self, weights: &DenseMatrix, labels: &[usize]) -> Result<()> {
        if weights.rows() == 0 {
            return contract("update_class_centers: empty batch");
        }
        if weights.rows() != labels.len() {
            return contract("update_class_centers: labels and weights differ in length");
        }
        if weights.cols() != self.centers.cols() {
            return contract("update_class_centers: weight length does not match centers");
        }
        let (k, m) = self.centers.shape();
        let mut sums = DenseMatrix::zeros(k, m);
        let mut counts = vec![0usize; k];
        for (i, &label) in labels.iter().enumerate() {
            if label >= k {
                return contract(format!("label {label} out of range for {k} classes"));
            }
            counts[label] += 1;
            for (s, w) in sums.row_mut(label).iter_mut().zip(weights.row(i)) {
                *s += w;
            }
        }
        let rate = self.update_rate;
        for (class, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let inv = 1.0 / count as f64;
            let mean: Vec<f64> = sums.row(class).iter().map(|s| s * inv).collect();
            for (c, mu) in self.centers.row_mut(class).iter_mut().zip(mean) {
                *c -= rate * (*c - mu);
            }
        }
        Ok(())
    }
}

/// Batch mean Intra-W vector and the uniform target `[1/M, …, 1/M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchWeightStats {
    pub mean_weights: Vec<f64>,
    pub uniform_target: Vec<f64>,
}

impl BatchWeightStats {
    pub fn from_batch(batch: &[IntraWeightVector]) -> Result<Self> {
        let Some(first) = batch.first() else {
            return contract("batch weight stats: empty batch");
        };
        let m = first.0.len();
        let mut mean = vec![0.0; m];
        for w in batch {
            if w.0.len() != m {
                return contract("batch weight stats: ragged Intra-W vectors");
            }
            for (acc, v) in mean.iter_mut().zip(&w.0) {
                *acc += v;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        Ok(Self::from_mean(mean))
    }

    pub fn from_mean(mean_weights: Vec<f64>) -> Self {
        let m = mean_weights.len();
        Self {
            uniform_target: vec![1.0 / m as f64; m],
            mean_weights,
        }
    }
}

/// `α_j = sigmoid(W_{s_j}ᵀ l_j)`; each `W_{s_j}` is `D × D`.
pub fn gate(latent: &LatentBank, w_s: &[DenseMatrix]) -> Result<IntraGateBank> {
    if w_s.len() != latent.n_latent() {
        return contract(format!(
            "gate: {} gate matrices for {} latent features",
            w_s.len(),
            latent.n_latent()
        ));
    }
    let mut gates = DenseMatrix::zeros(latent.n_latent(), latent.dim());
    for (j, w) in w_s.iter().enumerate() {
        if w.cols() != latent.dim() {
            return contract("gate: output dimension differs from latent dimension");
        }
        let z = linear_forward(w, latent.latent(j))?;
        for (dst, v) in gates.row_mut(j).iter_mut().zip(z) {
            *dst = sigmoid(v);
        }
    }
    Ok(IntraGateBank { gates })
}

/// L1 norm of each gate vector. Gates are positive, so this is a plain sum.
pub fn intra_weights(gates: &IntraGateBank) -> IntraWeightVector {
    IntraWeightVector(
        (0..gates.gates.rows())
            .map(|j| gates.gates.row(j).iter().map(|v| v.abs()).sum())
            .collect(),
    )
}

/// `(1/N)·Σ_i ‖w_i − w_{k_i}‖²`
pub fn distribution_loss(
    batch: &[IntraWeightVector],
    labels: &[usize],
    centers: &ClassCenters,
) -> Result<f64> {
    if batch.is_empty() {
        return contract("distribution_loss: empty batch");
    }
    if batch.len() != labels.len() {
        return contract("distribution_loss: labels and weights differ in length");
    }
    let k = centers.n_classes();
    let mut total = 0.0;
    for (w, &label) in batch.iter().zip(labels) {
        if label >= k {
            return contract(format!("label {label} out of range for {k} classes"));
        }
        if w.0.len() != centers.centers.cols() {
            return contract("distribution_loss: Intra-W length does not match centers");
        }
        total += sq_dist(&w.0, centers.centers.row(label));
    }
    Ok(total / batch.len() as f64)
}

/// `‖w̄ − w_u‖₁`
pub fn balance_loss(stats: &BatchWeightStats) -> f64 {
    stats
        .mean_weights
        .iter()
        .zip(&stats.uniform_target)
        .map(|(m, u)| (m - u).abs())
        .sum()
}

/// Subgradient of [`balance_loss`] with respect to one sample's Intra-Ws in a
/// batch of `batch_len`: `sign(w̄_j − 1/M) / N`, with `sign(0) = 0`.
pub fn balance_grad(stats: &BatchWeightStats, batch_len: usize) -> Vec<f64> {
    let inv = 1.0 / batch_len as f64;
    stats
        .mean_weights
        .iter()
        .zip(&stats.uniform_target)
        .map(|(m, u)| sign(m - u) * inv)
        .collect()
}

#[inline]
pub(crate) fn sign(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `f_j = α_j · l_j`
pub fn scale_features(latent: &LatentBank, weights: &IntraWeightVector) -> Result<IntraAwareBank> {
    if weights.0.len() != latent.n_latent() {
        return contract("scale_features: weight count differs from latent count");
    }
    let mut features = latent.features.clone();
    for (j, &a) in weights.0.iter().enumerate() {
        features.row_mut(j).iter_mut().for_each(|v| *v *= a);
    }
    Ok(IntraAwareBank { features })
}
