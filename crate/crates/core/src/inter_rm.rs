//! Inter-feature relation modeling: messages on a complete graph over the `M`
//! intra-aware features, tanh-of-distance edge weights, one round of
//! aggregation, δ-mixing and summation into the expression feature.

use crate::error::{contract, Result};
use crate::intra_rm::IntraAwareBank;
use crate::numerics::{linear_forward, DenseMatrix};

/// Largest `f64` below one. `tanh` rounds to exactly `1.0` for distances past
/// about 19, which would break the half-open `[0, 1)` range of edge weights.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Edge weight for a given distance.
#[inline]
pub fn edge_weight(distance: f64) -> f64 {
    distance.tanh().min(BELOW_ONE)
}

/// `M × D`; row `j` is message `g_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageBank {
    pub messages: DenseMatrix,
}

/// `M × M`, symmetric, zero diagonal, entries in `[0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationWeightMatrix {
    pub weights: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionFeature(pub Vec<f64>);

/// `g_j = relu(W_{e_j}ᵀ f_j)`
pub fn encode_messages(f: &IntraAwareBank, w_e: &[DenseMatrix]) -> Result<MessageBank> {
    let (m, d) = f.features.shape();
    if w_e.len() != m {
        return contract(format!("encode_messages: {} matrices for {m} features", w_e.len()));
    }
    let mut messages = DenseMatrix::zeros(m, d);
    for (j, w) in w_e.iter().enumerate() {
        if w.cols() != d {
            return contract("encode_messages: output dimension differs from feature dimension");
        }
        let z = linear_forward(w, f.features.row(j))?;
        for (dst, v) in messages.row_mut(j).iter_mut().zip(z) {
            *dst = v.max(0.0);
        }
    }
    Ok(MessageBank { messages })
}

/// Euclidean distance. Its gradient `(a − b)/‖a − b‖` is bounded, and at
/// coincident messages the zero subgradient is used.
#[inline]
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    crate::numerics::sq_dist(a, b).sqrt()
}

/// `ω(j, m) = tanh(dist(g_j, g_m))` off the diagonal, `0` on it.
pub fn relation_weights(g: &MessageBank) -> RelationWeightMatrix {
    let m = g.messages.rows();
    let mut weights = DenseMatrix::zeros(m, m);
    for j in 0..m {
        for k in (j + 1)..m {
            let w = edge_weight(distance(g.messages.row(j), g.messages.row(k)));
            weights.set(j, k, w);
            weights.set(k, j, w);
        }
    }
    RelationWeightMatrix { weights }
}

/// `f̂_j = Σ_m ω(j, m) · g_m`
pub fn aggregate(g: &MessageBank, omega: &RelationWeightMatrix) -> Result<DenseMatrix> {
    let (m, d) = g.messages.shape();
    if omega.weights.shape() != (m, m) {
        return contract("aggregate: relation matrix does not match message count");
    }
    let mut out = DenseMatrix::zeros(m, d);
    for j in 0..m {
        for k in 0..m {
            let w = omega.weights.get(j, k);
            if w == 0.0 {
                continue;
            }
            let src = g.messages.row(k).to_vec();
            for (dst, v) in out.row_mut(j).iter_mut().zip(src) {
                *dst += w * v;
            }
        }
    }
    Ok(out)
}

/// `y_j = δ·f_j + (1 − δ)·f̂_j`
pub fn mix(f: &IntraAwareBank, f_hat: &DenseMatrix, delta: f64) -> Result<DenseMatrix> {
    if !(0.0..=1.0).contains(&delta) {
        return contract(format!("mix: delta {delta} outside [0, 1]"));
    }
    if f.features.shape() != f_hat.shape() {
        return contract("mix: intra-aware and inter-aware banks differ in shape");
    }
    let mut y = f_hat.clone();
    y.scale(1.0 - delta);
    y.add_scaled(&f.features, delta);
    Ok(y)
}

/// `y = Σ_j y_j`
pub fn reconstruct(y_bank: &DenseMatrix) -> Result<ExpressionFeature> {
    if y_bank.rows() == 0 {
        return contract("reconstruct: empty bank");
    }
    let mut y = vec![0.0; y_bank.cols()];
    for j in 0..y_bank.rows() {
        for (acc, v) in y.iter_mut().zip(y_bank.row(j)) {
            *acc += v;
        }
    }
    Ok(ExpressionFeature(y))
}
