//! Expression prediction (a bias-free linear classifier), cross-entropy, the
//! joint objective and the reverse pass through the whole head.

use crate::error::{contract, FdrlError, Result};
use crate::inter_rm::ExpressionFeature;
use crate::intra_rm::sign;
use crate::model::{
    forward_batch, map_indices, BatchForward, CenterBank, ExecMode, HyperParams, ModelParams,
    ParamGroup,
};
use crate::numerics::{linear_forward, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub cls: f64,
    pub compact: f64,
    pub balance: f64,
    pub distribution: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.cls, self.compact, self.balance, self.distribution, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// First non-finite component, named.
    fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("L_cls", self.cls),
            ("L_C", self.compact),
            ("L_B", self.balance),
            ("L_D", self.distribution),
            ("L", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `W_clsᵀ y`
pub fn epn_logits(y: &ExpressionFeature, w_cls: &DenseMatrix) -> Result<Vec<f64>> {
    linear_forward(w_cls, &y.0)
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `−log softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return contract(format!("label {label} out of range for {} classes", logits.len()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// `softmax(logits) − onehot(label)`
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= logits.len() {
        return contract(format!("label {label} out of range for {} classes", logits.len()));
    }
    let mut p = softmax(logits);
    p[label] -= 1.0;
    Ok(p)
}

/// `L = w·L_cls + λ1·L_C + λ2·L_B + λ3·L_D`, where `w` is `hp.cls_weight`.
pub fn joint_loss(cls: f64, compact: f64, balance: f64, distribution: f64, hp: &HyperParams) -> LossBreakdown {
    LossBreakdown {
        cls,
        compact,
        balance,
        distribution,
        total: hp.cls_weight * cls
            + hp.lambda1 * compact
            + hp.lambda2 * balance
            + hp.lambda3 * distribution,
    }
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return contract(format!("{} labels for a batch of {n}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return contract(format!("label {bad} out of range for {k} classes"));
    }
    Ok(())
}

fn check_centers(centers: &CenterBank, hp: &HyperParams) -> Result<()> {
    if centers.latent.centers.shape() != (hp.n_latent, hp.latent_dim)
        || centers.class.centers.shape() != (hp.n_classes, hp.n_latent)
    {
        return contract("center banks do not match the model dimensions");
    }
    Ok(())
}

/// The four loss terms of one forward pass.
pub fn losses_from_forward(
    fwd: &BatchForward,
    labels: &[usize],
    centers: &CenterBank,
    hp: &HyperParams,
) -> Result<LossBreakdown> {
    let n = fwd.batch_len();
    check_labels(labels, n, hp.n_classes)?;
    check_centers(centers, hp)?;
    let inv_n = 1.0 / n as f64;

    let mut cls = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        cls += cross_entropy(fwd.logits.row(i), label)?;
    }
    cls *= inv_n;

    let mut compact = 0.0;
    for (j, l) in fwd.latent.iter().enumerate() {
        let c = centers.latent.centers.row(j);
        for i in 0..n {
            compact += crate::numerics::sq_dist(l.row(i), c);
        }
    }
    compact *= inv_n;

    let mean = column_means(&fwd.intra_w);
    let u = 1.0 / hp.n_latent as f64;
    let balance: f64 = mean.iter().map(|w| (w - u).abs()).sum();

    let mut distribution = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        distribution += crate::numerics::sq_dist(fwd.intra_w.row(i), centers.class.centers.row(label));
    }
    distribution *= inv_n;

    Ok(joint_loss(cls, compact, balance, distribution, hp))
}

/// Forward pass plus losses, no gradients.
pub fn batch_loss(
    params: &ModelParams,
    x: &DenseMatrix,
    labels: &[usize],
    centers: &CenterBank,
    hp: &HyperParams,
) -> Result<LossBreakdown> {
    let fwd = forward_batch(params, x, hp, ExecMode::Sequential)?;
    losses_from_forward(&fwd, labels, centers, hp)
}

fn column_means(m: &DenseMatrix) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (acc, v) in mean.iter_mut().zip(m.row(i)) {
            *acc += v;
        }
    }
    let inv = 1.0 / m.rows() as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    mean
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub grads: ModelParams,
    pub loss: LossBreakdown,
    pub forward: BatchForward,
}

/// Gradient of the joint loss with respect to every parameter matrix, by
/// reverse accumulation through the whole head. Centers are constants here.
pub fn backward(
    params: &ModelParams,
    x: &DenseMatrix,
    labels: &[usize],
    centers: &CenterBank,
    hp: &HyperParams,
    mode: ExecMode,
) -> Result<BackwardOutput> {
    hp.validate()?;
    let fwd = forward_batch(params, x, hp, mode)?;
    let loss = losses_from_forward(&fwd, labels, centers, hp)?;
    if let Some(term) = loss.non_finite_term() {
        return Err(FdrlError::NonFinite {
            term: format!("loss {term}"),
            context: String::new(),
        });
    }
    let n = fwd.batch_len();
    let m = hp.n_latent;
    let d = hp.latent_dim;
    let inv_n = 1.0 / n as f64;
    let delta = hp.delta;

    // classifier
    let mut d_logits = DenseMatrix::zeros(n, hp.n_classes);
    for (i, &label) in labels.iter().enumerate() {
        let g = cross_entropy_grad(fwd.logits.row(i), label)?;
        for (dst, v) in d_logits.row_mut(i).iter_mut().zip(g) {
            *dst = hp.cls_weight * inv_n * v;
        }
    }
    let grad_cls = fwd.expression.t_matmul(&d_logits);
    // every importance-aware feature feeds the expression feature with weight one
    let d_expr = d_logits.matmul_t(&params.w_cls);

    // regularizers acting directly on the Intra-Ws
    let mean = column_means(&fwd.intra_w);
    let u = 1.0 / m as f64;
    let mut d_alpha = DenseMatrix::zeros(n, m);
    for i in 0..n {
        let center = centers.class.centers.row(labels[i]);
        for j in 0..m {
            let balance = hp.lambda2 * sign(mean[j] - u) * inv_n;
            let distribution = hp.lambda3 * 2.0 * inv_n * (fwd.intra_w.get(i, j) - center[j]);
            d_alpha.set(i, j, balance + distribution);
        }
    }

    // relation graph, per sample: messages receive gradient both as
    // aggregated values and through the edge weights
    let one_minus_delta = 1.0 - delta;
    let per_sample = map_indices(mode, n, |i| {
        let omega = &fwd.relations[i];
        let dists = &fwd.distances[i];
        let dy = d_expr.row(i);
        let mut d_msg = DenseMatrix::zeros(m, d);
        if one_minus_delta == 0.0 {
            return d_msg;
        }
        let proj: Vec<f64> = (0..m)
            .map(|k| crate::numerics::dot(dy, fwd.messages[k].row(i)))
            .collect();
        for k in 0..m {
            let col_sum: f64 = (0..m).map(|j| omega.get(j, k)).sum();
            let s = one_minus_delta * col_sum;
            for (dst, v) in d_msg.row_mut(k).iter_mut().zip(dy) {
                *dst += s * v;
            }
        }
        for j in 0..m {
            for k in (j + 1)..m {
                let dist = dists.get(j, k);
                if dist == 0.0 {
                    continue;
                }
                let w = omega.get(j, k);
                let d_w = one_minus_delta * (proj[k] + proj[j]);
                let d_dist = d_w * (1.0 - w * w) / dist;
                if d_dist == 0.0 {
                    continue;
                }
                let gj = fwd.messages[j].row(i);
                let gk = fwd.messages[k].row(i);
                let diff: Vec<f64> = gj.iter().zip(gk).map(|(a, b)| d_dist * (a - b)).collect();
                for (dst, v) in d_msg.row_mut(j).iter_mut().zip(&diff) {
                    *dst += v;
                }
                for (dst, v) in d_msg.row_mut(k).iter_mut().zip(&diff) {
                    *dst -= v;
                }
            }
        }
        d_msg
    });

    // per latent branch
    let branches = map_indices(mode, m, |j| {
        let latent = &fwd.latent[j];
        let gates = &fwd.gates[j];
        let f = &fwd.intra_aware[j];
        let g = &fwd.messages[j];

        let mut d_z_msg = DenseMatrix::zeros(n, d);
        for (i, d_msg) in per_sample.iter().enumerate() {
            for ((dst, &dv), &gv) in d_z_msg.row_mut(i).iter_mut().zip(d_msg.row(j)).zip(g.row(i)) {
                *dst = if gv > 0.0 { dv } else { 0.0 };
            }
        }
        let grad_e = f.t_matmul(&d_z_msg);
        let mut d_f = d_z_msg.matmul_t(&params.w_e[j]);
        d_f.add_scaled(&d_expr, delta);

        let mut d_gate_pre = DenseMatrix::zeros(n, d);
        let mut d_latent = DenseMatrix::zeros(n, d);
        for i in 0..n {
            let a = fwd.intra_w.get(i, j);
            let d_a = d_alpha.get(i, j) + crate::numerics::dot(d_f.row(i), latent.row(i));
            for (dst, &gate) in d_gate_pre.row_mut(i).iter_mut().zip(gates.row(i)) {
                *dst = d_a * gate * (1.0 - gate);
            }
            for (dst, &v) in d_latent.row_mut(i).iter_mut().zip(d_f.row(i)) {
                *dst = a * v;
            }
        }
        let grad_s = latent.t_matmul(&d_gate_pre);
        d_latent.add_scaled(&d_gate_pre.matmul_t(&params.w_s[j]), 1.0);

        let c = centers.latent.centers.row(j);
        let scale = hp.lambda1 * 2.0 * inv_n;
        for i in 0..n {
            for ((dst, &lv), &cv) in d_latent.row_mut(i).iter_mut().zip(latent.row(i)).zip(c) {
                *dst += scale * (lv - cv);
                if lv <= 0.0 {
                    *dst = 0.0;
                }
            }
        }
        let grad_d = x.t_matmul(&d_latent);
        (grad_d, grad_s, grad_e)
    });

    let mut grads = ModelParams {
        w_d: Vec::with_capacity(m),
        w_s: Vec::with_capacity(m),
        w_e: Vec::with_capacity(m),
        w_cls: grad_cls,
    };
    for (gd, gs, ge) in branches {
        grads.w_d.push(gd);
        grads.w_s.push(gs);
        grads.w_e.push(ge);
    }

    for group in ParamGroup::ALL {
        if grads.group(group).iter().any(|g| !g.is_finite()) {
            return Err(FdrlError::NonFinite {
                term: format!("gradient {}", group.name()),
                context: String::new(),
            });
        }
    }

    Ok(BackwardOutput {
        grads,
        loss,
        forward: fwd,
    })
}
