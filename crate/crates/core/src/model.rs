//! Parameters, hyper-parameters and the batched forward pass of the head.
//!
//! The per-sample operations in [`crate::fdn`], [`crate::intra_rm`] and
//! [`crate::inter_rm`] define the maths; this module runs the same maths on a
//! whole batch at once, one `N × D` matrix per latent branch, so the linear
//! maps become matrix products.

use rayon::prelude::*;

use crate::error::{contract, Result};
use crate::fdn::{self, LatentCenters, DEFAULT_CENTER_RATE};
use crate::inter_rm::{self, edge_weight};
use crate::intra_rm::{self, ClassCenters};
use crate::numerics::{init_params, sigmoid, sq_dist, DenseMatrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Weight on the classification term; `1.0` in normal training. Gradient
    /// checks set it to zero to isolate a regularizer.
    pub cls_weight: f64,
    pub delta: f64,
    pub n_latent: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub n_classes: usize,
    pub center_rate: f64,
}

impl HyperParams {
    /// λ = (1e-4, 1.0, 1e-4), δ = 0.5, M = 9, D = 128.
    pub fn standard(input_dim: usize, n_classes: usize) -> Self {
        Self {
            lambda1: 1e-4,
            lambda2: 1.0,
            lambda3: 1e-4,
            cls_weight: 1.0,
            delta: 0.5,
            n_latent: 9,
            latent_dim: 128,
            input_dim,
            n_classes,
            center_rate: DEFAULT_CENTER_RATE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("cls_weight", self.cls_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return contract(format!("{name} must be a finite value ≥ 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return contract(format!("delta must lie in [0, 1], got {}", self.delta));
        }
        if !(self.center_rate > 0.0 && self.center_rate <= 1.0) {
            return contract(format!("center rate must lie in (0, 1], got {}", self.center_rate));
        }
        for (name, v) in [
            ("n_latent", self.n_latent),
            ("latent_dim", self.latent_dim),
            ("input_dim", self.input_dim),
            ("n_classes", self.n_classes),
        ] {
            if v == 0 {
                return contract(format!("{name} must be ≥ 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    /// Single-threaded.
    #[default]
    Sequential,
    /// Branches and samples on the rayon pool. Work is split per latent
    /// branch and per sample with no cross-thread reductions, so results are
    /// bitwise identical to [`ExecMode::Sequential`].
    Parallel,
}

pub(crate) fn map_indices<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Wd,
    Ws,
    We,
    Wcls,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Wd, ParamGroup::Ws, ParamGroup::We, ParamGroup::Wcls];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Wd => "W_d",
            ParamGroup::Ws => "W_s",
            ParamGroup::We => "W_e",
            ParamGroup::Wcls => "W_cls",
        }
    }
}

/// Every trainable matrix of the head. Also used, zero-initialised, as the
/// gradient buffer and as Adam's moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `M` matrices, `P × D`
    pub w_d: Vec<DenseMatrix>,
    /// `M` matrices, `D × D`
    pub w_s: Vec<DenseMatrix>,
    /// `M` matrices, `D × D`
    pub w_e: Vec<DenseMatrix>,
    /// `D × K`
    pub w_cls: DenseMatrix,
}

impl ModelParams {
    pub fn init(hp: &HyperParams, rng: &mut SeededRng) -> Result<Self> {
        hp.validate()?;
        let (m, d, p, k) = (hp.n_latent, hp.latent_dim, hp.input_dim, hp.n_classes);
        let w_d = (0..m).map(|_| init_params(p, d, rng)).collect::<Result<_>>()?;
        let w_s = (0..m).map(|_| init_params(d, d, rng)).collect::<Result<_>>()?;
        let w_e = (0..m).map(|_| init_params(d, d, rng)).collect::<Result<_>>()?;
        let w_cls = init_params(d, k, rng)?;
        Ok(Self { w_d, w_s, w_e, w_cls })
    }

    pub fn zeros(m: usize, d: usize, p: usize, k: usize) -> Self {
        Self {
            w_d: vec![DenseMatrix::zeros(p, d); m],
            w_s: vec![DenseMatrix::zeros(d, d); m],
            w_e: vec![DenseMatrix::zeros(d, d); m],
            w_cls: DenseMatrix::zeros(d, k),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let (m, d, p, k) = self.dims();
        Self::zeros(m, d, p, k)
    }

    /// `(M, D, P, K)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let (d, k) = self.w_cls.shape();
        let p = self.w_d.first().map_or(0, DenseMatrix::rows);
        (self.w_d.len(), d, p, k)
    }

    pub fn check_against(&self, hp: &HyperParams) -> Result<()> {
        let dims = self.dims();
        let want = (hp.n_latent, hp.latent_dim, hp.input_dim, hp.n_classes);
        if dims != want {
            return contract(format!(
                "parameters have (M, D, P, K) = {dims:?}, hyper-parameters say {want:?}"
            ));
        }
        Ok(())
    }

    /// Matrices in storage order: all `W_d`, all `W_s`, all `W_e`, then `W_cls`.
    pub fn matrices(&self) -> impl Iterator<Item = &DenseMatrix> {
        self.w_d
            .iter()
            .chain(&self.w_s)
            .chain(&self.w_e)
            .chain(std::iter::once(&self.w_cls))
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut DenseMatrix> {
        self.w_d
            .iter_mut()
            .chain(self.w_s.iter_mut())
            .chain(self.w_e.iter_mut())
            .chain(std::iter::once(&mut self.w_cls))
    }

    pub fn group(&self, g: ParamGroup) -> Vec<&DenseMatrix> {
        match g {
            ParamGroup::Wd => self.w_d.iter().collect(),
            ParamGroup::Ws => self.w_s.iter().collect(),
            ParamGroup::We => self.w_e.iter().collect(),
            ParamGroup::Wcls => vec![&self.w_cls],
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> Vec<&mut DenseMatrix> {
        match g {
            ParamGroup::Wd => self.w_d.iter_mut().collect(),
            ParamGroup::Ws => self.w_s.iter_mut().collect(),
            ParamGroup::We => self.w_e.iter_mut().collect(),
            ParamGroup::Wcls => vec![&mut self.w_cls],
        }
    }

    pub fn group_flat(&self, g: ParamGroup) -> Vec<f64> {
        self.group(g).into_iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn set_group_flat(&mut self, g: ParamGroup, values: &[f64]) {
        let mut offset = 0;
        for m in self.group_mut(g) {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        debug_assert_eq!(offset, values.len());
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().all(DenseMatrix::is_finite)
    }
}

/// Rule-updated centers: one per latent feature and one Intra-W vector per class.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    pub latent: LatentCenters,
    pub class: ClassCenters,
}

impl CenterBank {
    pub fn new(hp: &HyperParams) -> Self {
        Self {
            latent: LatentCenters::new(hp.n_latent, hp.latent_dim, hp.center_rate),
            class: ClassCenters::new(hp.n_classes, hp.n_latent, hp.center_rate),
        }
    }

    pub fn set_rate(&mut self, rate: f64) {
        self.latent.update_rate = rate;
        self.class.update_rate = rate;
    }

    /// Applies both center rules with the features of one forward pass.
    pub fn update(&mut self, fwd: &BatchForward, labels: &[usize]) -> Result<()> {
        let n = fwd.batch_len();
        if n == 0 {
            return contract("center update: empty batch");
        }
        let (m, d) = self.latent.centers.shape();
        let mut means = DenseMatrix::zeros(m, d);
        for (j, l) in fwd.latent.iter().enumerate() {
            let row = means.row_mut(j);
            for i in 0..n {
                for (acc, v) in row.iter_mut().zip(l.row(i)) {
                    *acc += v;
                }
            }
            row.iter_mut().for_each(|v| *v /= n as f64);
        }
        self.latent.step_toward(&means);
        self.class.update_rows(&fwd.intra_w, labels)
    }
}

/// Every intermediate of a batched forward pass that the backward pass needs.
#[derive(Debug, Clone)]
pub struct BatchForward {
    /// Per branch, `N × D` latent features `l_{·,j}`.
    pub latent: Vec<DenseMatrix>,
    /// Per branch, `N × D` sigmoid gates.
    pub gates: Vec<DenseMatrix>,
    /// `N × M` Intra-W vectors.
    pub intra_w: DenseMatrix,
    /// Per branch, `N × D` intra-aware features.
    pub intra_aware: Vec<DenseMatrix>,
    /// Per branch, `N × D` relation messages.
    pub messages: Vec<DenseMatrix>,
    /// Per sample, `M × M` relation weights.
    pub relations: Vec<DenseMatrix>,
    /// Per sample, `M × M` distances `‖g_j − g_m‖`.
    pub distances: Vec<DenseMatrix>,
    /// Per branch, `N × D` inter-aware features.
    pub inter_aware: Vec<DenseMatrix>,
    /// `N × D` expression features.
    pub expression: DenseMatrix,
    /// `N × K`
    pub logits: DenseMatrix,
}

impl BatchForward {
    pub fn batch_len(&self) -> usize {
        self.logits.rows()
    }

    /// Latent bank of sample `i` as an `M × D` matrix.
    pub fn latent_bank(&self, i: usize) -> DenseMatrix {
        stack_rows(&self.latent, i)
    }

    pub fn messages_of(&self, i: usize) -> DenseMatrix {
        stack_rows(&self.messages, i)
    }
}

fn stack_rows(branches: &[DenseMatrix], i: usize) -> DenseMatrix {
    let d = branches.first().map_or(0, DenseMatrix::cols);
    let mut out = DenseMatrix::zeros(branches.len(), d);
    for (j, b) in branches.iter().enumerate() {
        out.row_mut(j).copy_from_slice(b.row(i));
    }
    out
}

/// Forward pass for a batch `x: N × P`.
pub fn forward_batch(
    params: &ModelParams,
    x: &DenseMatrix,
    hp: &HyperParams,
    mode: ExecMode,
) -> Result<BatchForward> {
    params.check_against(hp)?;
    if x.cols() != hp.input_dim {
        return contract(format!(
            "batch has {} features per row, model expects {}",
            x.cols(),
            hp.input_dim
        ));
    }
    if x.rows() == 0 {
        return contract("forward: empty batch");
    }
    let n = x.rows();
    let m = hp.n_latent;
    let d = hp.latent_dim;

    let branches = map_indices(mode, m, |j| {
        let latent = x.matmul(&params.w_d[j]).map(|v| v.max(0.0));
        let gates = latent.matmul(&params.w_s[j]).map(sigmoid);
        let alpha: Vec<f64> = (0..n).map(|i| gates.row(i).iter().sum()).collect();
        let mut intra_aware = latent.clone();
        for (i, &a) in alpha.iter().enumerate() {
            intra_aware.row_mut(i).iter_mut().for_each(|v| *v *= a);
        }
        let messages = intra_aware.matmul(&params.w_e[j]).map(|v| v.max(0.0));
        (latent, gates, alpha, intra_aware, messages)
    });

    let mut latent = Vec::with_capacity(m);
    let mut gates = Vec::with_capacity(m);
    let mut intra_aware = Vec::with_capacity(m);
    let mut messages = Vec::with_capacity(m);
    let mut intra_w = DenseMatrix::zeros(n, m);
    for (j, (l, g, alpha, f, msg)) in branches.into_iter().enumerate() {
        for (i, a) in alpha.into_iter().enumerate() {
            intra_w.set(i, j, a);
        }
        latent.push(l);
        gates.push(g);
        intra_aware.push(f);
        messages.push(msg);
    }

    let per_sample = map_indices(mode, n, |i| {
        let mut omega = DenseMatrix::zeros(m, m);
        let mut dists = DenseMatrix::zeros(m, m);
        for j in 0..m {
            for k in (j + 1)..m {
                let dist = sq_dist(messages[j].row(i), messages[k].row(i)).sqrt();
                let w = edge_weight(dist);
                omega.set(j, k, w);
                omega.set(k, j, w);
                dists.set(j, k, dist);
                dists.set(k, j, dist);
            }
        }
        let mut f_hat = DenseMatrix::zeros(m, d);
        for j in 0..m {
            let row = f_hat.row_mut(j);
            for k in 0..m {
                let w = omega.get(j, k);
                if w == 0.0 {
                    continue;
                }
                for (acc, v) in row.iter_mut().zip(messages[k].row(i)) {
                    *acc += w * v;
                }
            }
        }
        (omega, dists, f_hat)
    });

    let mut relations = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    let mut inter_aware = vec![DenseMatrix::zeros(n, d); m];
    for (i, (omega, dist, f_hat)) in per_sample.into_iter().enumerate() {
        for (j, branch) in inter_aware.iter_mut().enumerate() {
            branch.row_mut(i).copy_from_slice(f_hat.row(j));
        }
        relations.push(omega);
        distances.push(dist);
    }

    let mut expression = DenseMatrix::zeros(n, d);
    for j in 0..m {
        expression.add_scaled(&intra_aware[j], hp.delta);
        expression.add_scaled(&inter_aware[j], 1.0 - hp.delta);
    }
    let logits = expression.matmul(&params.w_cls);

    Ok(BatchForward {
        latent,
        gates,
        intra_w,
        intra_aware,
        messages,
        relations,
        distances,
        inter_aware,
        expression,
        logits,
    })
}

/// Forward pass of one sample built from the per-sample operations.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub latent: fdn::LatentBank,
    pub intra_w: intra_rm::IntraWeightVector,
    pub intra_aware: intra_rm::IntraAwareBank,
    pub messages: inter_rm::MessageBank,
    pub relations: inter_rm::RelationWeightMatrix,
    pub expression: inter_rm::ExpressionFeature,
    pub logits: Vec<f64>,
}

pub fn forward_sample(params: &ModelParams, x: &[f64], hp: &HyperParams) -> Result<SampleForward> {
    params.check_against(hp)?;
    let latent = fdn::decompose(x, &params.w_d)?;
    let gates = intra_rm::gate(&latent, &params.w_s)?;
    let intra_w = intra_rm::intra_weights(&gates);
    let intra_aware = intra_rm::scale_features(&latent, &intra_w)?;
    let messages = inter_rm::encode_messages(&intra_aware, &params.w_e)?;
    let relations = inter_rm::relation_weights(&messages);
    let f_hat = inter_rm::aggregate(&messages, &relations)?;
    let y_bank = inter_rm::mix(&intra_aware, &f_hat, hp.delta)?;
    let expression = inter_rm::reconstruct(&y_bank)?;
    let logits = crate::losses::epn_logits(&expression, &params.w_cls)?;
    Ok(SampleForward {
        latent,
        intra_w,
        intra_aware,
        messages,
        relations,
        expression,
        logits,
    })
}
