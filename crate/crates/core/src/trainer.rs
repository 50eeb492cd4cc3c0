//! Adam with a step-decay schedule, the epoch loop with center updates, and
//! evaluation.

use crate::data::FeatureDataset;
use crate::error::{contract, FdrlError, Result};
use crate::losses::{backward, LossBreakdown};
use crate::model::{forward_batch, CenterBank, ExecMode, HyperParams, ModelParams};
use crate::numerics::{DenseMatrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
}

impl AdamState {
    /// β1 = 0.5, β2 = 0.999, ε = 1e-8.
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step_count: 0,
            beta1: 0.5,
            beta2: 0.999,
            lr,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update of every parameter matrix.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState) -> Result<()> {
    if params.dims() != grads.dims() || params.dims() != state.first_moment.dims() {
        return contract("adam_step: gradient or moment shapes differ from parameters");
    }
    if !grads.is_finite() {
        return Err(FdrlError::NonFinite {
            term: "gradient passed to adam_step".into(),
            context: String::new(),
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps) = (state.lr, state.eps);

    let it = params
        .matrices_mut()
        .zip(grads.matrices())
        .zip(state.first_moment.matrices_mut().zip(state.second_moment.matrices_mut()));
    for ((p, g), (m, v)) in it {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    if !params.is_finite() {
        return Err(FdrlError::NonFinite {
            term: "parameters after adam_step".into(),
            context: String::new(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    /// Epoch indices from which another factor applies; a boundary `b`
    /// affects epochs `b, b+1, …`.
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
    pub total_epochs: usize,
    pub batch_size: usize,
}

impl Default for Schedule {
    /// lr 1e-4, ÷10 at epochs 10, 18, 25 and 32, 40 epochs, batches of 64.
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            decay_epochs: vec![10, 18, 25, 32],
            factor: 0.1,
            total_epochs: 40,
            batch_size: 64,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return contract("base learning rate must be positive");
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return contract("decay factor must lie in (0, 1]");
        }
        if self.total_epochs == 0 || self.batch_size == 0 {
            return contract("epochs and batch size must be ≥ 1");
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return contract("decay epochs must be strictly increasing");
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.total_epochs) {
            return contract("decay epochs must be below the total epoch count");
        }
        Ok(())
    }

    /// Drops decay boundaries at or past `total_epochs`; they never take effect.
    pub fn truncate_decays(&mut self) {
        let total = self.total_epochs;
        self.decay_epochs.retain(|&e| e < total);
    }
}

/// `base_lr · factor^(number of decay epochs ≤ epoch)`
pub fn lr_at(epoch: usize, s: &Schedule) -> Result<f64> {
    if epoch >= s.total_epochs {
        return contract(format!("epoch {epoch} outside schedule of {} epochs", s.total_epochs));
    }
    let passed = s.decay_epochs.iter().filter(|&&b| b <= epoch).count();
    Ok(s.base_lr * s.factor.powi(passed as i32))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub per_class_accuracy: Vec<f64>,
}

impl EvalReport {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], n_classes: usize) -> Self {
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        for (&p, &t) in predictions.iter().zip(labels) {
            confusion[t][p] += 1;
        }
        let total: usize = labels.len();
        let correct: usize = (0..n_classes).map(|k| confusion[k][k]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[k] as f64 / n as f64
                }
            })
            .collect();
        Self {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            confusion,
            per_class_accuracy,
        }
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = k;
        }
    }
    best
}

const EVAL_CHUNK: usize = 256;

/// Runs the forward pass over `data` in chunks and hands each chunk's forward
/// results to `visit` with the chunk's row indices.
pub fn for_each_chunk<F>(
    params: &ModelParams,
    data: &FeatureDataset,
    hp: &HyperParams,
    mode: ExecMode,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(&[usize], &crate::model::BatchForward) -> Result<()>,
{
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, _) = data.gather(chunk);
        let fwd = forward_batch(params, &x, hp, mode)?;
        visit(chunk, &fwd)?;
    }
    Ok(())
}

pub fn predict(params: &ModelParams, data: &FeatureDataset, hp: &HyperParams, mode: ExecMode) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for_each_chunk(params, data, hp, mode, |_, fwd| {
        out.extend((0..fwd.batch_len()).map(|i| argmax(fwd.logits.row(i))));
        Ok(())
    })?;
    Ok(out)
}

pub fn evaluate(params: &ModelParams, data: &FeatureDataset, hp: &HyperParams, mode: ExecMode) -> Result<EvalReport> {
    if data.is_empty() {
        return contract("evaluate: empty dataset");
    }
    if data.n_classes() != hp.n_classes {
        return contract(format!(
            "dataset has {} classes, model has {}",
            data.n_classes(),
            hp.n_classes
        ));
    }
    let preds = predict(params, data, hp, mode)?;
    Ok(EvalReport::from_predictions(&preds, &data.labels, hp.n_classes))
}

/// Mean Intra-W vector over a dataset.
pub fn mean_intra_weights(params: &ModelParams, data: &FeatureDataset, hp: &HyperParams, mode: ExecMode) -> Result<Vec<f64>> {
    if data.is_empty() {
        return contract("mean_intra_weights: empty dataset");
    }
    let mut sum = vec![0.0; hp.n_latent];
    for_each_chunk(params, data, hp, mode, |_, fwd| {
        for i in 0..fwd.batch_len() {
            for (s, v) in sum.iter_mut().zip(fwd.intra_w.row(i)) {
                *s += v;
            }
        }
        Ok(())
    })?;
    let inv = 1.0 / data.len() as f64;
    Ok(sum.into_iter().map(|s| s * inv).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean over the epoch's batches.
    pub loss: LossBreakdown,
    /// Accuracy of the pre-update predictions made during the epoch.
    pub running_accuracy: f64,
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub hp: HyperParams,
    pub schedule: Schedule,
    pub params: ModelParams,
    pub centers: CenterBank,
    pub adam: AdamState,
    pub rng: SeededRng,
    pub mode: ExecMode,
    pub epochs_done: usize,
}

impl Trainer {
    /// Fresh parameters from `seed`; the same generator then drives shuffling.
    pub fn new(hp: HyperParams, schedule: Schedule, seed: u64, mode: ExecMode) -> Result<Self> {
        hp.validate()?;
        schedule.validate()?;
        let mut rng = SeededRng::new(seed);
        let params = ModelParams::init(&hp, &mut rng)?;
        let centers = CenterBank::new(&hp);
        let adam = AdamState::new(&params, schedule.base_lr);
        Ok(Self {
            hp,
            schedule,
            params,
            centers,
            adam,
            rng,
            mode,
            epochs_done: 0,
        })
    }

    /// One pass over `data` in seeded-shuffled batches: forward and backward,
    /// Adam step, then both center updates from the same forward pass.
    pub fn train_epoch(&mut self, data: &FeatureDataset) -> Result<EpochSummary> {
        if data.is_empty() {
            return contract("train_epoch: empty dataset");
        }
        if data.dim() != self.hp.input_dim || data.n_classes() != self.hp.n_classes {
            return contract(format!(
                "dataset is P={} K={}, model expects P={} K={}",
                data.dim(),
                data.n_classes(),
                self.hp.input_dim,
                self.hp.n_classes
            ));
        }
        if self.schedule.batch_size > data.len() {
            return contract(format!(
                "batch size {} exceeds dataset size {}",
                self.schedule.batch_size,
                data.len()
            ));
        }
        let epoch = self.epochs_done;
        let lr = lr_at(epoch, &self.schedule)?;
        self.adam.lr = lr;

        let mut order: Vec<usize> = (0..data.len()).collect();
        self.rng.shuffle(&mut order);

        let mut acc = LossBreakdown::default();
        let mut correct = 0usize;
        for (b, batch) in order.chunks(self.schedule.batch_size).enumerate() {
            let (x, labels) = data.gather(batch);
            let out = backward(&self.params, &x, &labels, &self.centers, &self.hp, self.mode)
                .map_err(|e| e.at_batch(epoch, b))?;
            adam_step(&mut self.params, &out.grads, &mut self.adam).map_err(|e| e.at_batch(epoch, b))?;
            self.centers.update(&out.forward, &labels)?;

            let w = labels.len() as f64;
            acc.cls += w * out.loss.cls;
            acc.compact += w * out.loss.compact;
            acc.balance += w * out.loss.balance;
            acc.distribution += w * out.loss.distribution;
            acc.total += w * out.loss.total;
            correct += labels
                .iter()
                .enumerate()
                .filter(|&(i, &l)| argmax(out.forward.logits.row(i)) == l)
                .count();
        }
        let inv = 1.0 / data.len() as f64;
        let loss = LossBreakdown {
            cls: acc.cls * inv,
            compact: acc.compact * inv,
            balance: acc.balance * inv,
            distribution: acc.distribution * inv,
            total: acc.total * inv,
        };
        self.epochs_done += 1;
        Ok(EpochSummary {
            epoch,
            lr,
            loss,
            running_accuracy: correct as f64 * inv,
        })
    }

    /// Remaining epochs of the schedule.
    pub fn fit(&mut self, data: &FeatureDataset) -> Result<Vec<EpochSummary>> {
        let mut out = Vec::new();
        while self.epochs_done < self.schedule.total_epochs {
            out.push(self.train_epoch(data)?);
        }
        Ok(out)
    }

    pub fn evaluate(&self, data: &FeatureDataset) -> Result<EvalReport> {
        evaluate(&self.params, data, &self.hp, self.mode)
    }
}

/// `N × K` logits for a dataset, row order preserved.
pub fn logits(params: &ModelParams, data: &FeatureDataset, hp: &HyperParams, mode: ExecMode) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(data.len(), hp.n_classes);
    for_each_chunk(params, data, hp, mode, |rows, fwd| {
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(fwd.logits.row(r));
        }
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_class_names, generate, SynthOptions, SynthSpec};
    use proptest::prelude::*;

    #[test]
    fn lr_schedule_examples() {
        let s = Schedule::default();
        assert_eq!(lr_at(0, &s).unwrap(), 1e-4);
        assert!((lr_at(20, &s).unwrap() - 1e-6).abs() < 1e-20);
        assert!((lr_at(39, &s).unwrap() - 1e-8).abs() < 1e-22);
        assert!((lr_at(9, &s).unwrap() - 1e-4).abs() < 1e-20);
        assert!((lr_at(10, &s).unwrap() - 1e-5).abs() < 1e-20);
        assert!(lr_at(40, &s).is_err());
        let lrs: Vec<f64> = (0..40).map(|e| lr_at(e, &s).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::default().validate().is_ok());
        let mut s = Schedule {
            total_epochs: 5,
            ..Schedule::default()
        };
        assert!(s.validate().is_err());
        s.truncate_decays();
        assert!(s.validate().is_ok());
        assert!(s.decay_epochs.is_empty());
        let s = Schedule {
            decay_epochs: vec![3, 3],
            ..Schedule::default()
        };
        assert!(s.validate().is_err());
    }

    fn tiny_params() -> ModelParams {
        let hp = HyperParams {
            n_latent: 2,
            latent_dim: 3,
            input_dim: 4,
            n_classes: 2,
            ..HyperParams::standard(4, 2)
        };
        ModelParams::init(&hp, &mut SeededRng::new(1)).unwrap()
    }

    #[test]
    fn adam_zero_gradient() {
        let mut p = tiny_params();
        let before = p.clone();
        let zeros = p.zeros_like();
        let mut st = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &zeros, &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count, 1);

        // with prior momentum, moments decay geometrically
        st.first_moment.w_cls.fill(1.0);
        st.second_moment.w_cls.fill(1.0);
        adam_step(&mut p, &zeros, &mut st).unwrap();
        assert!(st.first_moment.w_cls.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(st.second_moment.w_cls.data().iter().all(|&v| (v - 0.999).abs() < 1e-15));
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        let mut p = tiny_params();
        let mut g = p.zeros_like();
        for m in g.matrices_mut() {
            m.fill(0.37);
        }
        let lr = 1e-3;
        let mut st = AdamState::new(&p, lr);
        for _ in 0..50 {
            let before = p.w_cls.get(0, 0);
            adam_step(&mut p, &g, &mut st).unwrap();
            let step = before - p.w_cls.get(0, 0);
            // m̂/√v̂ = 1 for a constant gradient, up to ε
            assert!((step - lr).abs() < lr * 1e-6, "step {step}");
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = tiny_params();
        let mut g = p.zeros_like();
        g.w_s[0].set(0, 0, f64::NAN);
        let mut st = AdamState::new(&p, 1e-3);
        assert!(matches!(adam_step(&mut p, &g, &mut st), Err(FdrlError::NonFinite { .. })));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        let shifted: Vec<f64> = [0.2, -1.0, 0.7].iter().map(|v| v + 1e3).collect();
        assert_eq!(argmax(&[0.2, -1.0, 0.7]), argmax(&shifted));
    }

    #[test]
    fn report_from_hand_built_logits() {
        // logits per sample -> argmax: [0.9,0.1]→0, [0.2,0.8]→1, [0.6,0.4]→0, [0.3,0.3]→0 (tie)
        let logits = [[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.3]];
        let labels = [0, 1, 1, 1];
        let preds: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
        let r = EvalReport::from_predictions(&preds, &labels, 2);
        assert_eq!(r.confusion, vec![vec![1, 0], vec![2, 1]]);
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.per_class_accuracy, vec![1.0, 1.0 / 3.0]);
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let labels: Vec<usize> = (0..70).map(|i| i % 7).collect();
        let r = EvalReport::from_predictions(&vec![3; 70], &labels, 7);
        assert!((r.accuracy - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 70);
    }

    fn toy() -> (FeatureDataset, HyperParams) {
        let spec = SynthSpec::random(&SynthOptions {
            n_classes: 3,
            n_actions: 4,
            dim: 16,
            samples_per_class: 20,
            noise_sigma: 0.0,
            jitter: 0.1,
            active_actions: 1,
            seed: 5,
        })
        .unwrap();
        let data = generate(&spec).unwrap();
        let hp = HyperParams {
            n_latent: 3,
            latent_dim: 8,
            input_dim: 16,
            n_classes: 3,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..HyperParams::standard(16, 3)
        };
        (data, hp)
    }

    #[test]
    fn separable_toy_data_is_learned() {
        let (data, hp) = toy();
        let schedule = Schedule {
            base_lr: 1e-2,
            batch_size: 8,
            ..Schedule::default()
        };
        let mut t = Trainer::new(hp, schedule, 3, ExecMode::Sequential).unwrap();
        t.fit(&data).unwrap();
        assert_eq!(t.evaluate(&data).unwrap().accuracy, 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let (data, hp) = toy();
        let schedule = Schedule {
            total_epochs: 3,
            decay_epochs: vec![1],
            batch_size: 7,
            ..Schedule::default()
        };
        let run = |mode| {
            let mut t = Trainer::new(hp.clone(), schedule.clone(), 11, mode).unwrap();
            let s = t.fit(&data).unwrap();
            (s, t.params, t.centers)
        };
        let a = run(ExecMode::Sequential);
        let b = run(ExecMode::Sequential);
        let c = run(ExecMode::Parallel);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        assert_eq!(a.1, c.1);
    }

    #[test]
    fn empty_and_oversized_batches_rejected() {
        let (data, hp) = toy();
        let mut t = Trainer::new(hp.clone(), Schedule::default(), 1, ExecMode::Sequential).unwrap();
        let empty = FeatureDataset::new(DenseMatrix::zeros(0, 16), vec![], default_class_names(3)).unwrap();
        assert!(t.train_epoch(&empty).is_err());
        assert!(t.train_epoch(&data).is_err()); // batch 64 > 60 samples
        assert!(evaluate(&t.params, &empty, &hp, ExecMode::Sequential).is_err());
    }

    #[test]
    fn evaluate_leaves_state_alone() {
        let (data, hp) = toy();
        let t = Trainer::new(hp, Schedule::default(), 2, ExecMode::Sequential).unwrap();
        let before = (t.params.clone(), t.centers.clone());
        let r1 = t.evaluate(&data).unwrap();
        let r2 = t.evaluate(&data).unwrap();
        assert_eq!(r1, r2);
        assert_eq!((t.params.clone(), t.centers.clone()), before);
        assert_eq!(r1.confusion.iter().flatten().sum::<usize>(), data.len());
    }

    #[test]
    fn last_partial_batch_is_kept() {
        let (data, hp) = toy();
        let schedule = Schedule {
            total_epochs: 1,
            decay_epochs: vec![],
            batch_size: 25, // 60 = 25 + 25 + 10
            ..Schedule::default()
        };
        let mut t = Trainer::new(hp, schedule, 4, ExecMode::Sequential).unwrap();
        t.train_epoch(&data).unwrap();
        assert_eq!(t.adam.step_count, 3);
    }

    proptest! {
        #[test]
        fn argmax_ignores_constant_shift(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..10),
            shift in -1e3f64..1e3,
        ) {
            // shifting can merge near-ties through rounding; only compare clear winners
            let best = argmax(&logits);
            let clear = logits.iter().enumerate().all(|(k, &v)| k == best || logits[best] - v > 1e-9);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            prop_assume!(clear);
            prop_assert_eq!(argmax(&shifted), best);
        }

        #[test]
        fn lr_never_increases(
            mut decays in proptest::collection::btree_set(1usize..60, 0..6),
            total in 1usize..60,
        ) {
            let mut s = Schedule {
                decay_epochs: std::mem::take(&mut decays).into_iter().collect(),
                total_epochs: total,
                ..Schedule::default()
            };
            s.truncate_decays();
            prop_assert!(s.validate().is_ok());
            let lrs: Vec<f64> = (0..total).map(|e| lr_at(e, &s).unwrap()).collect();
            prop_assert!(lrs.windows(2).all(|w| w[0] >= w[1]));
            prop_assert_eq!(lrs[0], s.base_lr);
        }
    }
}
