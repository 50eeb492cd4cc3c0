//! Central finite-difference check of the analytic gradients on small random
//! instances, per parameter group and per loss term.

use std::fmt;

use crate::error::Result;
use crate::losses::{backward, batch_loss};
use crate::model::{forward_batch, CenterBank, ExecMode, HyperParams, ModelParams, ParamGroup};
use crate::numerics::{finite_diff_grad, sq_dist, DenseMatrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub n_latent: usize,
    pub n_classes: usize,
    pub batch: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Instances with a pre-activation, message distance or balance residual
    /// this close to a kink are redrawn.
    pub kink_margin: f64,
    /// Parameters are drawn uniformly from `±param_scale`.
    pub param_scale: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
    pub magnitude_floor: f64,
    /// λ used for the combined-objective check.
    pub joint_lambdas: [f64; 3],
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            latent_dim: 8,
            n_latent: 3,
            n_classes: 4,
            batch: 5,
            step: 5e-5,
            tolerance: 1e-4,
            kink_margin: 1e-3,
            param_scale: 0.1,
            magnitude_floor: 1e-6,
            joint_lambdas: [1e-4, 1.0, 1e-4],
        }
    }
}

/// Which objective a check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossTerm {
    Classification,
    Compactness,
    Balance,
    Distribution,
    /// The full objective with `joint_lambdas`.
    Joint,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::Classification,
        LossTerm::Compactness,
        LossTerm::Balance,
        LossTerm::Distribution,
        LossTerm::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Classification => "L_cls",
            LossTerm::Compactness => "L_C",
            LossTerm::Balance => "L_B",
            LossTerm::Distribution => "L_D",
            LossTerm::Joint => "L",
        }
    }

    fn weights(self, joint: [f64; 3]) -> (f64, [f64; 3]) {
        match self {
            LossTerm::Classification => (1.0, [0.0; 3]),
            LossTerm::Compactness => (0.0, [1.0, 0.0, 0.0]),
            LossTerm::Balance => (0.0, [0.0, 1.0, 0.0]),
            LossTerm::Distribution => (0.0, [0.0, 0.0, 1.0]),
            LossTerm::Joint => (1.0, joint),
        }
    }
}

/// Deliberate gradient corruption, used as a negative control for the checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of every analytic `W_s` gradient.
    NegateWs,
}

#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub hp: HyperParams,
    pub params: ModelParams,
    pub x: DenseMatrix,
    pub labels: Vec<usize>,
    pub centers: CenterBank,
}

impl GradCheckInstance {
    /// Draws instances from `rng` until one is clear of every kink.
    pub fn sample(cfg: &GradCheckConfig, rng: &mut SeededRng) -> Result<Self> {
        loop {
            let inst = Self::draw(cfg, rng)?;
            if inst.clear_of_kinks(cfg.kink_margin)? {
                return Ok(inst);
            }
        }
    }

    fn draw(cfg: &GradCheckConfig, rng: &mut SeededRng) -> Result<Self> {
        let hp = HyperParams {
            n_latent: cfg.n_latent,
            latent_dim: cfg.latent_dim,
            input_dim: cfg.input_dim,
            n_classes: cfg.n_classes,
            ..HyperParams::standard(cfg.input_dim, cfg.n_classes)
        };
        let s = cfg.param_scale;
        let mut params = ModelParams::zeros(cfg.n_latent, cfg.latent_dim, cfg.input_dim, cfg.n_classes);
        for m in params.matrices_mut() {
            m.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-s, s));
        }
        let x = DenseMatrix::from_vec(
            cfg.batch,
            cfg.input_dim,
            (0..cfg.batch * cfg.input_dim).map(|_| rng.uniform(0.0, 1.0)).collect(),
        )?;
        let labels = (0..cfg.batch).map(|_| rng.below(cfg.n_classes)).collect();
        let mut centers = CenterBank::new(&hp);
        centers
            .latent
            .centers
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.uniform(0.0, 0.2));
        let half = cfg.latent_dim as f64 / 2.0;
        centers
            .class
            .centers
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.uniform(half - 0.5, half + 0.5));
        Ok(Self {
            hp,
            params,
            x,
            labels,
            centers,
        })
    }

    fn clear_of_kinks(&self, margin: f64) -> Result<bool> {
        let fwd = forward_batch(&self.params, &self.x, &self.hp, ExecMode::Sequential)?;
        let m = self.hp.n_latent;
        for j in 0..m {
            let z_d = self.x.matmul(&self.params.w_d[j]);
            let z_e = fwd.intra_aware[j].matmul(&self.params.w_e[j]);
            if z_d.data().iter().chain(z_e.data()).any(|z| z.abs() < margin) {
                return Ok(false);
            }
        }
        for i in 0..self.x.rows() {
            for j in 0..m {
                for k in (j + 1)..m {
                    let dist = sq_dist(fwd.messages[j].row(i), fwd.messages[k].row(i)).sqrt();
                    if dist < margin {
                        return Ok(false);
                    }
                }
            }
        }
        let n = self.x.rows() as f64;
        let u = 1.0 / m as f64;
        for j in 0..m {
            let mean: f64 = (0..self.x.rows()).map(|i| fwd.intra_w.get(i, j)).sum::<f64>() / n;
            if (mean - u).abs() < margin {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn hp_for(&self, term: LossTerm, joint: [f64; 3]) -> HyperParams {
        let (cls_weight, [l1, l2, l3]) = term.weights(joint);
        HyperParams {
            cls_weight,
            lambda1: l1,
            lambda2: l2,
            lambda3: l3,
            ..self.hp.clone()
        }
    }

    /// Maximum relative error per parameter group for one objective.
    pub fn check(&self, cfg: &GradCheckConfig, term: LossTerm, fault: Option<Fault>) -> Result<Vec<(ParamGroup, f64)>> {
        let hp = self.hp_for(term, cfg.joint_lambdas);
        let mut analytic = backward(
            &self.params,
            &self.x,
            &self.labels,
            &self.centers,
            &hp,
            ExecMode::Sequential,
        )?
        .grads;
        if fault == Some(Fault::NegateWs) {
            for m in &mut analytic.w_s {
                m.scale(-1.0);
            }
        }

        let mut out = Vec::with_capacity(4);
        for group in ParamGroup::ALL {
            let theta = self.params.group_flat(group);
            let mut probe = self.params.clone();
            let numeric = finite_diff_grad(
                |t| {
                    probe.set_group_flat(group, t);
                    batch_loss(&probe, &self.x, &self.labels, &self.centers, &hp)
                        .map(|l| l.total)
                        .unwrap_or(f64::NAN)
                },
                &theta,
                cfg.step,
            )?;
            let worst = analytic
                .group_flat(group)
                .iter()
                .zip(&numeric)
                .map(|(&a, &n)| relative_error(a, n, cfg.magnitude_floor))
                .fold(0.0, f64::max);
            out.push((group, worst));
        }
        Ok(out)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub instances: usize,
    /// Worst error over all instances, per `(term, group)`.
    pub worst: Vec<(LossTerm, ParamGroup, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst.iter().all(|&(_, _, e)| e < self.tolerance)
    }

    pub fn failing_groups(&self) -> Vec<ParamGroup> {
        let mut groups: Vec<ParamGroup> = Vec::new();
        for &(_, g, e) in &self.worst {
            if !(e < self.tolerance) && !groups.contains(&g) {
                groups.push(g);
            }
        }
        groups
    }

    pub fn worst_for_group(&self, group: ParamGroup) -> f64 {
        self.worst
            .iter()
            .filter(|(_, g, _)| *g == group)
            .map(|&(_, _, e)| e)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradient check: {} instances, tolerance {:e}", self.instances, self.tolerance)?;
        for &(term, group, err) in &self.worst {
            let verdict = if err < self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "  {:<5} {:<6} max rel err {:.3e}  {verdict}", term.name(), group.name(), err)?;
        }
        for group in ParamGroup::ALL {
            writeln!(f, "  group {:<6} worst {:.3e}", group.name(), self.worst_for_group(group))?;
        }
        Ok(())
    }
}

pub fn run(
    cfg: &GradCheckConfig,
    instances: usize,
    seed: u64,
    terms: &[LossTerm],
    fault: Option<Fault>,
) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let mut worst: Vec<(LossTerm, ParamGroup, f64)> = terms
        .iter()
        .flat_map(|&t| ParamGroup::ALL.into_iter().map(move |g| (t, g, 0.0)))
        .collect();
    for _ in 0..instances {
        let inst = GradCheckInstance::sample(cfg, &mut rng.fork())?;
        for &term in terms {
            for (group, err) in inst.check(cfg, term, fault)? {
                let slot = worst
                    .iter_mut()
                    .find(|(t, g, _)| *t == term && *g == group)
                    .expect("slot exists for every term and group");
                slot.2 = slot.2.max(err);
            }
        }
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        instances,
        worst,
    })
}
