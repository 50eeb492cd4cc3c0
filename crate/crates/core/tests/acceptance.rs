//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! Run with `cargo test --release --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fdrl::checkpoint::Checkpoint;
use fdrl::data::{self, generate, FeatureDataset, SynthOptions, SynthSpec};
use fdrl::fdn::{compactness_loss, LatentBank, LatentCenters};
use fdrl::gradcheck::{self, GradCheckConfig, LossTerm};
use fdrl::inspect::balance_distance;
use fdrl::inter_rm::{relation_weights, MessageBank};
use fdrl::intra_rm::{balance_loss, BatchWeightStats};
use fdrl::losses::{losses_from_forward, softmax};
use fdrl::model::{forward_batch, CenterBank, ExecMode, HyperParams, ModelParams};
use fdrl::numerics::{DenseMatrix, SeededRng};
use fdrl::trainer::{mean_intra_weights, Schedule, Trainer};

struct Outcome {
    passed: bool,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome {
        passed: true,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome {
        passed: false,
        detail: detail.into(),
    }
}

fn verdict(ok: bool, detail: String) -> Outcome {
    Outcome { passed: ok, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- gradients

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let report = match gradcheck::run(&GradCheckConfig::default(), 20, 2024, &LossTerm::ALL, None) {
        Ok(r) => r,
        Err(e) => return fail(e.to_string()),
    };
    let elapsed = start.elapsed();
    let worst = report.worst.iter().map(|w| w.2).fold(0.0, f64::max);
    let ok = report.passed() && elapsed < Duration::from_secs(60);
    let mut detail = format!(
        "20 instances x {} terms, worst rel err {worst:.2e} (< 1e-4), {}",
        LossTerm::ALL.len(),
        secs(elapsed)
    );
    if !report.passed() {
        let groups: Vec<&str> = report.failing_groups().iter().map(|g| g.name()).collect();
        detail.push_str(&format!(", failing {}", groups.join(",")));
    }
    verdict(ok, detail)
}

// ------------------------------------------------------------------ forward

/// Straight transcription of the head with nested loops over plain vectors.
struct NaiveOut {
    latent: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    messages: Vec<Vec<f64>>,
    omega: Vec<Vec<f64>>,
    y: Vec<f64>,
    logits: Vec<f64>,
}

fn naive_forward(p: &ModelParams, x: &[f64], delta: f64) -> NaiveOut {
    let (m, d, pin, k) = p.dims();
    let relu = |v: f64| if v > 0.0 { v } else { 0.0 };
    let mut latent = vec![vec![0.0; d]; m];
    let mut alpha = vec![0.0; m];
    let mut f = vec![vec![0.0; d]; m];
    let mut g = vec![vec![0.0; d]; m];
    for j in 0..m {
        for c in 0..d {
            let mut z = 0.0;
            for i in 0..pin {
                z += x[i] * p.w_d[j].get(i, c);
            }
            latent[j][c] = relu(z);
        }
        for c in 0..d {
            let mut z = 0.0;
            for e in 0..d {
                z += latent[j][e] * p.w_s[j].get(e, c);
            }
            alpha[j] += 1.0 / (1.0 + (-z).exp());
        }
        for c in 0..d {
            f[j][c] = alpha[j] * latent[j][c];
        }
        for c in 0..d {
            let mut z = 0.0;
            for e in 0..d {
                z += f[j][e] * p.w_e[j].get(e, c);
            }
            g[j][c] = relu(z);
        }
    }
    let mut omega = vec![vec![0.0; m]; m];
    for a in 0..m {
        for b in 0..m {
            if a != b {
                let mut sq = 0.0;
                for c in 0..d {
                    sq += (g[a][c] - g[b][c]).powi(2);
                }
                omega[a][b] = sq.sqrt().tanh();
            }
        }
    }
    let mut y = vec![0.0; d];
    for j in 0..m {
        for c in 0..d {
            let mut fhat = 0.0;
            for b in 0..m {
                fhat += omega[j][b] * g[b][c];
            }
            y[c] += delta * f[j][c] + (1.0 - delta) * fhat;
        }
    }
    let mut logits = vec![0.0; k];
    for (o, out) in logits.iter_mut().enumerate() {
        for c in 0..d {
            *out += y[c] * p.w_cls.get(c, o);
        }
    }
    NaiveOut {
        latent,
        alpha,
        messages: g,
        omega,
        y,
        logits,
    }
}

fn max_scaled_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

fn small_hp(p: usize, d: usize, m: usize, k: usize) -> HyperParams {
    HyperParams {
        n_latent: m,
        latent_dim: d,
        input_dim: p,
        n_classes: k,
        ..HyperParams::standard(p, k)
    }
}

fn random_params(hp: &HyperParams, scale: f64, rng: &mut SeededRng) -> ModelParams {
    let mut p = ModelParams::zeros(hp.n_latent, hp.latent_dim, hp.input_dim, hp.n_classes);
    for w in p.matrices_mut() {
        w.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-scale, scale));
    }
    p
}

fn random_inputs(n: usize, p: usize, scale: f64, rng: &mut SeededRng) -> DenseMatrix {
    DenseMatrix::from_vec(n, p, (0..n * p).map(|_| rng.uniform(0.0, scale)).collect()).unwrap()
}

fn forward_oracle() -> Outcome {
    let mut rng = SeededRng::new(99);
    let mut worst = 0.0f64;
    for inst in 0..100 {
        let mut hp = small_hp(16, 8, 3, 4);
        hp.delta = [0.5, 0.0, 1.0, 0.3][inst % 4];
        let params = random_params(&hp, 0.5, &mut rng);
        let x = random_inputs(1, 16, 1.0, &mut rng);
        let fwd = match forward_batch(&params, &x, &hp, ExecMode::Sequential) {
            Ok(f) => f,
            Err(e) => return fail(e.to_string()),
        };
        let naive = naive_forward(&params, x.row(0), hp.delta);
        let errs = [
            max_scaled_diff(
                (0..3).flat_map(|j| fwd.latent[j].row(0).to_vec()),
                naive.latent.concat(),
            ),
            max_scaled_diff(fwd.intra_w.row(0).to_vec(), naive.alpha.clone()),
            max_scaled_diff(
                (0..3).flat_map(|j| fwd.messages[j].row(0).to_vec()),
                naive.messages.concat(),
            ),
            max_scaled_diff(fwd.relations[0].data().to_vec(), naive.omega.concat()),
            max_scaled_diff(fwd.expression.row(0).to_vec(), naive.y.clone()),
            max_scaled_diff(fwd.logits.row(0).to_vec(), naive.logits.clone()),
        ];
        worst = errs.iter().copied().fold(worst, f64::max);
    }
    verdict(
        worst <= 1e-10,
        format!("100 instances (P=16, D=8, M=3), worst scaled diff {worst:.2e} (<= 1e-10)"),
    )
}

// --------------------------------------------------------------- invariants

fn structural_invariants() -> Outcome {
    let mut rng = SeededRng::new(7);
    let (p, d, m, k) = (16, 8, 4, 5);
    let hp = small_hp(p, d, m, k);
    let mut checked = 0usize;
    let mut problems: Vec<String> = Vec::new();
    for round in 0..20 {
        // parameter and input scales span small, moderate and saturating regimes
        let w_scale = [0.05, 0.3, 1.0, 3.0][round % 4];
        let x_scale = [0.1, 1.0, 10.0][round % 3];
        let params = random_params(&hp, w_scale, &mut rng);
        let x = random_inputs(50, p, x_scale, &mut rng);
        let labels: Vec<usize> = (0..50).map(|_| rng.below(k)).collect();
        let mut centers = CenterBank::new(&hp);
        for v in centers.latent.centers.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        for v in centers.class.centers.data_mut() {
            *v = rng.uniform(0.0, d as f64);
        }
        let fwd = forward_batch(&params, &x, &hp, ExecMode::Sequential).unwrap();
        for i in 0..50 {
            let om = &fwd.relations[i];
            for a in 0..m {
                if om.get(a, a) != 0.0 {
                    problems.push(format!("nonzero diagonal at round {round} sample {i}"));
                }
                for b in 0..m {
                    let w = om.get(a, b);
                    if w != om.get(b, a) {
                        problems.push(format!("asymmetric omega at round {round} sample {i}"));
                    }
                    if !(0.0..1.0).contains(&w) {
                        problems.push(format!("omega {w} outside [0,1)"));
                    }
                }
            }
            for j in 0..m {
                if fwd.latent[j].row(i).iter().any(|&v| v < 0.0) {
                    problems.push("negative latent feature".into());
                }
                if fwd.messages[j].row(i).iter().any(|&v| v < 0.0) {
                    problems.push("negative message".into());
                }
                let a = fwd.intra_w.get(i, j);
                if !(a >= 0.0 && a < d as f64) {
                    problems.push(format!("Intra-W {a} outside [0, D)"));
                }
            }
            let s: f64 = softmax(fwd.logits.row(i)).iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                problems.push(format!("softmax sums to {s}"));
            }
            checked += 1;
        }
        let l = losses_from_forward(&fwd, &labels, &centers, &hp).unwrap();
        for (name, v) in [
            ("L_cls", l.cls),
            ("L_C", l.compact),
            ("L_B", l.balance),
            ("L_D", l.distribution),
        ] {
            if !(v >= 0.0) {
                problems.push(format!("{name} = {v}"));
            }
        }
    }
    problems.dedup();
    if problems.is_empty() {
        pass(format!("{checked} inputs, all invariants hold"))
    } else {
        fail(format!("{} violations, first: {}", problems.len(), problems[0]))
    }
}

fn trivial_cases() -> Outcome {
    let mut rng = SeededRng::new(3);
    let mut hp = small_hp(12, 6, 4, 3);
    hp.delta = 1.0;
    let params = random_params(&hp, 0.4, &mut rng);
    let x = random_inputs(10, 12, 1.0, &mut rng);
    let fwd = forward_batch(&params, &x, &hp, ExecMode::Sequential).unwrap();
    let mut delta_one = true;
    for i in 0..10 {
        for c in 0..6 {
            let mut s = 0.0;
            for j in 0..4 {
                s += fwd.intra_aware[j].get(i, c);
            }
            delta_one &= s == fwd.expression.get(i, c);
        }
    }

    let same = MessageBank {
        messages: DenseMatrix::from_rows(&vec![vec![0.3, 1.7, 0.0, 2.5]; 5]).unwrap(),
    };
    let zero_omega = relation_weights(&same).weights.data().iter().all(|&w| w == 0.0);

    let m = 9;
    let uniform = BatchWeightStats::from_mean(vec![1.0 / m as f64; m]);
    let zero_balance = balance_loss(&uniform) == 0.0;

    let bank = LatentBank {
        features: DenseMatrix::from_rows(&[vec![0.5, 1.25, 0.0], vec![2.0, 0.1, 3.3]]).unwrap(),
    };
    let mut centers = LatentCenters::new(2, 3, 0.5);
    centers.centers = bank.features.clone();
    let zero_compact = compactness_loss(&[bank.clone(), bank], &centers).unwrap() == 0.0;

    let ok = delta_one && zero_omega && zero_balance && zero_compact;
    verdict(
        ok,
        format!(
            "delta=1 sum {delta_one}, identical messages {zero_omega}, uniform L_B {zero_balance}, centered L_C {zero_compact}"
        ),
    )
}

// ---------------------------------------------------------------- training

struct SynthRun {
    test_accuracy: f64,
    balance: f64,
    elapsed: Duration,
}

fn synthetic_split() -> (FeatureDataset, FeatureDataset) {
    let spec = SynthSpec::random(&SynthOptions {
        n_classes: 7,
        n_actions: 9,
        dim: 512,
        samples_per_class: 400,
        seed: 0,
        ..SynthOptions::default()
    })
    .unwrap();
    generate(&spec).unwrap().split_per_class(300)
}

fn train_synthetic(train: &FeatureDataset, test: &FeatureDataset, lambda2: f64) -> fdrl::Result<SynthRun> {
    let start = Instant::now();
    let hp = HyperParams {
        lambda2,
        ..HyperParams::standard(512, 7)
    };
    let mut t = Trainer::new(hp.clone(), Schedule::default(), 0, ExecMode::Parallel)?;
    t.fit(train)?;
    let test_accuracy = t.evaluate(test)?.accuracy;
    let w = mean_intra_weights(&t.params, train, &hp, ExecMode::Parallel)?;
    Ok(SynthRun {
        test_accuracy,
        balance: balance_distance(&w),
        elapsed: start.elapsed(),
    })
}

// ---------------------------------------------------------------------- CLI

fn fdrl(args: &[&str], dir: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fdrl"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "fdrl {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

const SMALL_RUN: [&str; 8] = [
    "--set",
    "latent_dim=16",
    "--batch-size",
    "16",
    "--epochs",
    "3",
    "--set",
    "base_lr=0.001",
];

fn small_data(dir: &Path) -> Result<(), String> {
    fdrl(
        &[
            "synth",
            "--out",
            "train.csv",
            "--test-out",
            "test.csv",
            "--train-per-class",
            "12",
            "--per-class",
            "16",
            "--dim",
            "48",
            "--seed",
            "5",
        ],
        dir,
    )
    .map(|_| ())
}

fn ablation_harness(dir: &Path) -> Outcome {
    let grids: [(&str, usize); 4] = [("m", 4), ("lambda1", 5), ("lambda2", 5), ("lambda3", 5)];
    let mut summary = Vec::new();
    for (param, expected) in grids {
        let out = format!("sweep_{param}.csv");
        let mut args = vec!["sweep", "--train", "train.csv", "--test", "test.csv", "--param", param, "--out", &out];
        args.extend(SMALL_RUN);
        if let Err(e) = fdrl(&args, dir) {
            return fail(e);
        }
        let text = std::fs::read_to_string(dir.join(&out)).unwrap_or_default();
        let rows = text.lines().count().saturating_sub(1);
        if rows != expected {
            return fail(format!("{param}: {rows} rows, expected {expected}"));
        }
        summary.push(format!("{param}:{rows}"));
    }
    pass(format!("sweep rows {}", summary.join(" ")))
}

fn determinism(dir: &Path) -> Outcome {
    let mut artifacts = Vec::new();
    for run in ["a", "b"] {
        let ck = format!("run_{run}.fdrm");
        let log = format!("run_{run}.csv");
        let mut args = vec![
            "train",
            "--train",
            "train.csv",
            "--seed",
            "7",
            "--threads",
            "1",
            "--checkpoint",
            &ck,
            "--log",
            &log,
        ];
        args.extend(SMALL_RUN);
        if let Err(e) = fdrl(&args, dir) {
            return fail(e);
        }
        let read = |p: &str| std::fs::read(dir.join(p)).unwrap_or_default();
        artifacts.push((read(&ck), read(&log)));
    }
    let same_ckpt = !artifacts[0].0.is_empty() && artifacts[0].0 == artifacts[1].0;
    let same_log = !artifacts[0].1.is_empty() && artifacts[0].1 == artifacts[1].1;
    verdict(
        same_ckpt && same_log,
        format!("checkpoints identical {same_ckpt}, logs identical {same_log}"),
    )
}

fn format_round_trips(dir: &Path) -> Outcome {
    let spec = SynthSpec::random(&SynthOptions {
        n_classes: 4,
        n_actions: 5,
        dim: 20,
        samples_per_class: 9,
        seed: 31,
        ..SynthOptions::default()
    })
    .unwrap();
    let d = generate(&spec).unwrap();

    let csv_path = dir.join("rt.csv");
    data::save_csv(&d, &csv_path).unwrap();
    let csv_exact = data::load_csv(&csv_path, 4).map(|back| back == d).unwrap_or(false);

    let bin_path = dir.join("rt.bin");
    data::save_bin(&d, &bin_path).unwrap();
    let bin_exact = data::load_bin(&bin_path)
        .map(|back| {
            back.labels == d.labels
                && back
                    .features
                    .data()
                    .iter()
                    .zip(d.features.data())
                    .all(|(&b, &a)| b == a as f32 as f64)
        })
        .unwrap_or(false);

    let hp = small_hp(20, 6, 3, 4);
    let mut t = Trainer::new(
        hp.clone(),
        Schedule {
            total_epochs: 1,
            decay_epochs: vec![],
            batch_size: 8,
            ..Schedule::default()
        },
        5,
        ExecMode::Sequential,
    )
    .unwrap();
    t.train_epoch(&d).unwrap();
    let ck_path = dir.join("rt.fdrm");
    let ck = Checkpoint::from_trainer(&t);
    ck.save(&ck_path).unwrap();
    let first = std::fs::read(&ck_path).unwrap();
    let reloaded = Checkpoint::load(&ck_path).unwrap();
    reloaded.save(&ck_path).unwrap();
    let idempotent = reloaded == ck && std::fs::read(&ck_path).unwrap() == first;
    let mismatch_rejected = reloaded
        .check_against(&HyperParams {
            input_dim: 21,
            ..hp.clone()
        })
        .is_err()
        && reloaded.check_against(&small_hp(20, 7, 3, 4)).is_err()
        && reloaded.check_against(&hp).is_ok();

    verdict(
        csv_exact && bin_exact && idempotent && mismatch_rejected,
        format!(
            "csv exact {csv_exact}, bin f32-exact {bin_exact}, checkpoint idempotent {idempotent}, mismatch rejected {mismatch_rejected}"
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    report("gradient oracle", gradient_oracle());
    report("forward oracle", forward_oracle());
    report("structural invariants", structural_invariants());
    report("trivial cases", trivial_cases());

    let (train, test) = synthetic_split();
    match train_synthetic(&train, &test, 1.0) {
        Ok(with_balance) => {
            report(
                "synthetic end-to-end",
                verdict(
                    with_balance.test_accuracy >= 0.90 && with_balance.elapsed < Duration::from_secs(600),
                    format!(
                        "test accuracy {:.4} (>= 0.90), {}",
                        with_balance.test_accuracy,
                        secs(with_balance.elapsed)
                    ),
                ),
            );
            match train_synthetic(&train, &test, 0.0) {
                Ok(without) => report(
                    "balance-loss effect",
                    verdict(
                        with_balance.balance < without.balance,
                        format!(
                            "L1 distance to uniform {:.4} with lambda2=1 vs {:.4} with lambda2=0",
                            with_balance.balance, without.balance
                        ),
                    ),
                ),
                Err(e) => report("balance-loss effect", fail(e.to_string())),
            }
        }
        Err(e) => {
            report("synthetic end-to-end", fail(e.to_string()));
            report("balance-loss effect", fail("reference run failed"));
        }
    }

    let dir = tempfile::tempdir().expect("temporary directory");
    match small_data(dir.path()) {
        Ok(()) => {
            report("ablation harness", ablation_harness(dir.path()));
            report("determinism", determinism(dir.path()));
        }
        Err(e) => {
            report("ablation harness", fail(e.clone()));
            report("determinism", fail(e));
        }
    }
    report("format round-trips", format_round_trips(dir.path()));

    let failed = results.iter().filter(|(_, o)| !o.passed).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
