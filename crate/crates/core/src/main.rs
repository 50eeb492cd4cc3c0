use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fdrl::checkpoint::Checkpoint;
use fdrl::config::{RunConfig, CONFIG_ENV};
use fdrl::data::{self, FeatureDataset, SynthOptions, SynthSpec};
use fdrl::gradcheck::{self, Fault, GradCheckConfig, LossTerm};
use fdrl::inspect;
use fdrl::model::HyperParams;
use fdrl::sweep::{self, SweepParam};
use fdrl::trainer::{self, EvalReport};
use fdrl::{FdrlError, Result};

#[derive(Parser)]
#[command(name = "fdrl", version, about = "Train and inspect a feature-decomposition expression head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a feature table and write a checkpoint and per-epoch log.
    Train(RunArgs),
    /// Evaluate a checkpoint on a feature table.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Dataset to evaluate (defaults to the configured test, then train set).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<InjectedFault>,
    },
    /// Generate a synthetic feature table.
    Synth(SynthArgs),
    /// Export per-class Intra-W means, a PCA projection and relation weights.
    Inspect {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train once per value of one hyperparameter and write a summary CSV.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// m, lambda1, lambda2 or lambda3.
        #[arg(long)]
        param: String,
        /// Comma-separated values; defaults to the standard grid.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InjectedFault {
    WsSign,
}

/// Settings shared by every command. Precedence, lowest first: defaults,
/// config file, `--set`, dedicated flags.
#[derive(Args, Clone)]
struct RunArgs {
    /// Flat key=value config file (falls back to $FDRL_CONFIG).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write the effective configuration here.
    #[arg(long)]
    dump_config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// 1 = sequential, 0 = all cores.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    n_latent: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Class count for CSV datasets.
    #[arg(long)]
    classes: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let file = self
            .config
            .clone()
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        let mut cfg = match file {
            Some(p) => RunConfig::from_file(&p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        let mut flags: Vec<(&str, String)> = Vec::new();
        let paths = [
            ("train", &self.train),
            ("test", &self.test),
            ("checkpoint", &self.checkpoint),
            ("log", &self.log),
        ];
        for (k, v) in paths {
            if let Some(p) = v {
                flags.push((k, p.display().to_string()));
            }
        }
        let numbers = [
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("threads", self.threads.map(|v| v.to_string())),
            ("lambda1", self.lambda1.map(|v| v.to_string())),
            ("lambda2", self.lambda2.map(|v| v.to_string())),
            ("lambda3", self.lambda3.map(|v| v.to_string())),
            ("n_latent", self.n_latent.map(|v| v.to_string())),
            ("latent_dim", self.latent_dim.map(|v| v.to_string())),
            ("classes", self.classes.map(|v| v.to_string())),
        ];
        flags.extend(numbers.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        for (k, v) in flags {
            cfg.set(k, &v)?;
        }
        if cfg.threads != 1 {
            // a pool that is already built keeps its size
            let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
        }
        if let Some(p) = &self.dump_config {
            fs::write(p, cfg.dump())?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output path; `.bin` selects the binary format, anything else CSV.
    #[arg(long)]
    out: PathBuf,
    /// Split off everything past `--train-per-class` samples of each class into this file.
    #[arg(long, requires = "train_per_class")]
    test_out: Option<PathBuf>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long, default_value_t = 7)]
    classes: usize,
    #[arg(long, default_value_t = 9)]
    actions: usize,
    #[arg(long, default_value_t = 512)]
    dim: usize,
    #[arg(long, default_value_t = 400)]
    per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.3)]
    jitter: f64,
    /// Dominant actions per class.
    #[arg(long, default_value_t = 3)]
    active: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn save_any(data: &FeatureDataset, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == "bin") {
        data::save_bin(data, path)
    } else {
        data::save_csv(data, path)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| FdrlError::Config(format!("no {what} given (use --{what} or set {what}=...)")))
}

fn print_report(r: &EvalReport, names: &[String]) {
    println!("accuracy {:.4}", r.accuracy);
    for (name, acc) in names.iter().zip(&r.per_class_accuracy) {
        println!("  {name:<10} {acc:.4}");
    }
    println!("confusion (rows = true, columns = predicted):");
    for (name, row) in names.iter().zip(&r.confusion) {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
        println!("  {name:<10}{}", cells.join(""));
    }
}

fn write_report_csv(path: &Path, r: &EvalReport, names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["class".to_string(), "count".into(), "accuracy".into()];
    header.extend(names.iter().map(|n| format!("pred_{n}")));
    w.write_record(&header)?;
    for (k, name) in names.iter().enumerate() {
        let mut rec = vec![
            name.clone(),
            r.confusion[k].iter().sum::<usize>().to_string(),
            r.per_class_accuracy[k].to_string(),
        ];
        rec.extend(r.confusion[k].iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    let total: usize = r.confusion.iter().flatten().sum();
    let mut rec = vec!["all".to_string(), total.to_string(), r.accuracy.to_string()];
    rec.extend(names.iter().map(|_| String::new()));
    w.write_record(&rec)?;
    w.flush()?;
    Ok(())
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let train = data::load_any(required(&cfg.train, "train")?, cfg.classes)?;
    let test = cfg.test.as_deref().map(|p| data::load_any(p, cfg.classes)).transpose()?;
    let hp = cfg.hyper_params(train.dim(), train.n_classes())?;
    let mut t = cfg.trainer(hp.clone())?;
    println!(
        "training on {} samples (P={}, K={}), M={} D={}, {} epochs",
        train.len(),
        hp.input_dim,
        hp.n_classes,
        hp.n_latent,
        hp.latent_dim,
        t.schedule.total_epochs
    );

    let mut log = cfg.log.as_deref().map(csv::Writer::from_path).transpose()?;
    if let Some(w) = log.as_mut() {
        let mut header = vec![
            "epoch",
            "lr",
            "loss",
            "cls",
            "compact",
            "balance",
            "distribution",
            "running_accuracy",
            "train_accuracy",
        ];
        if test.is_some() {
            header.push("test_accuracy");
        }
        w.write_record(&header)?;
    }
    while t.epochs_done < t.schedule.total_epochs {
        let s = t.train_epoch(&train)?;
        let train_acc = t.evaluate(&train)?.accuracy;
        let test_acc = test.as_ref().map(|d| t.evaluate(d)).transpose()?.map(|r| r.accuracy);
        println!(
            "epoch {:>3}  lr {:.1e}  loss {:.4}  train acc {:.4}{}",
            s.epoch + 1,
            s.lr,
            s.loss.total,
            train_acc,
            test_acc.map(|a| format!("  test acc {a:.4}")).unwrap_or_default()
        );
        if let Some(w) = log.as_mut() {
            let mut rec = vec![
                (s.epoch + 1).to_string(),
                s.lr.to_string(),
                s.loss.total.to_string(),
                s.loss.cls.to_string(),
                s.loss.compact.to_string(),
                s.loss.balance.to_string(),
                s.loss.distribution.to_string(),
                s.running_accuracy.to_string(),
                train_acc.to_string(),
            ];
            if let Some(a) = test_acc {
                rec.push(a.to_string());
            }
            w.write_record(&rec)?;
            w.flush()?;
        }
    }

    let ckpt = required(&cfg.checkpoint, "checkpoint")?;
    Checkpoint::from_trainer(&t).save(ckpt)?;
    println!("checkpoint written to {}", ckpt.display());
    if let Some(test) = &test {
        let r = t.evaluate(test)?;
        print_report(&r, &test.class_names);
        if let Some(p) = &cfg.eval_csv {
            write_report_csv(p, &r, &test.class_names)?;
        }
    }
    Ok(())
}

/// Checkpoint plus a dataset, with the model shape taken from the checkpoint.
fn load_model(cfg: &RunConfig, data_arg: &Option<PathBuf>) -> Result<(Checkpoint, HyperParams, FeatureDataset)> {
    let ck = Checkpoint::load(required(&cfg.checkpoint, "checkpoint")?)?;
    let (m, d, p, k) = ck.dims();
    let path = data_arg
        .as_deref()
        .or(cfg.test.as_deref())
        .or(cfg.train.as_deref())
        .ok_or_else(|| FdrlError::Config("no dataset given (use --data, --test or --train)".into()))?;
    let data = data::load_any(path, k)?;
    if data.dim() != p || data.n_classes() != k {
        return Err(FdrlError::Format(format!(
            "checkpoint expects P={p} K={k}, dataset {} has P={} K={}",
            path.display(),
            data.dim(),
            data.n_classes()
        )));
    }
    let mut cfg = cfg.clone();
    cfg.n_latent = m;
    cfg.latent_dim = d;
    let hp = cfg.hyper_params(p, k)?;
    ck.check_against(&hp)?;
    Ok((ck, hp, data))
}

fn cmd_eval(args: &RunArgs, data_arg: &Option<PathBuf>) -> Result<()> {
    let cfg = args.resolve()?;
    let (ck, hp, data) = load_model(&cfg, data_arg)?;
    let r = trainer::evaluate(&ck.params, &data, &hp, cfg.mode())?;
    print_report(&r, &data.class_names);
    if let Some(p) = &cfg.eval_csv {
        write_report_csv(p, &r, &data.class_names)?;
    }
    Ok(())
}

fn cmd_inspect(args: &RunArgs, data_arg: &Option<PathBuf>) -> Result<()> {
    let cfg = args.resolve()?;
    let (ck, hp, data) = load_model(&cfg, data_arg)?;
    let mode = cfg.mode();
    if let Some(p) = &cfg.intra_w_csv {
        let means = inspect::class_mean_intra_weights(&ck.params, &data, &hp, mode)?;
        inspect::write_intra_w_csv(p, &means, &data.class_names)?;
        println!("per-class mean Intra-W written to {}", p.display());
    }
    if let Some(p) = &cfg.pca_csv {
        let y = inspect::expression_features(&ck.params, &data, &hp, mode)?;
        let proj = inspect::pca_2d(&y)?;
        inspect::write_projection_csv(p, &proj, &data.labels)?;
        println!(
            "PCA projection written to {} (variances {:.4e}, {:.4e})",
            p.display(),
            proj.variances[0],
            proj.variances[1]
        );
    }
    if let Some(p) = &cfg.relations_csv {
        inspect::write_relations_csv(p, &ck.params, &data, &hp, mode, cfg.relations_limit)?;
        println!("relation weights written to {}", p.display());
    }
    let w = trainer::mean_intra_weights(&ck.params, &data, &hp, mode)?;
    let shown: Vec<String> = w.iter().map(|v| format!("{v:.4}")).collect();
    println!("mean Intra-W [{}]", shown.join(", "));
    println!("L1 distance to uniform {:.6}", inspect::balance_distance(&w));
    Ok(())
}

fn cmd_gradcheck(args: &RunArgs, instances: usize, fault: Option<InjectedFault>) -> Result<bool> {
    let cfg = args.resolve()?;
    let gc = GradCheckConfig {
        joint_lambdas: [cfg.lambda1, cfg.lambda2, cfg.lambda3],
        ..GradCheckConfig::default()
    };
    let fault = fault.map(|InjectedFault::WsSign| Fault::NegateWs);
    let report = gradcheck::run(&gc, instances, cfg.seed, &LossTerm::ALL, fault)?;
    print!("{report}");
    if report.passed() {
        println!("PASS");
    } else {
        let names: Vec<&str> = report.failing_groups().iter().map(|g| g.name()).collect();
        println!("FAIL: {}", names.join(", "));
    }
    Ok(report.passed())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec::random(&SynthOptions {
        n_classes: a.classes,
        n_actions: a.actions,
        dim: a.dim,
        samples_per_class: a.per_class,
        noise_sigma: a.noise,
        jitter: a.jitter,
        active_actions: a.active,
        seed: a.seed,
    })
    .map_err(|e| FdrlError::Config(e.to_string()))?;
    let all = data::generate(&spec).map_err(|e| FdrlError::Config(e.to_string()))?;
    let mut outputs = vec![];
    match (a.train_per_class, &a.test_out) {
        (Some(n), Some(test_path)) => {
            let (train, test) = all.split_per_class(n);
            outputs.push((train, a.out.clone()));
            outputs.push((test, test_path.clone()));
        }
        (Some(n), None) => outputs.push((all.split_per_class(n).0, a.out.clone())),
        (None, _) => outputs.push((all, a.out.clone())),
    }
    for (d, path) in &outputs {
        save_any(d, path)?;
        let counts: Vec<String> = d
            .class_names
            .iter()
            .zip(d.class_counts())
            .map(|(n, c)| format!("{n}={c}"))
            .collect();
        println!("{}: {} samples, P={} [{}]", path.display(), d.len(), d.dim(), counts.join(" "));
    }
    Ok(())
}

fn cmd_sweep(args: &RunArgs, param: &str, values: &[f64], out: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let param: SweepParam = param.parse()?;
    let values = if values.is_empty() { param.default_grid() } else { values.to_vec() };
    let train = data::load_any(required(&cfg.train, "train")?, cfg.classes)?;
    let test = cfg.test.as_deref().map(|p| data::load_any(p, cfg.classes)).transpose()?;
    let rows = sweep::run_sweep(&cfg, param, &values, &train, test.as_ref())?;
    for r in &rows {
        println!(
            "{}={}  train acc {:.4}{}  balance {:.4}",
            param.key(),
            r.value,
            r.train_accuracy,
            r.test_accuracy.map(|a| format!("  test acc {a:.4}")).unwrap_or_default(),
            r.balance_distance
        );
    }
    sweep::write_sweep_csv(out, &rows)?;
    println!("{} rows written to {}", rows.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval { run, data } => cmd_eval(run, data).map(|_| true),
        Command::Gradcheck {
            run,
            instances,
            inject_fault,
        } => cmd_gradcheck(run, *instances, *inject_fault),
        Command::Synth(a) => cmd_synth(a).map(|_| true),
        Command::Inspect { run, data } => cmd_inspect(run, data).map(|_| true),
        Command::Sweep { run, param, values, out } => cmd_sweep(run, param, values, out).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                FdrlError::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
