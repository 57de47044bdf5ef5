//! `eignn` command-line experiments.

mod args;
mod record;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use eignn::attack::{AttackConfig, AttackError, FGSM_EPSILONS, PGD_ITERATIONS, PGD_PRESETS};
use eignn::experiments::{self, BenchOptions, Check, ExperimentError};
use eignn::graph::{self, ChainsSpec, DatasetFiles, GraphError, SplitSpec, CHAINS_SPLIT};
use eignn::model::{EignnModel, ModelError};
use eignn::trainer::{self, CacheStatus, Optimizer, Solver, TrainConfig, TrainError};

use args::{parse_gamma, parse_positive, IntList, List, PairList, SizeList};
use record::ExperimentRecord;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config values. Exit code 1.
    Validation(String),
    /// Anything that went wrong while running. Exit code 2.
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::InvalidSpec(_) | GraphError::InfeasibleSplit { .. } => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidHyperparameter(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => CliError::Validation(e.to_string()),
            TrainError::Model(m) => m.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::InvalidConfig(_) => CliError::Validation(e.to_string()),
            AttackError::Train(t) => t.into(),
            AttackError::Model(m) => m.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Graph(g) => g.into(),
            ExperimentError::Model(m) => m.into(),
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Attack(a) => a.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "eignn", version, about = "Infinite-depth implicit graph network experiments")]
pub struct Cli {
    /// Flat key=value file of flags for the subcommand; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a chains dataset to a directory.
    #[command(args_override_self = true)]
    GenerateChains(GenerateArgs),
    /// Train one model on a dataset directory.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Train on chains of several lengths and report mean test accuracy.
    #[command(args_override_self = true)]
    SweepLengths(SweepArgs),
    /// Check the closed form against the oracle solvers on random instances.
    #[command(args_override_self = true)]
    Verify(VerifyArgs),
    /// Time training epochs of the three solvers.
    #[command(args_override_self = true)]
    Bench(BenchArgs),
    /// Run feature perturbation attacks against a trained model.
    #[command(args_override_self = true)]
    Attack(AttackArgs),
}

#[derive(Args, Debug)]
struct ChainsArgs {
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Chains per class.
    #[arg(long, default_value_t = 20)]
    chains: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 100)]
    dim: usize,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    chains: ChainsArgs,
    #[arg(long)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Preset {
    /// Plain gradient descent, lr 0.5, no bias.
    Gd,
    /// Adam, lr 0.01, with an output bias.
    Chains,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum OptimizerArg {
    Gd,
    Adam,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum SolverArg {
    ClosedForm,
    FixedPoint,
    FiniteDepth,
}

/// Hyperparameters; unset flags keep the preset's value.
#[derive(Args, Debug)]
struct HyperArgs {
    #[arg(long, value_enum, default_value_t = Preset::Chains)]
    preset: Preset,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = parse_positive)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, value_parser = parse_gamma)]
    gamma: Option<f64>,
    #[arg(long, value_parser = parse_positive)]
    eps_f: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Per-class readout bias.
    #[arg(long)]
    bias: Option<bool>,
    #[arg(long, value_enum, default_value_t = SolverArg::ClosedForm)]
    solver: SolverArg,
    /// Fixed-point stopping tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
    /// Unrolled layers for the finite-depth solver.
    #[arg(long)]
    depth: Option<usize>,
}

impl HyperArgs {
    fn config(&self, seed: u64) -> Result<TrainConfig> {
        let mut c = match self.preset {
            Preset::Gd => TrainConfig::default(),
            Preset::Chains => TrainConfig::chains(),
        };
        c.seed = seed;
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = self.gamma {
            c.gamma = v;
        }
        if let Some(v) = self.eps_f {
            c.eps_f = v;
        }
        if let Some(v) = self.patience {
            c.patience = v;
        }
        if let Some(o) = self.optimizer {
            c.optimizer = match o {
                OptimizerArg::Gd => Optimizer::GradientDescent,
                OptimizerArg::Adam => Optimizer::adam(),
            };
        }
        if let Some(b) = self.bias {
            c.output_bias = b;
        }
        c.solver = match self.solver {
            SolverArg::ClosedForm => Solver::ClosedForm,
            SolverArg::FixedPoint => Solver::FixedPoint {
                tol: self.tol,
                max_iters: self.max_iters,
            },
            SolverArg::FiniteDepth => Solver::FiniteDepth {
                depth: self
                    .depth
                    .ok_or_else(|| CliError::Validation("--solver finite-depth needs --depth".into()))?,
            },
        };
        c.validate()?;
        Ok(c)
    }
}

fn config_json(c: &TrainConfig) -> serde_json::Value {
    json!({
        "epochs": c.epochs,
        "learning_rate": c.learning_rate,
        "weight_decay": c.weight_decay,
        "gamma": c.gamma,
        "eps_f": c.eps_f,
        "patience": c.patience,
        "optimizer": c.optimizer.name(),
        "output_bias": c.output_bias,
        "solver": c.solver.name(),
    })
}

/// Where a dataset directory and its split come from.
#[derive(Args, Debug)]
struct DataArgs {
    /// Directory holding edges.txt, features.txt, labels.txt.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// `ratio:TRAIN,VAL,TEST` or a split file. Defaults to DIR/split.txt
    /// when present, else the chains ratios.
    #[arg(long)]
    split: Option<String>,
    /// Class count; inferred from the labels when absent.
    #[arg(long)]
    classes: Option<usize>,
    /// Eigendecomposition cache file, reused when it matches the graph.
    #[arg(long, value_name = "FILE")]
    cache: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self, seed: u64) -> Result<graph::Graph> {
        if !self.data.is_dir() {
            return Err(CliError::Runtime(format!("dataset directory {} not found", self.data.display())));
        }
        let split = match &self.split {
            Some(s) => SplitSpec::parse(s, seed).map_err(CliError::Validation)?,
            None if self.data.join("split.txt").exists() => SplitSpec::File(self.data.join("split.txt")),
            None => SplitSpec::Ratio {
                train: CHAINS_SPLIT.0,
                val: CHAINS_SPLIT.1,
                test: CHAINS_SPLIT.2,
                seed,
            },
        };
        Ok(graph::load_graph(&DatasetFiles::in_dir(&self.data), &split, self.classes)?)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for train.csv, model.eigm and train.json.
    #[arg(long, value_name = "DIR", default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    chains: ChainsArgs,
    /// Comma list or start:stop:step.
    #[arg(long, default_value = "10,50,100,200")]
    lengths: IntList,
    #[arg(long, default_value = "0,1,2,3,4")]
    seeds: List<u64>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long, value_name = "FILE", default_value = "sweep.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    instances: usize,
    /// Also compare gradients against the Kronecker oracle and finite differences.
    #[arg(long)]
    grad_check: bool,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Sizes as LENGTHxCHAINS.
    #[arg(long, default_value = "100x20,200x20")]
    configs: SizeList,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Timed closed-form epochs.
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Timed epochs for the fixed-point and finite-depth solvers.
    #[arg(long, default_value_t = 2)]
    iterative_epochs: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
    #[arg(long, value_name = "FILE", default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Uniform noise half-widths.
    #[arg(long, default_value = "0.01,0.1")]
    alphas: List<f64>,
    /// FGSM budgets.
    #[arg(long)]
    fgsm: Option<List<f64>>,
    /// PGD budgets and step sizes as EPS:STEP.
    #[arg(long)]
    pgd: Option<PairList>,
    #[arg(long, default_value_t = PGD_ITERATIONS)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "FILE", default_value = "attack.csv")]
    out: PathBuf,
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_csv(path: &Path, csv: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, csv)?;
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let spec = ChainsSpec::new(a.chains.classes, a.chains.chains, a.length)
        .with_feature_dim(a.chains.dim)
        .with_seed(a.seed);
    let g = graph::generate_chains(&spec)?;
    graph::write_dataset(&g, &a.out)?;
    let (tr, va, te) = g.masks().counts();
    println!(
        "wrote {} nodes, {} edges, {} classes to {} (train {tr}, val {va}, test {te})",
        g.num_nodes(),
        g.edges().len(),
        g.num_classes(),
        a.out.display()
    );
    Ok(())
}

fn log_cache(status: CacheStatus, path: Option<&Path>, ms: f64) {
    let where_ = path.map(|p| p.display().to_string()).unwrap_or_default();
    match status {
        CacheStatus::Hit => println!("cache hit: {where_} ({ms:.1} ms)"),
        CacheStatus::Built => println!("cache built: {where_} ({ms:.1} ms)"),
        CacheStatus::Rebuilt => println!("cache stale, rebuilt: {where_} ({ms:.1} ms)"),
        CacheStatus::Computed => println!("eigendecomposition: {ms:.1} ms"),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config = TrainConfig {
        cache_path: a.data.cache.clone(),
        ..a.hyper.config(a.seed)?
    };
    let g = a.data.load(a.seed)?;
    let (model, report) = trainer::train(&g, &config)?;
    log_cache(report.cache_status, config.cache_path.as_deref(), report.preprocessing_ms);

    fs::create_dir_all(&a.out)?;
    report.write_csv(&a.out.join("train.csv"))?;
    model.write_to(&a.out.join("model.eigm"))?;
    let test_acc = report.test_acc_at_best_val;
    ExperimentRecord::new(
        "train",
        a.seed,
        json!({ "data": a.data.data, "nodes": g.num_nodes(), "classes": g.num_classes(), "config": config_json(&config) }),
        json!({
            "best_val_acc": report.best_val_acc,
            "best_epoch": report.best_epoch,
            "test_acc": test_acc,
            "epochs_run": report.epochs.len(),
            "stopped_early": report.stopped_early,
            "preprocessing_ms": report.preprocessing_ms,
            "mean_epoch_ms": report.mean_epoch_ms(),
        }),
    )
    .write(&a.out.join("train.json"))?;

    println!(
        "{} epochs ({}), best val {:.4} at epoch {}, {:.2} ms/epoch",
        report.epochs.len(),
        if report.stopped_early { "early stop" } else { "full" },
        report.best_val_acc,
        report.best_epoch,
        report.mean_epoch_ms()
    );
    println!("wrote {}", a.out.display());
    match test_acc {
        Some(acc) => println!("test accuracy: {acc:.4}"),
        None => println!("test accuracy: n/a (no test nodes)"),
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let config = a.hyper.config(0)?;
    let (rows, runs) = experiments::sweep_lengths(
        a.chains.classes,
        a.chains.chains,
        a.chains.dim,
        &a.lengths.0,
        &a.seeds.0,
        &config,
        |r| {
            println!(
                "length {:>4} seed {:>3}: test {:.4} ({} epochs, {:.2} ms/epoch)",
                r.length, r.seed, r.test_acc, r.epochs_run, r.mean_epoch_ms
            )
        },
    )?;
    write_csv(&a.out, &experiments::sweep_csv(&rows))?;
    ExperimentRecord::new(
        "sweep-lengths",
        a.seeds.0.first().copied().unwrap_or(0),
        json!({
            "classes": a.chains.classes,
            "chains_per_class": a.chains.chains,
            "feature_dim": a.chains.dim,
            "lengths": a.lengths.0,
            "seeds": a.seeds.0,
            "config": config_json(&config),
        }),
        json!({
            "rows": rows.iter().map(|r| json!({"length": r.length, "mean_acc": r.mean_acc, "std_acc": r.std_acc})).collect::<Vec<_>>(),
            "runs": runs.iter().map(|r| json!({"length": r.length, "seed": r.seed, "test_acc": r.test_acc, "epochs_run": r.epochs_run})).collect::<Vec<_>>(),
        }),
    )
    .write(&record::sidecar(&a.out))?;
    println!("length  mean_acc  std_acc");
    for r in &rows {
        println!("{:>6}  {:.4}    {:.4}", r.length, r.mean_acc, r.std_acc);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn checks_csv(checks: &[Check]) -> String {
    let mut out = String::from("check,value,threshold,passed\n");
    for c in checks {
        out.push_str(&format!("{},{},{},{}\n", c.name, c.value, c.threshold, c.passed));
    }
    out
}

fn cmd_verify(a: &VerifyArgs) -> Result<()> {
    if a.instances == 0 {
        return Err(CliError::Validation("--instances must be at least 1".into()));
    }
    let checks = experiments::verify(a.seed, a.instances, a.grad_check)?;
    for c in &checks {
        println!("{c}");
    }
    if let Some(out) = &a.out {
        write_csv(out, &checks_csv(&checks))?;
        ExperimentRecord::new(
            "verify",
            a.seed,
            json!({ "instances": a.instances, "grad_check": a.grad_check }),
            json!(checks
                .iter()
                .map(|c| json!({"name": c.name, "value": c.value, "threshold": c.threshold, "passed": c.passed}))
                .collect::<Vec<_>>()),
        )
        .write(&record::sidecar(out))?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", checks.len());
        Ok(())
    } else {
        Err(CliError::Runtime(format!("verification failed: {}", failed.join(", "))))
    }
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    if a.epochs == 0 || a.iterative_epochs == 0 {
        return Err(CliError::Validation("epoch counts must be at least 1".into()));
    }
    let options = BenchOptions {
        classes: a.classes,
        feature_dim: a.dim,
        seed: a.seed,
        closed_form_epochs: a.epochs,
        iterative_epochs: a.iterative_epochs,
        fixed_point_tol: a.tol,
        fixed_point_max_iters: a.max_iters,
        ..BenchOptions::default()
    };
    let rows = experiments::bench(&a.configs.0, &options)?;
    write_csv(&a.out, &experiments::bench_csv(&rows))?;
    println!("length chains  nodes  preproc_ms  closed_ms  fixed_ms (iters)  depth_ms");
    for r in &rows {
        println!(
            "{:>6} {:>6} {:>6} {:>11.1} {:>10.2} {:>9.1} ({}{}) {:>9.1}",
            r.length,
            r.chains_per_class,
            r.nodes,
            r.preprocessing_ms,
            r.closed_form_ms,
            r.fixed_point_ms,
            r.fixed_point_iters,
            if r.fixed_point_converged { "" } else { ", capped" },
            r.finite_depth_ms
        );
    }
    for w in rows.windows(2) {
        println!(
            "closed-form ratio {}x{} / {}x{}: {:.2}",
            w[1].length,
            w[1].chains_per_class,
            w[0].length,
            w[0].chains_per_class,
            w[1].closed_form_ms / w[0].closed_form_ms
        );
    }
    ExperimentRecord::new(
        "bench",
        a.seed,
        json!({
            "configs": a.configs.0,
            "classes": a.classes,
            "feature_dim": a.dim,
            "closed_form_epochs": a.epochs,
            "iterative_epochs": a.iterative_epochs,
            "fixed_point_tol": a.tol,
            "fixed_point_max_iters": a.max_iters,
            "config": config_json(&options.config),
        }),
        json!(rows
            .iter()
            .map(|r| json!({
                "length": r.length,
                "chains_per_class": r.chains_per_class,
                "preprocessing_ms": r.preprocessing_ms,
                "closed_form_ms": r.closed_form_ms,
                "fixed_point_ms": r.fixed_point_ms,
                "fixed_point_iters": r.fixed_point_iters,
                "finite_depth_ms": r.finite_depth_ms,
            }))
            .collect::<Vec<_>>()),
    )
    .write(&record::sidecar(&a.out))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_attack(a: &AttackArgs) -> Result<()> {
    let model = EignnModel::read_from(&a.model)?;
    let g = a.data.load(a.seed)?;
    if model.feature_dim() != g.feature_dim() || model.output_dim() != g.num_classes() {
        return Err(CliError::Validation(format!(
            "model is {}->{} but the dataset has {} features and {} classes",
            model.feature_dim(),
            model.output_dim(),
            g.feature_dim(),
            g.num_classes()
        )));
    }
    let start = std::time::Instant::now();
    let (cache, status) = trainer::build_or_load_cache(&g, a.data.cache.as_deref())?;
    log_cache(status, a.data.cache.as_deref(), start.elapsed().as_secs_f64() * 1e3);

    let fgsm = a.fgsm.as_ref().map_or(FGSM_EPSILONS.to_vec(), |l| l.0.clone());
    let pgd = a.pgd.as_ref().map_or(PGD_PRESETS.to_vec(), |l| l.0.clone());
    let mut configs: Vec<AttackConfig> = a.alphas.0.iter().map(|&x| AttackConfig::uniform(x, a.seed)).collect();
    configs.extend(fgsm.iter().map(|&e| AttackConfig::fgsm(e)));
    configs.extend(pgd.iter().map(|&(e, s)| AttackConfig {
        iterations: a.iterations,
        ..AttackConfig::pgd(e, s)
    }));
    for c in &configs {
        c.validate()?;
    }

    let grid = experiments::attack_grid(&model, &g, &cache, &configs)?;
    write_csv(&a.out, &grid.to_csv())?;
    println!("clean accuracy {:.4} ({} target nodes)", grid.clean_accuracy, grid.targets);
    for o in &grid.outcomes {
        println!(
            "{:<8} eps {:<8} accuracy {:.4}  target loss {:.4e}",
            o.config.kind.name(),
            o.config.epsilon,
            o.accuracy,
            o.attack_loss
        );
    }
    ExperimentRecord::new(
        "attack",
        a.seed,
        json!({
            "data": a.data.data,
            "model": a.model,
            "model_hash": format!("{:016x}", model.parameter_hash()),
            "attacks": configs.iter().map(|c| json!({
                "kind": c.kind.name(), "epsilon": c.epsilon, "step_size": c.step_size, "iterations": c.iterations,
            })).collect::<Vec<_>>(),
        }),
        json!({
            "clean_accuracy": grid.clean_accuracy,
            "clean_loss": grid.clean_loss,
            "targets": grid.targets,
            "outcomes": grid.outcomes.iter().map(|o| json!({
                "kind": o.config.kind.name(), "epsilon": o.config.epsilon,
                "accuracy": o.accuracy, "attack_loss": o.attack_loss,
            })).collect::<Vec<_>>(),
        }),
    )
    .write(&record::sidecar(&a.out))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenerateChains(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::SweepLengths(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Attack(a) => cmd_attack(a),
    }
}

fn main() -> ExitCode {
    let argv = match args::expand_config(std::env::args_os().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
