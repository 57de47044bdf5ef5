//! Experiment drivers shared by the command-line tool and the acceptance
//! suite: oracle verification on random instances, length sweeps on the
//! chains benchmark, solver timing, and the attack grid.

use std::fmt;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{self, AttackConfig, AttackError, AttackKind, AttackOutcome, FGSM_EPSILONS, PGD_PRESETS};
use crate::graph::{generate_chains, normalized_adjacency, ChainsSpec, Graph, GraphError, Masks, NormalizedAdjacency};
use crate::linalg::{frobenius_norm, DenseMatrix};
use crate::model::{
    backward, contraction_factor, input_grad, loss_and_output_grad, spectral_forward, EignnModel, ModelError,
};
use crate::oracle::{self, max_relative_error, OracleError, DEFAULT_FD_STEP};
use crate::spectral::SpectralCache;
use crate::trainer::{self, train, train_with_cache, Solver, TrainConfig, TrainError};

/// One named pass/fail measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `value <= threshold`.
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value <= threshold,
        }
    }

    /// Passes when `value >= threshold`.
    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value >= threshold,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {:.3e} (threshold {:.3e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.threshold
        )
    }
}

/// A small random problem for the oracles: every node is labeled and in the
/// train mask.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub model: EignnModel,
    pub graph: Graph,
    pub s: DenseMatrix,
    pub cache: SpectralCache,
}

/// `m ≤ max_m`, `n ≤ max_n`, `2 ≤ m_y ≤ max_classes`, edge density 0.4,
/// `γ ∈ [0.5, 1]`, `ε_F ∈ [1e-6, 1e-2]` log-uniform.
pub fn random_instance(seed: u64, max_m: usize, max_n: usize, max_classes: usize) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=max_m);
    let n = rng.gen_range(1..=max_n);
    let m_y = rng.gen_range(2..=max_classes.max(2));
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(0.4) {
                edges.push((u, v));
            }
        }
    }
    let x = DenseMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    let labels = (0..n).map(|_| Some(rng.gen_range(0..m_y))).collect();
    let mut masks = Masks::empty(n);
    masks.train = vec![true; n];
    let graph = Graph::new(n, edges, x, labels, m_y, masks).expect("generated graph is valid");
    let f = DenseMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
    let b = DenseMatrix::from_fn(m_y, m, |_, _| rng.gen_range(-1.0..1.0));
    let gamma = rng.gen_range(0.5..=1.0);
    let eps_f = 10f64.powf(rng.gen_range(-6.0..-2.0));
    let model = EignnModel::new(f, b, gamma, eps_f).expect("generated model is valid");
    RandomInstance {
        s: normalized_adjacency(&graph),
        cache: SpectralCache::from_graph(&graph).expect("small eigenproblem converges"),
        model,
        graph,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Worst gaps between the closed form and the two oracle solvers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EquivalenceStats {
    pub instances: usize,
    pub kron_gap: f64,
    pub iterative_gap: f64,
    pub logits_gap: f64,
    pub all_converged: bool,
}

pub fn oracle_equivalence(seeds: impl IntoIterator<Item = u64>) -> Result<EquivalenceStats> {
    let mut stats = EquivalenceStats {
        all_converged: true,
        ..Default::default()
    };
    for seed in seeds {
        let inst = random_instance(seed, 6, 8, 4);
        let x = inst.graph.features();
        let trace = spectral_forward(&inst.model, x, &inst.cache)?;
        let kron_z = oracle::kron_forward(&inst.model, x, &inst.s)?;
        let (iter_z, report) = oracle::iterate_fixed_point(&inst.model, x, &inst.s, 1e-12, 1_000_000)?;
        stats.instances += 1;
        stats.kron_gap = stats.kron_gap.max(trace.z.max_abs_diff(&kron_z));
        stats.iterative_gap = stats.iterative_gap.max(trace.z.max_abs_diff(&iter_z));
        let kron_logits = crate::model::readout(&inst.model, &kron_z);
        stats.logits_gap = stats.logits_gap.max(trace.logits.max_abs_diff(&kron_logits));
        stats.all_converged &= report.converged;
    }
    Ok(stats)
}

/// Worst entrywise relative errors of the analytic gradients.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradientStats {
    pub instances: usize,
    pub kron_f: f64,
    pub kron_b: f64,
    pub fd_f: f64,
    pub fd_b: f64,
    pub fd_x: f64,
}

impl GradientStats {
    pub fn worst(&self) -> f64 {
        [self.kron_f, self.kron_b, self.fd_f, self.fd_b, self.fd_x]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn full_loss(model: &EignnModel, x: &DenseMatrix, inst: &RandomInstance) -> f64 {
    let mask = &inst.graph.masks().train;
    match spectral_forward(model, x, &inst.cache) {
        Ok(trace) => loss_and_output_grad(&trace.logits, inst.graph.labels(), mask)
            .map(|(l, _)| l)
            .unwrap_or(f64::NAN),
        Err(_) => f64::NAN,
    }
}

pub fn gradient_check(seeds: impl IntoIterator<Item = u64>) -> Result<GradientStats> {
    gradient_check_with_step(seeds, DEFAULT_FD_STEP)
}

/// [`gradient_check`] with central differences of step `h`.
pub fn gradient_check_with_step(seeds: impl IntoIterator<Item = u64>, h: f64) -> Result<GradientStats> {
    let mut stats = GradientStats::default();
    for seed in seeds {
        let inst = random_instance(seed, 6, 8, 4);
        let m = &inst.model;
        let x = inst.graph.features();
        let trace = spectral_forward(m, x, &inst.cache)?;
        let (_, d) = loss_and_output_grad(&trace.logits, inst.graph.labels(), &inst.graph.masks().train)?;
        let grads = backward(m, x, &inst.cache, &trace, &d)?;
        let dx = input_grad(m, &inst.cache, &trace, &d)?;

        let kron_f = oracle::kron_grad_f(m, x, &inst.s, &d)?;
        let kron_b = oracle::kron_grad_b(m, x, &inst.s, &d)?;
        let with_f = |f: &DenseMatrix| EignnModel::new(f.clone(), m.b().clone(), m.gamma(), m.eps_f());
        let with_b = |b: &DenseMatrix| EignnModel::new(m.f().clone(), b.clone(), m.gamma(), m.eps_f());
        let fd_f = oracle::finite_difference_grad(
            |f| with_f(f).map_or(f64::NAN, |model| full_loss(&model, x, &inst)),
            m.f(),
            h,
        )?;
        let fd_b = oracle::finite_difference_grad(
            |b| with_b(b).map_or(f64::NAN, |model| full_loss(&model, x, &inst)),
            m.b(),
            h,
        )?;
        let fd_x = oracle::finite_difference_grad(|x| full_loss(m, x, &inst), x, h)?;

        stats.instances += 1;
        stats.kron_f = stats.kron_f.max(max_relative_error(&grads.f, &kron_f));
        stats.kron_b = stats.kron_b.max(max_relative_error(&grads.b, &kron_b));
        stats.fd_f = stats.fd_f.max(max_relative_error(&grads.f, &fd_f));
        stats.fd_b = stats.fd_b.max(max_relative_error(&grads.b, &fd_b));
        stats.fd_x = stats.fd_x.max(max_relative_error(&dx, &fd_x));
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvergenceStats {
    pub instances: usize,
    /// `max_k (r_{k+1}/r_k − contraction_factor)`; negative when every ratio
    /// is strictly inside the bound.
    pub worst_ratio_excess: f64,
    /// `(depth, max over instances of gap − bound)`, where the gap is
    /// `‖Z_H − Z‖_F` and the bound `(γδ)^H/(1−γδ)·‖X‖_F`.
    pub depth_excess: Vec<(usize, f64)>,
}

/// Residuals closer to zero than this are rounding noise; ratios of them
/// are not measured.
const RESIDUAL_FLOOR: f64 = 1e-280;

/// Additive allowance for the rounding error of two independently computed
/// hidden states when comparing against the depth bound.
const DEPTH_ROUNDING: f64 = 1e-12;

pub fn convergence_check(seeds: impl IntoIterator<Item = u64>, depths: &[usize]) -> Result<ConvergenceStats> {
    let mut stats = ConvergenceStats {
        worst_ratio_excess: f64::NEG_INFINITY,
        depth_excess: depths.iter().map(|&h| (h, f64::NEG_INFINITY)).collect(),
        ..Default::default()
    };
    for seed in seeds {
        let inst = random_instance(seed, 6, 8, 4);
        let x = inst.graph.features();
        let cf = contraction_factor(&inst.model, &inst.cache);
        let (_, report) = oracle::iterate_fixed_point(&inst.model, x, &inst.s, 1e-12, 1_000_000)?;
        for w in report.residual_history.windows(2) {
            if w[0] > RESIDUAL_FLOOR {
                stats.worst_ratio_excess = stats.worst_ratio_excess.max(w[1] / w[0] - cf);
            }
        }
        let z = spectral_forward(&inst.model, x, &inst.cache)?.z;
        for (h, excess) in stats.depth_excess.iter_mut() {
            let zh = oracle::finite_depth_forward(&inst.model, x, &inst.s, *h)?;
            let bound = cf.powi(*h as i32) / (1.0 - cf) * frobenius_norm(x);
            let gap = frobenius_norm(&zh.sub(&z));
            *excess = excess.max(gap - bound - DEPTH_ROUNDING * frobenius_norm(x).max(1.0));
        }
        stats.instances += 1;
    }
    Ok(stats)
}

/// The checks run by `verify`: forward equivalence and convergence always,
/// gradients when `grad_check` is set.
pub fn verify(seed: u64, instances: usize, grad_check: bool) -> Result<Vec<Check>> {
    let seeds = || (0..instances as u64).map(move |i| seed.wrapping_mul(1_000_003).wrapping_add(i));
    let eq = oracle_equivalence(seeds())?;
    let mut checks = vec![
        Check::at_most("spectral vs kron max-abs gap", eq.kron_gap, 1e-9),
        Check::at_most("spectral vs fixed-point max-abs gap", eq.iterative_gap, 1e-9),
        Check::at_least(
            "fixed-point runs converged",
            if eq.all_converged { 1.0 } else { 0.0 },
            1.0,
        ),
    ];
    let conv = convergence_check(seeds(), &[10, 50, 200])?;
    checks.push(Check::at_most(
        "residual ratio minus contraction factor",
        conv.worst_ratio_excess,
        1e-6,
    ));
    for (h, excess) in &conv.depth_excess {
        checks.push(Check::at_most(format!("depth {h} gap minus bound"), *excess, 0.0));
    }
    if grad_check {
        let g = gradient_check(seeds())?;
        checks.push(Check::at_most("grad_F vs kron relative error", g.kron_f, 1e-5));
        checks.push(Check::at_most("grad_B vs kron relative error", g.kron_b, 1e-5));
        checks.push(Check::at_most("grad_F vs finite differences", g.fd_f, 1e-5));
        checks.push(Check::at_most("grad_B vs finite differences", g.fd_b, 1e-5));
        checks.push(Check::at_most("input_grad vs finite differences", g.fd_x, 1e-5));
    }
    Ok(checks)
}

/// Test accuracy of one trained model in a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub length: usize,
    pub seed: u64,
    pub test_acc: f64,
    pub epochs_run: usize,
    pub mean_epoch_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub length: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub seeds: usize,
}

pub const SWEEP_CSV_HEADER: &str = "length,mean_acc,std_acc,seeds";

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains one model per `(length, seed)`. The seed drives both the split and
/// the initialization.
pub fn sweep_lengths(
    classes: usize,
    chains_per_class: usize,
    feature_dim: usize,
    lengths: &[usize],
    seeds: &[u64],
    config: &TrainConfig,
    mut on_run: impl FnMut(&SweepRun),
) -> Result<(Vec<SweepRow>, Vec<SweepRun>)> {
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &length in lengths {
        let mut accs = Vec::new();
        for &seed in seeds {
            let spec = ChainsSpec::new(classes, chains_per_class, length)
                .with_feature_dim(feature_dim)
                .with_seed(seed);
            let graph = generate_chains(&spec)?;
            let cfg = TrainConfig {
                seed,
                cache_path: None,
                ..config.clone()
            };
            let (_, report) = train(&graph, &cfg)?;
            let run = SweepRun {
                length,
                seed,
                test_acc: report.test_acc_at_best_val.unwrap_or(f64::NAN),
                epochs_run: report.epochs.len(),
                mean_epoch_ms: report.mean_epoch_ms(),
            };
            on_run(&run);
            accs.push(run.test_acc);
            runs.push(run);
        }
        let (mean_acc, std_acc) = mean_std(&accs);
        rows.push(SweepRow {
            length,
            mean_acc,
            std_acc,
            seeds: accs.len(),
        });
    }
    Ok((rows, runs))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.length, r.mean_acc, r.std_acc, r.seeds);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub classes: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub closed_form_epochs: usize,
    pub iterative_epochs: usize,
    pub fixed_point_tol: f64,
    pub fixed_point_max_iters: usize,
    pub config: TrainConfig,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            classes: 2,
            feature_dim: 100,
            seed: 0,
            closed_form_epochs: 10,
            iterative_epochs: 2,
            fixed_point_tol: 1e-6,
            fixed_point_max_iters: 10_000,
            config: TrainConfig::chains(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub length: usize,
    pub chains_per_class: usize,
    pub nodes: usize,
    pub preprocessing_ms: f64,
    pub closed_form_ms: f64,
    pub fixed_point_ms: f64,
    /// Forward iterations the fixed-point solver needed at initialization.
    pub fixed_point_iters: usize,
    pub fixed_point_converged: bool,
    pub finite_depth_ms: f64,
}

pub const BENCH_CSV_HEADER: &str =
    "length,chains_per_class,nodes,preprocessing_ms,closed_form_ms,fixed_point_ms,fixed_point_iters,fixed_point_converged,finite_depth_ms";

fn median_epoch_ms(graph: &Graph, cache: &SpectralCache, config: &TrainConfig, epochs: usize, solver: Solver) -> Result<f64> {
    let cfg = TrainConfig {
        epochs,
        patience: epochs + 1,
        solver,
        ..config.clone()
    };
    let (_, report) = train_with_cache(graph, cache, &cfg)?;
    Ok(report.median_epoch_ms())
}

/// Per-epoch training time of the three solvers on chains graphs. The
/// finite-depth solver unrolls `H = length` layers.
pub fn bench(configs: &[(usize, usize)], options: &BenchOptions) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &(length, chains_per_class) in configs {
        let spec = ChainsSpec::new(options.classes, chains_per_class, length)
            .with_feature_dim(options.feature_dim)
            .with_seed(options.seed);
        let graph = generate_chains(&spec)?;
        let start = std::time::Instant::now();
        let (cache, _) = trainer::build_or_load_cache(&graph, None)?;
        let preprocessing_ms = start.elapsed().as_secs_f64() * 1e3;
        let config = TrainConfig {
            seed: options.seed,
            ..options.config.clone()
        };

        let closed_form_ms = median_epoch_ms(&graph, &cache, &config, options.closed_form_epochs, Solver::ClosedForm)?;
        let fixed = Solver::FixedPoint {
            tol: options.fixed_point_tol,
            max_iters: options.fixed_point_max_iters,
        };
        let fixed_point_ms = median_epoch_ms(&graph, &cache, &config, options.iterative_epochs, fixed)?;
        let model = trainer::initial_model(&graph, &config)?;
        let s = NormalizedAdjacency::new(&graph);
        let (_, report) = oracle::iterate_fixed_point(
            &model,
            graph.features(),
            &s,
            options.fixed_point_tol,
            options.fixed_point_max_iters,
        )?;
        let finite_depth_ms = median_epoch_ms(
            &graph,
            &cache,
            &config,
            options.iterative_epochs,
            Solver::FiniteDepth { depth: length },
        )?;
        rows.push(BenchRow {
            length,
            chains_per_class,
            nodes: graph.num_nodes(),
            preprocessing_ms,
            closed_form_ms,
            fixed_point_ms,
            fixed_point_iters: report.iterations,
            fixed_point_converged: report.converged,
            finite_depth_ms,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.3},{:.3},{:.3},{},{},{:.3}",
            r.length,
            r.chains_per_class,
            r.nodes,
            r.preprocessing_ms,
            r.closed_form_ms,
            r.fixed_point_ms,
            r.fixed_point_iters,
            r.fixed_point_converged,
            r.finite_depth_ms
        );
    }
    out
}

pub const ATTACK_CSV_HEADER: &str = "attack,epsilon,step_size,iterations,accuracy,attack_loss";

/// One row per attack plus a leading `clean` row.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackGrid {
    pub clean_accuracy: f64,
    pub clean_loss: f64,
    pub targets: usize,
    pub outcomes: Vec<AttackOutcome>,
}

impl AttackGrid {
    pub fn find(&self, kind: AttackKind, epsilon: f64) -> Option<&AttackOutcome> {
        self.outcomes
            .iter()
            .find(|o| o.config.kind == kind && o.config.epsilon == epsilon)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{ATTACK_CSV_HEADER}\n");
        let _ = writeln!(out, "clean,0,0,0,{},{}", self.clean_accuracy, self.clean_loss);
        for o in &self.outcomes {
            let c = &o.config;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.kind.name(),
                c.epsilon,
                c.step_size,
                c.iterations,
                o.accuracy,
                o.attack_loss
            );
        }
        out
    }
}

/// The default grid: uniform noise at each `alpha`, FGSM at each preset
/// budget, and PGD at each preset `(ε, α)`.
pub fn default_attacks(alphas: &[f64], seed: u64) -> Vec<AttackConfig> {
    let mut configs: Vec<AttackConfig> = alphas.iter().map(|&a| AttackConfig::uniform(a, seed)).collect();
    configs.extend(FGSM_EPSILONS.iter().map(|&e| AttackConfig::fgsm(e)));
    configs.extend(PGD_PRESETS.iter().map(|&(e, a)| AttackConfig::pgd(e, a)));
    configs
}

pub fn attack_grid(
    model: &EignnModel,
    graph: &Graph,
    cache: &SpectralCache,
    configs: &[AttackConfig],
) -> Result<AttackGrid> {
    let targets = attack::attack_targets(model, graph, cache)?;
    let (clean_accuracy, _) = trainer::evaluate(model, graph, cache, &graph.masks().test)?;
    let clean_loss = if targets.iter().any(|&t| t) {
        attack::attack_loss(model, graph, graph.features(), cache, &targets)?
    } else {
        f64::NAN
    };
    let outcomes = configs
        .iter()
        .map(|c| attack::run_attack(model, graph, cache, &targets, c))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(AttackGrid {
        clean_accuracy,
        clean_loss,
        targets: targets.iter().filter(|&&t| t).count(),
        outcomes,
    })
}
