//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! always exits 0 once every experiment has run; crashes still fail.

use std::time::Instant;

use eignn::attack::{AttackKind, FGSM_EPSILONS, PGD_PRESETS};
use eignn::experiments::{self, BenchOptions};
use eignn::graph::{generate_chains, ChainsSpec};
use eignn::linalg::DenseMatrix;
use eignn::model::{spectral_forward, EignnModel};
use eignn::spectral::SpectralCache;
use eignn::trainer::{self, TrainConfig};

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn line(&mut self, passed: bool, text: String) {
        let tag = if passed { "PASS" } else { "FAIL" };
        println!("{tag} {text}");
        self.lines.push((passed, text));
    }

    fn info(&self, text: String) {
        println!("     {text}");
    }
}

fn max_abs_gap(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.max_abs_diff(b)
}

fn sweep(report: &mut Report, name: &str, classes: usize, lengths: &[usize]) {
    let start = Instant::now();
    let (rows, runs) = experiments::sweep_lengths(
        classes,
        20,
        100,
        lengths,
        &[0, 1, 2, 3, 4],
        &TrainConfig::chains(),
        |r| eprintln!("  c={classes} l={} seed={}: {:.4} ({} epochs)", r.length, r.seed, r.test_acc, r.epochs_run),
    )
    .expect("sweep runs");
    let worst = rows.iter().map(|r| r.mean_acc).fold(f64::INFINITY, f64::min);
    let per_length: Vec<String> = rows.iter().map(|r| format!("l={}: {:.4}", r.length, r.mean_acc)).collect();
    report.line(
        worst >= 0.99,
        format!("{name}: min mean test accuracy {worst:.4} >= 0.99 [{}]", per_length.join(", ")),
    );
    let lowest = runs.iter().map(|r| r.test_acc).fold(f64::INFINITY, f64::min);
    report.info(format!(
        "{} runs, lowest single run {lowest:.4}, {:.0} s",
        runs.len(),
        start.elapsed().as_secs_f64()
    ));
}

fn oracle_equivalence(report: &mut Report) {
    let eq = experiments::oracle_equivalence(0..50).expect("oracles run");
    report.line(
        eq.kron_gap <= 1e-9 && eq.iterative_gap <= 1e-9 && eq.all_converged,
        format!(
            "oracle equivalence over {} instances: spectral vs kron {:.2e}, spectral vs fixed-point {:.2e} (<= 1e-9)",
            eq.instances, eq.kron_gap, eq.iterative_gap
        ),
    );
}

fn gradients(report: &mut Report) {
    let g = experiments::gradient_check(0..50).expect("gradients run");
    report.line(
        g.kron_f <= 1e-5 && g.kron_b <= 1e-5,
        format!(
            "gradients vs kron oracle over {} instances: grad_F {:.2e}, grad_B {:.2e} (<= 1e-5)",
            g.instances, g.kron_f, g.kron_b
        ),
    );
    report.line(
        g.fd_f <= 1e-5 && g.fd_b <= 1e-5 && g.fd_x <= 1e-5,
        format!(
            "gradients vs central differences (h=1e-6): grad_F {:.2e}, grad_B {:.2e}, input_grad {:.2e} (<= 1e-5)",
            g.fd_f, g.fd_b, g.fd_x
        ),
    );
    let coarse = experiments::gradient_check_with_step(0..50, 1e-5).expect("gradients run");
    report.info(format!(
        "same instances with h=1e-5: grad_F {:.2e}, grad_B {:.2e}, input_grad {:.2e}",
        coarse.fd_f, coarse.fd_b, coarse.fd_x
    ));
}

fn convergence(report: &mut Report) {
    let c = experiments::convergence_check(0..20, &[10, 50, 200]).expect("convergence runs");
    report.line(
        c.worst_ratio_excess <= 1e-6,
        format!(
            "residual ratio over {} instances: worst ratio minus contraction factor {:.2e} (<= 1e-6)",
            c.instances, c.worst_ratio_excess
        ),
    );
    let depths: Vec<String> = c.depth_excess.iter().map(|(h, e)| format!("H={h}: {e:.2e}")).collect();
    report.line(
        c.depth_excess.iter().all(|(_, e)| *e <= 0.0),
        format!("finite-depth geometric bound, gap minus bound (<= 0): {}", depths.join(", ")),
    );
}

fn timing(report: &mut Report) {
    let rows = experiments::bench(&[(100, 20), (200, 20)], &BenchOptions::default()).expect("bench runs");
    for r in &rows {
        report.info(format!(
            "l={} n={}: preprocessing {:.0} ms, closed form {:.2} ms, fixed point {:.0} ms ({} iters{}), finite depth {:.0} ms",
            r.length,
            r.nodes,
            r.preprocessing_ms,
            r.closed_form_ms,
            r.fixed_point_ms,
            r.fixed_point_iters,
            if r.fixed_point_converged { "" } else { ", capped" },
            r.finite_depth_ms
        ));
    }
    let ratio = rows[1].closed_form_ms / rows[0].closed_form_ms;
    report.line(
        (1.3..=4.0).contains(&ratio),
        format!("closed-form epoch time ratio l=200/l=100: {ratio:.2} in [1.3, 4.0] (soft)"),
    );
    report.line(
        rows.iter().all(|r| r.finite_depth_ms > r.closed_form_ms),
        format!(
            "finite-depth H=l slower than closed form: l=100 {:.0} vs {:.2} ms, l=200 {:.0} vs {:.2} ms (soft)",
            rows[0].finite_depth_ms, rows[0].closed_form_ms, rows[1].finite_depth_ms, rows[1].closed_form_ms
        ),
    );
}

fn non_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0])
}

fn robustness(report: &mut Report) {
    let graph = generate_chains(&ChainsSpec::new(2, 20, 10).with_seed(0)).unwrap();
    let (model, train_report) = trainer::train(&graph, &TrainConfig::chains()).unwrap();
    let cache = SpectralCache::from_graph(&graph).unwrap();
    let grid = experiments::attack_grid(&model, &graph, &cache, &experiments::default_attacks(&[0.01, 0.1], 0))
        .expect("attacks run");
    report.info(format!(
        "chains c=2 l=10 model: test accuracy {:.4}, {} attack targets",
        train_report.test_acc_at_best_val.unwrap_or(f64::NAN),
        grid.targets
    ));

    let acc = |kind, eps| grid.find(kind, eps).expect("attack in grid").accuracy;
    let loss = |kind, eps| grid.find(kind, eps).expect("attack in grid").attack_loss;

    let uniform = [acc(AttackKind::Uniform, 0.01), acc(AttackKind::Uniform, 0.1)];
    report.line(
        non_increasing(&uniform),
        format!("uniform noise accuracy alpha 0.01 -> 0.1: {:.4} -> {:.4} non-increasing", uniform[0], uniform[1]),
    );

    let fgsm: Vec<f64> = FGSM_EPSILONS.iter().map(|&e| acc(AttackKind::Fgsm, e)).collect();
    report.line(
        non_increasing(&fgsm),
        format!("FGSM accuracy over eps {FGSM_EPSILONS:?}: {fgsm:.4?} non-increasing"),
    );

    let mut pgd_eps: Vec<f64> = PGD_PRESETS.iter().map(|&(e, _)| e).collect();
    pgd_eps.sort_by(f64::total_cmp);
    let pgd: Vec<f64> = pgd_eps.iter().map(|&e| acc(AttackKind::Pgd, e)).collect();
    report.line(
        non_increasing(&pgd),
        format!("PGD accuracy over eps {pgd_eps:?}: {pgd:.4?} non-increasing"),
    );

    let pairs: Vec<(f64, f64, f64)> = pgd_eps
        .iter()
        .map(|&e| (e, loss(AttackKind::Pgd, e), loss(AttackKind::Fgsm, e)))
        .collect();
    let shown: Vec<String> = pairs
        .iter()
        .map(|(e, p, f)| format!("eps {e}: {p:.6e} vs {f:.6e}"))
        .collect();
    report.line(
        pairs.iter().all(|(_, p, f)| p >= f),
        format!("PGD attack loss >= FGSM attack loss: {}", shown.join(", ")),
    );
}

fn serialization(report: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let graph = generate_chains(&ChainsSpec::new(2, 20, 10).with_seed(3)).unwrap();
    let (model, _) = trainer::train(&graph, &TrainConfig { epochs: 50, ..TrainConfig::chains() }).unwrap();
    let cache = SpectralCache::from_graph(&graph).unwrap();
    let reference = spectral_forward(&model, graph.features(), &cache).unwrap().logits;

    let cache_path = dir.path().join("s.eigs");
    cache.write_to(&cache_path).unwrap();
    let reloaded_cache = SpectralCache::read_from(&cache_path).unwrap();
    let cache_gap = max_abs_gap(
        &spectral_forward(&model, graph.features(), &reloaded_cache).unwrap().logits,
        &reference,
    );

    let model_path = dir.path().join("m.eigm");
    model.write_to(&model_path).unwrap();
    let reloaded_model = EignnModel::read_from(&model_path).unwrap();
    let model_gap = max_abs_gap(
        &spectral_forward(&reloaded_model, graph.features(), &cache).unwrap().logits,
        &reference,
    );
    report.line(
        cache_gap <= 1e-12 && model_gap <= 1e-12,
        format!("round trips: logits drift after cache reload {cache_gap:.2e}, after model reload {model_gap:.2e} (<= 1e-12)"),
    );
}

fn main() {
    let start = Instant::now();
    let mut report = Report { lines: Vec::new() };
    oracle_equivalence(&mut report);
    gradients(&mut report);
    convergence(&mut report);
    serialization(&mut report);
    robustness(&mut report);
    timing(&mut report);
    sweep(&mut report, "chains c=2 lengths 10,50,100,200", 2, &[10, 50, 100, 200]);
    sweep(&mut report, "chains c=5 lengths 10,50,100", 5, &[10, 50, 100]);

    let failed = report.lines.iter().filter(|(p, _)| !p).count();
    println!(
        "acceptance: {} of {} criteria passed, {failed} failed, {:.0} s",
        report.lines.len() - failed,
        report.lines.len(),
        start.elapsed().as_secs_f64()
    );
}
