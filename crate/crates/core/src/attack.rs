//! Feature perturbations against a frozen model: uniform noise, FGSM and PGD.
//!
//! Gradient attacks maximize the cross-entropy of the nodes the clean model
//! classifies correctly on the test mask, and only those nodes' feature
//! columns are perturbed. Accuracy under attack is always measured on the
//! full test mask with [`crate::trainer::evaluate_with_features`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::Graph;
use crate::linalg::DenseMatrix;
use crate::model::{input_grad, loss_and_output_grad, predictions, spectral_forward, EignnModel, ModelError};
use crate::spectral::SpectralCache;
use crate::trainer::{evaluate_with_features, TrainError};

pub const PGD_ITERATIONS: usize = 15;

/// `(ε, α)` pairs for PGD.
pub const PGD_PRESETS: [(f64, f64); 3] = [(0.01, 0.001), (0.001, 0.0001), (0.0001, 1e-5)];

pub const FGSM_EPSILONS: [f64; 3] = [0.0001, 0.001, 0.01];

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("no correctly classified test nodes to attack")]
    NoTargets,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, AttackError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Uniform,
    Fgsm,
    Pgd,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Uniform => "uniform",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Perturbation budget; the noise half-width for [`AttackKind::Uniform`].
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn uniform(alpha: f64, seed: u64) -> Self {
        Self {
            kind: AttackKind::Uniform,
            epsilon: alpha,
            step_size: 0.0,
            iterations: 0,
            seed,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            step_size: 0.0,
            iterations: 0,
            seed: 0,
        }
    }

    pub fn pgd(epsilon: f64, step_size: f64) -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon,
            step_size,
            iterations: PGD_ITERATIONS,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(AttackError::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.kind == AttackKind::Pgd && !(self.step_size > 0.0 && self.iterations >= 1) {
            return Err(AttackError::InvalidConfig(format!(
                "pgd needs step_size > 0 and iterations >= 1, got {} and {}",
                self.step_size, self.iterations
            )));
        }
        Ok(())
    }
}

/// `X + E` with `E_ij ~ U(−α, α)` i.i.d.
pub fn uniform_noise(x: &DenseMatrix, alpha: f64, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    if alpha > 0.0 {
        out.as_mut_slice().iter_mut().for_each(|v| *v += rng.gen_range(-alpha..alpha));
    }
    out
}

/// Test nodes the model classifies correctly on the clean features.
pub fn attack_targets(model: &EignnModel, graph: &Graph, cache: &SpectralCache) -> Result<Vec<bool>> {
    let logits = spectral_forward(model, graph.features(), cache)?.logits;
    let pred = predictions(&logits);
    Ok(graph
        .masks()
        .test
        .iter()
        .zip(&pred)
        .zip(graph.labels())
        .map(|((&t, &p), &l)| t && l == Some(p))
        .collect())
}

/// Mean cross-entropy over `targets` with features `x`.
pub fn attack_loss(
    model: &EignnModel,
    graph: &Graph,
    x: &DenseMatrix,
    cache: &SpectralCache,
    targets: &[bool],
) -> Result<f64> {
    let logits = spectral_forward(model, x, cache)?.logits;
    Ok(loss_and_output_grad(&logits, graph.labels(), targets)?.0)
}

/// `sign(∂L/∂X)` on target columns, zero elsewhere; `sign(0) = 0`.
fn gradient_sign(
    model: &EignnModel,
    graph: &Graph,
    x: &DenseMatrix,
    cache: &SpectralCache,
    targets: &[bool],
) -> Result<DenseMatrix> {
    let trace = spectral_forward(model, x, cache)?;
    let (_, d) = loss_and_output_grad(&trace.logits, graph.labels(), targets)?;
    let grad = input_grad(model, cache, &trace, &d)?;
    Ok(DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| {
        let g = grad[(i, j)];
        if !targets[j] || g == 0.0 {
            0.0
        } else {
            g.signum()
        }
    }))
}

fn require_targets(targets: &[bool]) -> Result<()> {
    if targets.iter().any(|&t| t) {
        Ok(())
    } else {
        Err(AttackError::NoTargets)
    }
}

/// `X + ε·sign(∂L/∂X)`.
pub fn fgsm_on(
    model: &EignnModel,
    graph: &Graph,
    cache: &SpectralCache,
    targets: &[bool],
    epsilon: f64,
) -> Result<DenseMatrix> {
    require_targets(targets)?;
    let x = graph.features();
    let mut out = x.clone();
    if epsilon != 0.0 {
        out.axpy(epsilon, &gradient_sign(model, graph, x, cache, targets)?);
    }
    Ok(out)
}

pub fn fgsm(model: &EignnModel, graph: &Graph, cache: &SpectralCache, epsilon: f64) -> Result<DenseMatrix> {
    let targets = attack_targets(model, graph, cache)?;
    fgsm_on(model, graph, cache, &targets, epsilon)
}

/// `iterations` steps of `X ← clip_ε(X + α·sign(∂L/∂X))` around the clean
/// features, starting from them.
pub fn pgd_on(
    model: &EignnModel,
    graph: &Graph,
    cache: &SpectralCache,
    targets: &[bool],
    epsilon: f64,
    step_size: f64,
    iterations: usize,
) -> Result<DenseMatrix> {
    require_targets(targets)?;
    let x0 = graph.features();
    let mut x = x0.clone();
    for _ in 0..iterations {
        let sign = gradient_sign(model, graph, &x, cache, targets)?;
        x.axpy(step_size, &sign);
        for (v, &orig) in x.as_mut_slice().iter_mut().zip(x0.as_slice()) {
            *v = v.clamp(orig - epsilon, orig + epsilon);
        }
    }
    Ok(x)
}

pub fn pgd(
    model: &EignnModel,
    graph: &Graph,
    cache: &SpectralCache,
    epsilon: f64,
    step_size: f64,
    iterations: usize,
) -> Result<DenseMatrix> {
    let targets = attack_targets(model, graph, cache)?;
    pgd_on(model, graph, cache, &targets, epsilon, step_size, iterations)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub config: AttackConfig,
    /// Test accuracy on the perturbed features.
    pub accuracy: f64,
    /// Cross-entropy of the attack targets on the perturbed features.
    pub attack_loss: f64,
    /// `‖X' − X‖_max`
    pub max_perturbation: f64,
}

/// Applies one attack and scores it. `targets` is shared across calls so
/// that every attack is judged on the same nodes.
pub fn run_attack(
    model: &EignnModel,
    graph: &Graph,
    cache: &SpectralCache,
    targets: &[bool],
    config: &AttackConfig,
) -> Result<AttackOutcome> {
    config.validate()?;
    let perturbed = match config.kind {
        AttackKind::Uniform => uniform_noise(graph.features(), config.epsilon, config.seed),
        AttackKind::Fgsm => fgsm_on(model, graph, cache, targets, config.epsilon)?,
        AttackKind::Pgd => pgd_on(
            model,
            graph,
            cache,
            targets,
            config.epsilon,
            config.step_size,
            config.iterations,
        )?,
    };
    let (accuracy, _) = evaluate_with_features(model, graph, &perturbed, cache, &graph.masks().test)?;
    let attack_loss = if targets.iter().any(|&t| t) {
        attack_loss(model, graph, &perturbed, cache, targets)?
    } else {
        f64::NAN
    };
    Ok(AttackOutcome {
        config: *config,
        accuracy,
        attack_loss,
        max_perturbation: perturbed.max_abs_diff(graph.features()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_chains, ChainsSpec, Masks};
    use crate::trainer::{train, TrainConfig};

    fn trained() -> (EignnModel, Graph, SpectralCache) {
        let g = generate_chains(&ChainsSpec::new(2, 10, 8).with_feature_dim(12)).unwrap();
        let config = TrainConfig {
            epochs: 150,
            ..TrainConfig::chains()
        };
        let (model, _) = train(&g, &config).unwrap();
        let cache = SpectralCache::from_graph(&g).unwrap();
        (model, g, cache)
    }

    #[test]
    fn uniform_noise_stays_in_support() {
        let x = DenseMatrix::from_fn(4, 50, |i, j| (i * j) as f64);
        let noisy = uniform_noise(&x, 0.3, 1);
        assert!(noisy.max_abs_diff(&x) <= 0.3);
        assert_eq!(noisy, uniform_noise(&x, 0.3, 1));
        assert_ne!(noisy, uniform_noise(&x, 0.3, 2));
        assert!(uniform_noise(&x, 1e-300, 1).max_abs_diff(&x) <= 1e-300);
    }

    #[test]
    fn uniform_noise_has_zero_mean() {
        let x = DenseMatrix::zeros(1000, 1000);
        let e = uniform_noise(&x, 1.0, 9);
        let n: f64 = 1e6;
        let sigma = (1.0f64 / 3.0).sqrt() / n.sqrt();
        assert!((e.sum() / n).abs() < 3.0 * sigma);
    }

    #[test]
    fn scalar_fgsm_direction() {
        // X = [x], S = [1], B = [b]: two classes, one feature
        let f = DenseMatrix::from_rows(&[[1.0]]);
        let b = DenseMatrix::from_rows(&[[2.0], [-1.0]]);
        let model = EignnModel::new(f, b, 0.5, 0.1).unwrap();
        let x = DenseMatrix::from_rows(&[[0.7]]);
        let masks = Masks {
            train: vec![false],
            val: vec![false],
            test: vec![true],
        };
        let graph = Graph::new(1, [], x, vec![Some(0)], 2, masks).unwrap();
        let cache = SpectralCache::from_graph(&graph).unwrap();
        let targets = attack_targets(&model, &graph, &cache).unwrap();
        assert_eq!(targets, vec![true]);
        // ∂L/∂x = Bᵀ(softmax − e₀)/(1 − γ g); softmax − e₀ = (p₀ − 1, 1 − p₀)
        // so the sign is that of (b₁ − b₀)(1 − p₀), i.e. negative
        let out = fgsm(&model, &graph, &cache, 0.05).unwrap();
        assert!((out[(0, 0)] - 0.65).abs() < 1e-15);
        assert_eq!(fgsm(&model, &graph, &cache, 0.0).unwrap()[(0, 0)], 0.7);
    }

    #[test]
    fn attacks_respect_budget_and_purity() {
        let (model, g, cache) = trained();
        let hash = model.parameter_hash();
        let targets = attack_targets(&model, &g, &cache).unwrap();
        for &(eps, alpha) in &PGD_PRESETS {
            let x = pgd_on(&model, &g, &cache, &targets, eps, alpha, PGD_ITERATIONS).unwrap();
            assert!(x.max_abs_diff(g.features()) <= eps + 1e-12);
            let big_steps = pgd_on(&model, &g, &cache, &targets, eps, 3.0 * eps, 4).unwrap();
            assert!(big_steps.max_abs_diff(g.features()) <= eps + 1e-12);
        }
        let x = fgsm_on(&model, &g, &cache, &targets, 0.01).unwrap();
        assert!(x.max_abs_diff(g.features()) <= 0.01 + 1e-15);
        for j in 0..g.num_nodes() {
            if !targets[j] {
                for i in 0..g.feature_dim() {
                    assert_eq!(x[(i, j)], g.features()[(i, j)]);
                }
            }
        }
        assert_eq!(model.parameter_hash(), hash);
    }

    #[test]
    fn one_pgd_step_is_fgsm() {
        let (model, g, cache) = trained();
        let targets = attack_targets(&model, &g, &cache).unwrap();
        let a = pgd_on(&model, &g, &cache, &targets, 0.01, 0.01, 1).unwrap();
        let b = fgsm_on(&model, &g, &cache, &targets, 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attacks_do_not_help() {
        let (model, g, cache) = trained();
        let targets = attack_targets(&model, &g, &cache).unwrap();
        let clean = run_attack(&model, &g, &cache, &targets, &AttackConfig::fgsm(1e-300)).unwrap();
        let fg = run_attack(&model, &g, &cache, &targets, &AttackConfig::fgsm(0.01)).unwrap();
        assert!(fg.accuracy <= clean.accuracy);
        assert!(fg.attack_loss >= clean.attack_loss);
        assert!(fg.max_perturbation <= 0.01 + 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::fgsm(0.0).validate().is_err());
        assert!(AttackConfig::pgd(0.01, 0.0).validate().is_err());
        assert!(AttackConfig { iterations: 0, ..AttackConfig::pgd(0.01, 0.001) }.validate().is_err());
        assert!(AttackConfig::uniform(0.1, 0).validate().is_ok());
    }

    #[test]
    fn no_targets_is_an_error() {
        let (model, g, cache) = trained();
        let none = vec![false; g.num_nodes()];
        assert!(matches!(fgsm_on(&model, &g, &cache, &none, 0.01), Err(AttackError::NoTargets)));
    }
}
