//! Slow reference solvers: fixed-point iteration, truncated unrolling, the
//! dense Kronecker closed form, and central finite differences.
//!
//! These exist to check [`crate::model`] and to time the iterative
//! alternatives against it. Nothing here is used on the training fast path
//! except through [`crate::trainer::Solver`].

use thiserror::Error;

use crate::graph::Propagation;
use crate::linalg::{frobenius_norm, kron, solve_spd, unvectorize, vectorize, DenseMatrix, LinalgError};
use crate::model::{g_of_f, grad_f_from_r, EignnModel, Gradients, ModelError};

/// Largest `m·n` for which the Kronecker oracle materializes `U`.
pub const KRON_MAX_MN: usize = 5000;

pub const DEFAULT_FD_STEP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("Kronecker oracle needs m*n <= {limit}, got {mn}")]
    SizeGuardExceeded { mn: usize, limit: usize },
    #[error("I - gamma (S kron g(F)) is not positive definite")]
    SingularU,
    #[error("loss is not finite at entry ({row}, {col})")]
    NonFiniteLoss { row: usize, col: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Outcome of a fixed-point solve. Residuals are `‖Z⁽ᵏ⁺¹⁾ − Z⁽ᵏ⁾‖_F`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

fn check_shapes(model: &EignnModel, x: &DenseMatrix, s: &impl Propagation) -> Result<()> {
    if x.shape() != (model.feature_dim(), s.num_nodes()) {
        return Err(OracleError::DimensionMismatch(format!(
            "X is {:?}, expected {}x{}",
            x.shape(),
            model.feature_dim(),
            s.num_nodes()
        )));
    }
    Ok(())
}

/// Solves `A = γ g A S + C` by iteration from `A⁽⁰⁾ = C`.
///
/// The iterate is carried as a partial Neumann sum: `Δ⁽ᵏ⁺¹⁾ = γ g Δ⁽ᵏ⁾ S`,
/// `A⁽ᵏ⁺¹⁾ = A⁽ᵏ⁾ + Δ⁽ᵏ⁺¹⁾`. This is the same sequence as applying the map
/// directly, but the step `Δ` is never formed by cancellation, so small
/// residuals keep their relative precision.
fn iterate(
    gamma_g: &DenseMatrix,
    c: &DenseMatrix,
    s: &impl Propagation,
    tol: f64,
    max_iters: usize,
) -> (DenseMatrix, IterationReport) {
    let mut z = c.clone();
    let mut delta = c.clone();
    let mut history = Vec::new();
    let mut converged = false;
    while history.len() < max_iters {
        delta = gamma_g.matmul(&s.propagate(&delta));
        z.axpy(1.0, &delta);
        let residual = frobenius_norm(&delta);
        history.push(residual);
        if residual <= tol {
            converged = true;
            break;
        }
    }
    let report = IterationReport {
        iterations: history.len(),
        final_residual: history.last().copied().unwrap_or(f64::INFINITY),
        residual_history: history,
        converged,
    };
    (z, report)
}

/// Iterates `Z ← γ g(F) Z S + X` from `Z = X` until the step is at most
/// `tol` in Frobenius norm or `max_iters` steps have run. Non-convergence is
/// reported, not raised.
pub fn iterate_fixed_point(
    model: &EignnModel,
    x: &DenseMatrix,
    s: &impl Propagation,
    tol: f64,
    max_iters: usize,
) -> Result<(DenseMatrix, IterationReport)> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(OracleError::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    check_shapes(model, x, s)?;
    let gamma_g = g_of_f(model.f(), model.eps_f())?.scale(model.gamma());
    Ok(iterate(&gamma_g, x, s, tol, max_iters))
}

/// Exactly `depth` applications of `Z ← γ g(F) Z S + X`, starting at `X`.
pub fn finite_depth_forward(
    model: &EignnModel,
    x: &DenseMatrix,
    s: &impl Propagation,
    depth: usize,
) -> Result<DenseMatrix> {
    check_shapes(model, x, s)?;
    let gamma_g = g_of_f(model.f(), model.eps_f())?.scale(model.gamma());
    let mut z = x.clone();
    for _ in 0..depth {
        z = step(&gamma_g, &z, s, x);
    }
    Ok(z)
}

fn step(gamma_g: &DenseMatrix, z: &DenseMatrix, s: &impl Propagation, x: &DenseMatrix) -> DenseMatrix {
    let mut next = gamma_g.matmul(&s.propagate(z));
    next.axpy(1.0, x);
    next
}

/// Gradients through the fixed point obtained by iteration: the forward
/// state and the adjoint `A = γ g A S + Bᵀ D` are both solved iteratively.
#[derive(Debug, Clone)]
pub struct IterativeGradients {
    pub z: DenseMatrix,
    pub grads: Gradients,
    /// `∂L/∂X`, which equals the adjoint state.
    pub input_grad: DenseMatrix,
    pub forward: IterationReport,
    pub adjoint: IterationReport,
}

/// `D` is `∂L/∂logits` as a function of `Z`; it is evaluated once the
/// forward iteration has finished.
pub fn fixed_point_gradients(
    model: &EignnModel,
    x: &DenseMatrix,
    s: &impl Propagation,
    tol: f64,
    max_iters: usize,
    output_grad: impl FnOnce(&DenseMatrix) -> std::result::Result<DenseMatrix, ModelError>,
) -> Result<IterativeGradients> {
    let (z, forward) = iterate_fixed_point(model, x, s, tol, max_iters)?;
    let d = output_grad(&z)?;
    check_output_grad(model, x, &d)?;
    let gamma_g = g_of_f(model.f(), model.eps_f())?.scale(model.gamma());
    let (adjoint_state, adjoint) = iterate(&gamma_g, &model.b().t_matmul(&d), s, tol, max_iters);
    let r = adjoint_state.matmul_t(&s.propagate(&z));
    let grads = Gradients {
        f: grad_f_from_r(model.f(), &r, model.gamma(), model.eps_f()),
        b: d.matmul_t(&z),
        bias: model.bias().map(|_| d.row_sums()),
    };
    Ok(IterativeGradients {
        z,
        grads,
        input_grad: adjoint_state,
        forward,
        adjoint,
    })
}

fn check_output_grad(model: &EignnModel, x: &DenseMatrix, d: &DenseMatrix) -> Result<()> {
    if d.shape() != (model.output_dim(), x.cols()) {
        return Err(OracleError::DimensionMismatch(format!(
            "output gradient is {:?}, expected {}x{}",
            d.shape(),
            model.output_dim(),
            x.cols()
        )));
    }
    Ok(())
}

/// Exact gradients of the depth-`depth` unrolled model.
#[derive(Debug, Clone)]
pub struct UnrolledGradients {
    pub z: DenseMatrix,
    pub grads: Gradients,
}

/// Backpropagation through `depth` unrolled steps. Hidden states are
/// checkpointed every `⌈√depth⌉` steps and recomputed segment by segment,
/// so memory grows with `√depth` rather than `depth`.
pub fn finite_depth_gradients(
    model: &EignnModel,
    x: &DenseMatrix,
    s: &impl Propagation,
    depth: usize,
    output_grad: impl FnOnce(&DenseMatrix) -> std::result::Result<DenseMatrix, ModelError>,
) -> Result<UnrolledGradients> {
    check_shapes(model, x, s)?;
    let gamma_g = g_of_f(model.f(), model.eps_f())?.scale(model.gamma());
    let interval = ((depth as f64).sqrt().ceil() as usize).max(1);

    let mut checkpoints = vec![x.clone()];
    let mut z = x.clone();
    for l in 0..depth {
        z = step(&gamma_g, &z, s, x);
        if (l + 1) % interval == 0 && l + 1 < depth {
            checkpoints.push(z.clone());
        }
    }
    let d = output_grad(&z)?;
    check_output_grad(model, x, &d)?;

    // Ā⁽ᴴ⁾ = BᵀD, Ā⁽ˡ⁾ = γ g Ā⁽ˡ⁺¹⁾ S, R = Σ_l Ā⁽ˡ⁺¹⁾ (Z⁽ˡ⁾ S)ᵀ
    let mut adjoint = model.b().t_matmul(&d);
    let mut r = DenseMatrix::zeros(model.feature_dim(), model.feature_dim());
    for (k, start) in checkpoints.iter().enumerate().rev() {
        let begin = k * interval;
        let end = ((k + 1) * interval).min(depth);
        let mut propagated = Vec::with_capacity(end - begin);
        let mut current = start.clone();
        for l in begin..end {
            let zs = s.propagate(&current);
            if l + 1 < end {
                let mut next = gamma_g.matmul(&zs);
                next.axpy(1.0, x);
                current = next;
            }
            propagated.push(zs);
        }
        for zs in propagated.iter().rev() {
            r.axpy(1.0, &adjoint.matmul_t(zs));
            adjoint = gamma_g.matmul(&s.propagate(&adjoint));
        }
    }
    let grads = Gradients {
        f: grad_f_from_r(model.f(), &r, model.gamma(), model.eps_f()),
        b: d.matmul_t(&z),
        bias: model.bias().map(|_| d.row_sums()),
    };
    Ok(UnrolledGradients { z, grads })
}

fn kron_guard(model: &EignnModel, x: &DenseMatrix, s: &DenseMatrix) -> Result<()> {
    if !s.is_square() {
        return Err(OracleError::DimensionMismatch(format!("S is {:?}", s.shape())));
    }
    check_shapes(model, x, s)?;
    let mn = model.feature_dim() * s.rows();
    if mn > KRON_MAX_MN {
        return Err(OracleError::SizeGuardExceeded { mn, limit: KRON_MAX_MN });
    }
    Ok(())
}

/// `U = I − γ (S ⊗ g(F))`
pub fn kron_system(model: &EignnModel, s: &DenseMatrix) -> Result<DenseMatrix> {
    let g = g_of_f(model.f(), model.eps_f())?;
    let mut u = kron(s, &g)?.scale(-model.gamma());
    for i in 0..u.rows() {
        u[(i, i)] += 1.0;
    }
    Ok(u)
}

fn solve_u(u: &DenseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    solve_spd(u, rhs).map_err(|e| match e {
        LinalgError::NotPositiveDefinite => OracleError::SingularU,
        other => other.into(),
    })
}

/// Solves `U vec(Z) = vec(X)` with a dense factorization.
pub fn kron_forward(model: &EignnModel, x: &DenseMatrix, s: &DenseMatrix) -> Result<DenseMatrix> {
    kron_guard(model, x, s)?;
    let u = kron_system(model, s)?;
    let z = solve_u(&u, &vectorize(x))?;
    Ok(unvectorize(&z, x.rows(), x.cols())?)
}

/// `K` with `K vec(M) = vec(Mᵀ)` for `M` of shape `rows × cols`.
pub fn commutation_matrix(rows: usize, cols: usize) -> DenseMatrix {
    let mut k = DenseMatrix::zeros(rows * cols, rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            // vec(M)[j·rows + i] = M_ij = Mᵀ_ji = vec(Mᵀ)[i·cols + j]
            k[(i * cols + j, j * rows + i)] = 1.0;
        }
    }
    k
}

/// `∂vec g(F) / ∂vec F`, `m² × m²`:
///
/// ```text
/// 1/(s+ε) · (I − v vᵀ / ((s+ε) s)) · (I + K) · (I ⊗ Fᵀ),   v = vec(FᵀF), s = ‖v‖
/// ```
pub fn g_jacobian(f: &DenseMatrix, eps_f: f64) -> Result<DenseMatrix> {
    let m = f.rows();
    let gram = f.t_matmul(f).symmetrized();
    let s = frobenius_norm(&gram);
    let v = vectorize(&gram);
    let mut normalizer = DenseMatrix::identity(m * m);
    if s > 0.0 {
        let c = 1.0 / ((s + eps_f) * s);
        for i in 0..m * m {
            for j in 0..m * m {
                normalizer[(i, j)] -= c * v[i] * v[j];
            }
        }
    }
    let mut sym = commutation_matrix(m, m);
    for i in 0..m * m {
        sym[(i, i)] += 1.0;
    }
    let d_gram = sym.matmul(&kron(&DenseMatrix::identity(m), &f.transpose())?);
    Ok(normalizer.matmul(&d_gram).scale(1.0 / (s + eps_f)))
}

/// `∂L/∂vec F = γ · vec(D)ᵀ (I_n ⊗ B) U⁻¹ (S Zᵀ ⊗ I_m) · ∂vec g/∂vec F`,
/// reshaped to `m × m`.
pub fn kron_grad_f(model: &EignnModel, x: &DenseMatrix, s: &DenseMatrix, d: &DenseMatrix) -> Result<DenseMatrix> {
    kron_guard(model, x, s)?;
    check_output_grad(model, x, d)?;
    let (m, n) = x.shape();
    let u = kron_system(model, s)?;
    let z = unvectorize(&solve_u(&u, &vectorize(x))?, m, n)?;
    let readout = kron(&DenseMatrix::identity(n), model.b())?;
    // U is symmetric, so vec(D)ᵀ (I ⊗ B) U⁻¹ = (U⁻¹ (I ⊗ B)ᵀ vec D)ᵀ
    let w = solve_u(&u, &readout.transpose().matvec(&vectorize(d)))?;
    let propagation = kron(&s.matmul_t(&z), &DenseMatrix::identity(m))?;
    let dg = propagation.transpose().matvec(&w);
    let grad = g_jacobian(model.f(), model.eps_f())?.transpose().matvec(&dg);
    Ok(unvectorize(&grad, m, m)?.scale(model.gamma()))
}

/// `∂L/∂vec B = vec(D)ᵀ (Zᵀ ⊗ I_{m_y})`, reshaped to `m_y × m`.
pub fn kron_grad_b(model: &EignnModel, x: &DenseMatrix, s: &DenseMatrix, d: &DenseMatrix) -> Result<DenseMatrix> {
    let z = kron_forward(model, x, s)?;
    check_output_grad(model, x, d)?;
    let m_y = model.output_dim();
    let map = kron(&z.transpose(), &DenseMatrix::identity(m_y))?;
    let grad = map.transpose().matvec(&vectorize(d));
    Ok(unvectorize(&grad, m_y, model.feature_dim())?)
}

/// Central differences `(L(M + h E_ij) − L(M − h E_ij)) / 2h` for every entry.
pub fn finite_difference_grad(
    mut loss: impl FnMut(&DenseMatrix) -> f64,
    at: &DenseMatrix,
    step: f64,
) -> Result<DenseMatrix> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(OracleError::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let mut point = at.clone();
    let mut grad = DenseMatrix::zeros(at.rows(), at.cols());
    for row in 0..at.rows() {
        for col in 0..at.cols() {
            let original = point[(row, col)];
            point[(row, col)] = original + step;
            let plus = loss(&point);
            point[(row, col)] = original - step;
            let minus = loss(&point);
            point[(row, col)] = original;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(OracleError::NonFiniteLoss { row, col });
            }
            grad[(row, col)] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(grad)
}

/// `max_ij |a − r| / max(1e-8, |r|)`
pub fn max_relative_error(a: &DenseMatrix, reference: &DenseMatrix) -> f64 {
    assert_eq!(a.shape(), reference.shape(), "shape mismatch");
    a.as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(x, r)| (x - r).abs() / r.abs().max(1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalized_adjacency, Graph, Masks, NormalizedAdjacency};
    use crate::model::{backward, contraction_factor, input_grad, loss_and_output_grad, readout, spectral_forward};
    use crate::spectral::SpectralCache;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        model: EignnModel,
        graph: Graph,
        s: DenseMatrix,
        cache: SpectralCache,
    }

    fn instance(seed: u64, m: usize, n: usize, m_y: usize, gamma: f64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
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
        let graph = Graph::new(n, edges, x, labels, m_y, masks).unwrap();
        let f = DenseMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
        let b = DenseMatrix::from_fn(m_y, m, |_, _| rng.gen_range(-1.0..1.0));
        let model = EignnModel::new(f, b, gamma, 1e-3).unwrap();
        Instance {
            s: normalized_adjacency(&graph),
            cache: SpectralCache::from_graph(&graph).unwrap(),
            model,
            graph,
        }
    }

    fn scalar_model() -> EignnModel {
        EignnModel::new(DenseMatrix::from_rows(&[[1.0]]), DenseMatrix::from_rows(&[[1.0]]), 0.5, 0.1).unwrap()
    }

    #[test]
    fn zero_f_converges_immediately() {
        let inst = instance(0, 3, 5, 2, 1.0);
        let zero = EignnModel::new(DenseMatrix::zeros(3, 3), inst.model.b().clone(), 1.0, 1e-3).unwrap();
        let x = inst.graph.features();
        let (z, report) = iterate_fixed_point(&zero, x, &inst.s, 1e-12, 100).unwrap();
        assert_eq!(report.iterations, 1);
        assert!(report.converged);
        assert_eq!(&z, x);
        assert_eq!(&kron_forward(&zero, x, &inst.s).unwrap(), x);
        assert_eq!(kron_system(&zero, &inst.s).unwrap(), DenseMatrix::identity(15));
    }

    #[test]
    fn scalar_iteration_is_geometric() {
        let model = scalar_model();
        let x = DenseMatrix::from_rows(&[[1.0]]);
        let s = DenseMatrix::from_rows(&[[1.0]]);
        let (z, report) = iterate_fixed_point(&model, &x, &s, 1e-13, 200).unwrap();
        assert!(report.converged);
        assert_abs_diff_eq!(z[(0, 0)], 1.833_333_333_333_333, epsilon = 1e-12);
        let ratio = 0.5 / 1.1;
        for w in report.residual_history.windows(2) {
            assert_abs_diff_eq!(w[1] / w[0], ratio, epsilon = 1e-9);
        }
        let u = kron_system(&model, &s).unwrap();
        assert_abs_diff_eq!(u[(0, 0)], 0.545_454_545_454_545_4, epsilon = 1e-15);
        assert_abs_diff_eq!(kron_forward(&model, &x, &s).unwrap()[(0, 0)], 1.833_333_333_333_333, epsilon = 1e-12);
    }

    #[test]
    fn iteration_limit_is_reported() {
        let model = scalar_model();
        let x = DenseMatrix::from_rows(&[[1.0]]);
        let s = DenseMatrix::from_rows(&[[1.0]]);
        let (_, report) = iterate_fixed_point(&model, &x, &s, 1e-12, 3).unwrap();
        assert!(!report.converged);
        assert_eq!(report.iterations, 3);
        assert_eq!(report.residual_history.len(), 3);
        assert!(iterate_fixed_point(&model, &x, &s, 0.0, 3).is_err());
    }

    #[test]
    fn three_solvers_agree() {
        for seed in 0..10 {
            let inst = instance(seed, 4, 6, 3, 1.0);
            let x = inst.graph.features();
            let spectral = spectral_forward(&inst.model, x, &inst.cache).unwrap().z;
            let kron_z = kron_forward(&inst.model, x, &inst.s).unwrap();
            let (iter_z, report) = iterate_fixed_point(&inst.model, x, &inst.s, 1e-12, 100_000).unwrap();
            assert!(report.converged);
            assert!(spectral.max_abs_diff(&kron_z) <= 1e-10);
            assert!(spectral.max_abs_diff(&iter_z) <= 1e-10);
        }
    }

    #[test]
    fn sparse_and_dense_propagation_iterate_identically() {
        let inst = instance(3, 3, 7, 2, 0.9);
        let x = inst.graph.features();
        let sparse = NormalizedAdjacency::new(&inst.graph);
        let (a, _) = iterate_fixed_point(&inst.model, x, &inst.s, 1e-12, 10_000).unwrap();
        let (b, _) = iterate_fixed_point(&inst.model, x, &sparse, 1e-12, 10_000).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-13);
    }

    #[test]
    fn finite_depth_small_cases() {
        let inst = instance(4, 3, 5, 2, 0.8);
        let x = inst.graph.features();
        assert_eq!(&finite_depth_forward(&inst.model, x, &inst.s, 0).unwrap(), x);
        let g = g_of_f(inst.model.f(), inst.model.eps_f()).unwrap();
        let one = g.matmul(x).matmul(&inst.s).scale(0.8).add(x);
        assert!(finite_depth_forward(&inst.model, x, &inst.s, 1).unwrap().max_abs_diff(&one) < 1e-15);
    }

    #[test]
    fn finite_depth_approaches_the_limit() {
        let inst = instance(5, 4, 8, 2, 1.0);
        let x = inst.graph.features();
        let z = spectral_forward(&inst.model, x, &inst.cache).unwrap().z;
        let cf = contraction_factor(&inst.model, &inst.cache);
        for depth in [10, 50, 200] {
            let zh = finite_depth_forward(&inst.model, x, &inst.s, depth).unwrap();
            let bound = cf.powi(depth as i32 + 1) / (1.0 - cf) * frobenius_norm(x);
            assert!(frobenius_norm(&zh.sub(&z)) <= bound + 1e-12);
        }
    }

    #[test]
    fn commutation_matrix_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (r, c) in [(1, 1), (2, 3), (4, 4), (5, 2), (5, 5)] {
            let m = DenseMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
            assert_eq!(commutation_matrix(r, c).matvec(&vectorize(&m)), vectorize(&m.transpose()));
        }
    }

    #[test]
    fn g_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = DenseMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let j = g_jacobian(&f, 1e-3).unwrap();
        for col in 0..9 {
            let (r, c) = (col % 3, col / 3);
            let at = |h: f64| {
                let mut p = f.clone();
                p[(r, c)] += h;
                vectorize(&g_of_f(&p, 1e-3).unwrap())
            };
            let (plus, minus) = (at(1e-6), at(-1e-6));
            for row in 0..9 {
                let fd = (plus[row] - minus[row]) / 2e-6;
                assert!((fd - j[(row, col)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn kron_gradients_match_spectral_backward() {
        for seed in 0..10 {
            let inst = instance(seed, 3, 4, 2, 1.0);
            let x = inst.graph.features();
            let trace = spectral_forward(&inst.model, x, &inst.cache).unwrap();
            let mask = vec![true; 4];
            let (_, d) = loss_and_output_grad(&trace.logits, inst.graph.labels(), &mask).unwrap();
            let grads = backward(&inst.model, x, &inst.cache, &trace, &d).unwrap();
            assert!(kron_grad_f(&inst.model, x, &inst.s, &d).unwrap().max_abs_diff(&grads.f) <= 1e-8);
            assert!(kron_grad_b(&inst.model, x, &inst.s, &d).unwrap().max_abs_diff(&grads.b) <= 1e-8);
        }
    }

    #[test]
    fn kron_guard_rejects_large_instances() {
        let model = EignnModel::new(DenseMatrix::identity(100), DenseMatrix::zeros(1, 100), 1.0, 1e-6).unwrap();
        let x = DenseMatrix::zeros(100, 51);
        let s = DenseMatrix::identity(51);
        assert!(matches!(
            kron_forward(&model, &x, &s),
            Err(OracleError::SizeGuardExceeded { mn: 5100, limit: 5000 })
        ));
    }

    #[test]
    fn finite_differences_of_simple_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = DenseMatrix::from_fn(3, 4, |_, _| rng.gen_range(-2.0..2.0));
        let ones = finite_difference_grad(|p| p.sum(), &m, DEFAULT_FD_STEP).unwrap();
        assert!(ones.max_abs_diff(&DenseMatrix::from_fn(3, 4, |_, _| 1.0)) < 1e-8);
        let half_sq = finite_difference_grad(|p| 0.5 * p.frobenius_dot(p), &m, DEFAULT_FD_STEP).unwrap();
        assert!(half_sq.max_abs_diff(&m) < 1e-8);
        assert!(matches!(
            finite_difference_grad(|p| if p[(1, 2)] > m[(1, 2)] { f64::NAN } else { 0.0 }, &m, 1e-6),
            Err(OracleError::NonFiniteLoss { row: 1, col: 2 })
        ));
        assert!(finite_difference_grad(|p| p.sum(), &m, 0.0).is_err());
    }

    fn pipeline_loss(model: &EignnModel, x: &DenseMatrix, cache: &SpectralCache, labels: &[Option<usize>]) -> f64 {
        let mask = vec![true; labels.len()];
        let trace = spectral_forward(model, x, cache).unwrap();
        loss_and_output_grad(&trace.logits, labels, &mask).unwrap().0
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            let inst = instance(seed, 4, 6, 3, 1.0);
            let x = inst.graph.features();
            let labels = inst.graph.labels();
            let trace = spectral_forward(&inst.model, x, &inst.cache).unwrap();
            let (_, d) = loss_and_output_grad(&trace.logits, labels, &[true; 6]).unwrap();
            let grads = backward(&inst.model, x, &inst.cache, &trace, &d).unwrap();
            let dx = input_grad(&inst.model, &inst.cache, &trace, &d).unwrap();
            let m = &inst.model;
            let fd_f = finite_difference_grad(
                |f| pipeline_loss(&EignnModel::new(f.clone(), m.b().clone(), m.gamma(), m.eps_f()).unwrap(), x, &inst.cache, labels),
                m.f(),
                DEFAULT_FD_STEP,
            )
            .unwrap();
            let fd_b = finite_difference_grad(
                |b| pipeline_loss(&EignnModel::new(m.f().clone(), b.clone(), m.gamma(), m.eps_f()).unwrap(), x, &inst.cache, labels),
                m.b(),
                DEFAULT_FD_STEP,
            )
            .unwrap();
            let fd_x = finite_difference_grad(|x| pipeline_loss(m, x, &inst.cache, labels), x, DEFAULT_FD_STEP).unwrap();
            assert!(max_relative_error(&grads.f, &fd_f) <= 1e-5, "F seed {seed}: {}", max_relative_error(&grads.f, &fd_f));
            assert!(max_relative_error(&grads.b, &fd_b) <= 1e-5, "B seed {seed}");
            assert!(max_relative_error(&dx, &fd_x) <= 1e-5, "X seed {seed}");
        }
    }

    #[test]
    fn iterative_gradients_match_closed_form() {
        let inst = instance(9, 4, 7, 3, 0.95);
        let x = inst.graph.features();
        let labels = inst.graph.labels();
        let mask = vec![true; 7];
        let model = inst.model.clone().with_bias(vec![0.1, -0.2, 0.3]).unwrap();
        let trace = spectral_forward(&model, x, &inst.cache).unwrap();
        let (_, d) = loss_and_output_grad(&trace.logits, labels, &mask).unwrap();
        let closed = backward(&model, x, &inst.cache, &trace, &d).unwrap();
        let dx = input_grad(&model, &inst.cache, &trace, &d).unwrap();
        let iterative = fixed_point_gradients(&model, x, &inst.s, 1e-13, 100_000, |z| {
            Ok(loss_and_output_grad(&readout(&model, z), labels, &mask)?.1)
        })
        .unwrap();
        assert!(iterative.forward.converged && iterative.adjoint.converged);
        assert!(iterative.grads.f.max_abs_diff(&closed.f) < 1e-10);
        assert!(iterative.grads.b.max_abs_diff(&closed.b) < 1e-10);
        assert_eq!(iterative.grads.bias.as_ref().map(Vec::len), Some(3));
        assert!(iterative.input_grad.max_abs_diff(&dx) < 1e-10);
    }

    #[test]
    fn unrolled_gradients_match_finite_differences() {
        let inst = instance(10, 3, 6, 2, 1.0);
        let x = inst.graph.features();
        let labels = inst.graph.labels();
        let mask = vec![true; 6];
        for depth in [0, 1, 5, 17] {
            let m = &inst.model;
            let loss = |model: &EignnModel| {
                let z = finite_depth_forward(model, x, &inst.s, depth).unwrap();
                loss_and_output_grad(&readout(model, &z), labels, &mask).unwrap().0
            };
            let unrolled = finite_depth_gradients(m, x, &inst.s, depth, |z| {
                Ok(loss_and_output_grad(&readout(m, z), labels, &mask)?.1)
            })
            .unwrap();
            let fd_f = finite_difference_grad(
                |f| loss(&EignnModel::new(f.clone(), m.b().clone(), m.gamma(), m.eps_f()).unwrap()),
                m.f(),
                DEFAULT_FD_STEP,
            )
            .unwrap();
            let scale = fd_f.max_abs().max(1e-12);
            assert!(unrolled.grads.f.max_abs_diff(&fd_f) / scale < 1e-6, "depth {depth}");
            assert!(unrolled.z.max_abs_diff(&finite_depth_forward(m, x, &inst.s, depth).unwrap()) == 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn residuals_contract_geometrically(seed in any::<u64>(), m in 1usize..6, n in 1usize..9, gamma in 0.1f64..=1.0) {
            let inst = instance(seed, m, n, 2, gamma);
            let cf = contraction_factor(&inst.model, &inst.cache);
            let (_, report) = iterate_fixed_point(&inst.model, inst.graph.features(), &inst.s, 1e-12, 5000).unwrap();
            for w in report.residual_history.windows(2) {
                if w[0] > 1e-300 {
                    prop_assert!(w[1] / w[0] <= cf + 1e-6);
                }
            }
        }
    }
}
