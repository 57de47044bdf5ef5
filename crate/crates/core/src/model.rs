//! The implicit layer and its closed-form training path.
//!
//! The hidden state is the fixed point `Z = γ·g(F)·Z·S + X`, with
//! `g(F) = FᵀF / (‖FᵀF‖_F + ε_F)`. With `g(F) = Q_F Λ_F Q_Fᵀ` and
//! `S = Q_S Λ_S Q_Sᵀ` the fixed point is
//!
//! ```text
//! Z = Q_F (G ∘ (Q_Fᵀ X Q_S)) Q_Sᵀ,   G_ij = 1 / (1 − γ λ_F,i λ_S,j)
//! ```
//!
//! and the output is `B·Z` (plus an optional per-class bias). The backward
//! pass reuses `Q_F`, `G` and `Z·Q_S` from the [`ForwardTrace`], so no
//! eigendecomposition is repeated and no `mn × mn` matrix is ever formed.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::linalg::{frobenius_norm, sym_eig, DenseMatrix, LinalgError, SymmetricEigen};
use crate::spectral::SpectralCache;

pub const MODEL_MAGIC: &[u8; 4] = b"EIGM";
/// Layout without an output bias.
pub const MODEL_VERSION_LINEAR: u32 = 1;
/// Layout with `m_y` bias values appended after `B`.
pub const MODEL_VERSION_AFFINE: u32 = 2;

pub const DEFAULT_EPS_F: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteResult(&'static str),
    #[error("trace does not match inputs: {0}")]
    TraceMismatch(String),
    #[error("mask selects no nodes")]
    EmptyMask,
    #[error("node {0} is masked but unlabeled")]
    UnlabeledNode(usize),
    #[error("model file is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Parameters `F` (`m × m`), `B` (`m_y × m`), optional bias (`m_y`), and the
/// hyperparameters `γ ∈ (0, 1]`, `ε_F > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EignnModel {
    f: DenseMatrix,
    b: DenseMatrix,
    bias: Option<Vec<f64>>,
    gamma: f64,
    eps_f: f64,
}

impl EignnModel {
    pub fn new(f: DenseMatrix, b: DenseMatrix, gamma: f64, eps_f: f64) -> Result<Self> {
        let model = Self {
            f,
            b,
            bias: None,
            gamma,
            eps_f,
        };
        model.validate()?;
        Ok(model)
    }

    /// Adds a per-class output bias.
    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        self.bias = Some(bias);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(ModelError::InvalidHyperparameter(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.eps_f > 0.0 && self.eps_f.is_finite()) {
            return Err(ModelError::InvalidHyperparameter(format!(
                "eps_f must be positive, got {}",
                self.eps_f
            )));
        }
        if !self.f.is_square() {
            return Err(ModelError::DimensionMismatch(format!(
                "F must be square, got {:?}",
                self.f.shape()
            )));
        }
        if self.b.cols() != self.f.rows() {
            return Err(ModelError::DimensionMismatch(format!(
                "B is {:?} but F is {:?}",
                self.b.shape(),
                self.f.shape()
            )));
        }
        if let Some(bias) = &self.bias {
            if bias.len() != self.b.rows() {
                return Err(ModelError::DimensionMismatch(format!(
                    "bias has {} entries for {} outputs",
                    bias.len(),
                    self.b.rows()
                )));
            }
        }
        let bias_finite = self.bias.iter().flatten().all(|v| v.is_finite());
        if !(self.f.is_finite() && self.b.is_finite() && bias_finite) {
            return Err(ModelError::NonFiniteResult("parameters"));
        }
        Ok(())
    }

    pub fn f(&self) -> &DenseMatrix {
        &self.f
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn eps_f(&self) -> f64 {
        self.eps_f
    }

    /// Feature dimension `m`.
    pub fn feature_dim(&self) -> usize {
        self.f.rows()
    }

    /// Output dimension `m_y`.
    pub fn output_dim(&self) -> usize {
        self.b.rows()
    }

    /// Two models are the same parameter point when every value matches.
    pub fn parameter_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let hyper = [self.gamma, self.eps_f];
        let values = self
            .f
            .as_slice()
            .iter()
            .chain(self.b.as_slice())
            .chain(self.bias.iter().flatten())
            .chain(hyper.iter());
        for v in values {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Applies `P ← P − lr·(∇P + weight_decay·P)` to every parameter.
    pub fn apply_step(&mut self, step: &Gradients) {
        self.f.axpy(-1.0, &step.f);
        self.b.axpy(-1.0, &step.b);
        if let (Some(bias), Some(db)) = (self.bias.as_mut(), step.bias.as_ref()) {
            for (p, d) in bias.iter_mut().zip(db) {
                *p -= d;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.f.is_finite() && self.b.is_finite() && self.bias.iter().flatten().all(|v| v.is_finite())
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            let version = if self.bias.is_some() {
                MODEL_VERSION_AFFINE
            } else {
                MODEL_VERSION_LINEAR
            };
            w.write_all(MODEL_MAGIC)?;
            w.write_all(&version.to_le_bytes())?;
            w.write_all(&(self.feature_dim() as u64).to_le_bytes())?;
            w.write_all(&(self.output_dim() as u64).to_le_bytes())?;
            w.write_all(&self.gamma.to_le_bytes())?;
            w.write_all(&self.eps_f.to_le_bytes())?;
            for v in self.f.as_slice().iter().chain(self.b.as_slice()).chain(self.bias.iter().flatten()) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        let file_len = file.metadata()?.len();
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(ModelError::Corrupt(format!("bad magic {magic:?}")));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        let with_bias = match version {
            MODEL_VERSION_LINEAR => false,
            MODEL_VERSION_AFFINE => true,
            v => return Err(ModelError::Corrupt(format!("unsupported version {v}"))),
        };
        let m = u64::from_le_bytes(read_array(&mut r)?);
        let m_y = u64::from_le_bytes(read_array(&mut r)?);
        let count = m
            .checked_mul(m)
            .and_then(|mm| m_y.checked_mul(m).and_then(|bm| mm.checked_add(bm)))
            .and_then(|c| c.checked_add(if with_bias { m_y } else { 0 }));
        let expected = count.and_then(|c| c.checked_mul(8)).and_then(|b| b.checked_add(40));
        if expected != Some(file_len) {
            return Err(ModelError::Corrupt(format!(
                "length {file_len} does not match m = {m}, m_y = {m_y}"
            )));
        }
        let (m, m_y) = (m as usize, m_y as usize);
        let gamma = f64::from_le_bytes(read_array(&mut r)?);
        let eps_f = f64::from_le_bytes(read_array(&mut r)?);
        let mut read_values = |len: usize| -> Result<Vec<f64>> {
            (0..len).map(|_| Ok(f64::from_le_bytes(read_array(&mut r)?))).collect()
        };
        let f = DenseMatrix::from_vec(m, m, read_values(m * m)?)?;
        let b = DenseMatrix::from_vec(m_y, m, read_values(m_y * m)?)?;
        let bias = if with_bias { Some(read_values(m_y)?) } else { None };
        let model = Self::new(f, b, gamma, eps_f)?;
        match bias {
            Some(bias) => model.with_bias(bias),
            None => Ok(model),
        }
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => ModelError::Corrupt("truncated file".into()),
        _ => ModelError::Io(e),
    })
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

/// `g(F) = FᵀF / (‖FᵀF‖_F + ε_F)`, exactly symmetric.
pub fn g_of_f(f: &DenseMatrix, eps_f: f64) -> Result<DenseMatrix> {
    Ok(g_parts(f, eps_f)?.0)
}

/// `(g(F), ‖FᵀF‖_F)`
fn g_parts(f: &DenseMatrix, eps_f: f64) -> Result<(DenseMatrix, f64)> {
    if !f.is_square() {
        return Err(LinalgError::NonSquare {
            rows: f.rows(),
            cols: f.cols(),
        }
        .into());
    }
    let gram = f.t_matmul(f).symmetrized();
    let norm = frobenius_norm(&gram);
    Ok((gram.scale(1.0 / (norm + eps_f)), norm))
}

/// Gradient of `L` with respect to `F`, given `R` such that `∂L/∂g(F) = γ·R`:
///
/// ```text
/// ∇F = γ/(‖N‖+ε) · F · ((R + Rᵀ) − 2⟨N, R⟩/(‖N‖² + ε‖N‖) · N),   N = FᵀF
/// ```
///
/// The second term vanishes with `N`; at `N = 0` it is dropped rather than
/// evaluated as `0/0`.
pub fn grad_f_from_r(f: &DenseMatrix, r: &DenseMatrix, gamma: f64, eps_f: f64) -> DenseMatrix {
    let gram = f.t_matmul(f).symmetrized();
    let norm = frobenius_norm(&gram);
    let mut inner = r.add(&r.transpose());
    if norm > 0.0 {
        let ratio = 2.0 * gram.frobenius_dot(r) / (norm * norm + eps_f * norm);
        inner.axpy(-ratio, &gram);
    }
    f.matmul(&inner).scale(gamma / (norm + eps_f))
}

/// Intermediates of [`spectral_forward`] reused by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Eigendecomposition of `g(F)`.
    pub eig_f: SymmetricEigen,
    /// `‖FᵀF‖_F`
    pub gram_norm: f64,
    /// `G`, `m × n`.
    pub resolvent: DenseMatrix,
    /// `Z·Q_S = Q_F (G ∘ (Q_Fᵀ X Q_S))`, `m × n`.
    pub z_spectral: DenseMatrix,
    /// The fixed point `Z`, `m × n`.
    pub z: DenseMatrix,
    /// `B·Z (+ bias)`, `m_y × n`.
    pub logits: DenseMatrix,
}

/// Parameter gradients, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub f: DenseMatrix,
    pub b: DenseMatrix,
    pub bias: Option<Vec<f64>>,
}

impl Gradients {
    /// `lr·(self + weight_decay·P)` for each parameter `P` of `model`.
    pub fn descent_step(&self, model: &EignnModel, lr: f64, weight_decay: f64) -> Gradients {
        let combine = |g: &DenseMatrix, p: &DenseMatrix| {
            let mut out = g.clone();
            out.axpy(weight_decay, p);
            out.scale(lr)
        };
        Gradients {
            f: combine(&self.f, model.f()),
            b: combine(&self.b, model.b()),
            bias: self.bias.as_ref().map(|g| {
                g.iter()
                    .zip(model.bias().unwrap_or(&[]))
                    .map(|(g, p)| lr * (g + weight_decay * p))
                    .collect()
            }),
        }
    }
}

fn apply_readout(model: &EignnModel, z: &DenseMatrix) -> DenseMatrix {
    let mut logits = model.b.matmul(z);
    if let Some(bias) = &model.bias {
        for (c, &b) in bias.iter().enumerate() {
            logits.row_mut(c).iter_mut().for_each(|v| *v += b);
        }
    }
    logits
}

/// `B·Z (+ bias)` for an arbitrary hidden state, e.g. one from an oracle solver.
pub fn readout(model: &EignnModel, z: &DenseMatrix) -> DenseMatrix {
    apply_readout(model, z)
}

/// Closed-form forward pass.
pub fn spectral_forward(model: &EignnModel, x: &DenseMatrix, cache: &SpectralCache) -> Result<ForwardTrace> {
    let m = model.feature_dim();
    if x.shape() != (m, cache.num_nodes()) {
        return Err(ModelError::DimensionMismatch(format!(
            "X is {:?}, expected {m}x{}",
            x.shape(),
            cache.num_nodes()
        )));
    }
    let (g, gram_norm) = g_parts(&model.f, model.eps_f)?;
    let eig_f = sym_eig(&g)?;
    let gamma = model.gamma;
    let lambda_s = cache.eigenvalues();
    let resolvent = DenseMatrix::from_fn(m, cache.num_nodes(), |i, j| {
        1.0 / (1.0 - gamma * eig_f.eigenvalues[i] * lambda_s[j])
    });
    let q_f = &eig_f.eigenvectors;
    let inner = cache.project(&q_f.t_matmul(x)).hadamard(&resolvent);
    let z_spectral = q_f.matmul(&inner);
    let z = cache.unproject(&z_spectral);
    let logits = apply_readout(model, &z);
    if !z.is_finite() || !logits.is_finite() {
        return Err(ModelError::NonFiniteResult("forward pass"));
    }
    Ok(ForwardTrace {
        eig_f,
        gram_norm,
        resolvent,
        z_spectral,
        z,
        logits,
    })
}

fn check_trace(model: &EignnModel, cache: &SpectralCache, trace: &ForwardTrace, d: &DenseMatrix) -> Result<()> {
    let m = model.feature_dim();
    let n = cache.num_nodes();
    if trace.z.shape() != (m, n) || trace.resolvent.shape() != (m, n) || trace.eig_f.dim() != m {
        return Err(ModelError::TraceMismatch(format!(
            "trace holds Z {:?}, model/cache expect {m}x{n}",
            trace.z.shape()
        )));
    }
    if d.shape() != trace.logits.shape() || d.rows() != model.output_dim() {
        return Err(ModelError::TraceMismatch(format!(
            "output gradient is {:?}, logits are {:?}",
            d.shape(),
            trace.logits.shape()
        )));
    }
    Ok(())
}

/// `Q_F (G ∘ (Q_Fᵀ Bᵀ D Q_S))`: the adjoint state in the eigenbasis of `S`.
fn adjoint_spectral(model: &EignnModel, cache: &SpectralCache, trace: &ForwardTrace, d: &DenseMatrix) -> DenseMatrix {
    let q_f = &trace.eig_f.eigenvectors;
    let v = model.b.t_matmul(d);
    let inner = cache.project(&q_f.t_matmul(&v)).hadamard(&trace.resolvent);
    q_f.matmul(&inner)
}

/// Gradients of the loss with respect to `F`, `B` and the bias, given
/// `D = ∂L/∂logits`.
pub fn backward(
    model: &EignnModel,
    x: &DenseMatrix,
    cache: &SpectralCache,
    trace: &ForwardTrace,
    d: &DenseMatrix,
) -> Result<Gradients> {
    check_trace(model, cache, trace, d)?;
    if x.shape() != trace.z.shape() {
        return Err(ModelError::TraceMismatch(format!(
            "X is {:?}, trace Z is {:?}",
            x.shape(),
            trace.z.shape()
        )));
    }
    let adjoint = adjoint_spectral(model, cache, trace, d);
    // R = A Q_Sᵀ S Zᵀ = (A Λ_S)(Z Q_S)ᵀ
    let r = adjoint
        .scale_columns(cache.eigenvalues())
        .matmul_t(&trace.z_spectral);
    let grad_f = grad_f_from_r(&model.f, &r, model.gamma, model.eps_f);
    let grad_b = d.matmul_t(&trace.z);
    let grad_bias = model.bias.as_ref().map(|_| d.row_sums());
    Ok(Gradients {
        f: grad_f,
        b: grad_b,
        bias: grad_bias,
    })
}

/// `∂L/∂X = Q_F (G ∘ (Q_Fᵀ Bᵀ D Q_S)) Q_Sᵀ`
pub fn input_grad(
    model: &EignnModel,
    cache: &SpectralCache,
    trace: &ForwardTrace,
    d: &DenseMatrix,
) -> Result<DenseMatrix> {
    check_trace(model, cache, trace, d)?;
    Ok(cache.unproject(&adjoint_spectral(model, cache, trace, d)))
}

/// `γ · ‖g(F)‖_F · max|λ_S|`, the contraction factor of the layer map.
pub fn contraction_factor(model: &EignnModel, cache: &SpectralCache) -> f64 {
    let (g, _) = g_parts(&model.f, model.eps_f).expect("F is square by construction");
    model.gamma * frobenius_norm(&g) * cache.max_abs_eigenvalue()
}

/// Mean softmax cross-entropy over the masked nodes and its gradient with
/// respect to the logits (zero on unmasked columns).
pub fn loss_and_output_grad(
    logits: &DenseMatrix,
    labels: &[Option<usize>],
    mask: &[bool],
) -> Result<(f64, DenseMatrix)> {
    let (classes, n) = logits.shape();
    if labels.len() != n || mask.len() != n {
        return Err(ModelError::DimensionMismatch(format!(
            "{} labels / {} mask entries for {n} nodes",
            labels.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(ModelError::EmptyMask);
    }
    let inv = 1.0 / count as f64;
    let mut d = DenseMatrix::zeros(classes, n);
    let mut loss = 0.0;
    let mut column = vec![0.0; classes];
    for j in (0..n).filter(|&j| mask[j]) {
        let label = labels[j].ok_or(ModelError::UnlabeledNode(j))?;
        if label >= classes {
            return Err(ModelError::DimensionMismatch(format!(
                "node {j} has class {label} but there are {classes} outputs"
            )));
        }
        for (c, v) in column.iter_mut().enumerate() {
            *v = logits[(c, j)];
        }
        let top = (1..classes).fold(0, |b, c| if column[c] > column[b] { c } else { b });
        let max = column[top];
        // log Σ exp = max + log1p(Σ_{c≠top} exp(v_c − max)), exact for saturated columns
        let rest: f64 = (0..classes)
            .filter(|&c| c != top)
            .map(|c| (column[c] - max).exp())
            .sum();
        let log_rest = rest.ln_1p();
        let log_norm = max + log_rest;
        loss += (max - column[label]) + log_rest;
        for c in 0..classes {
            let p = (column[c] - log_norm).exp();
            d[(c, j)] = (p - if c == label { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok((loss * inv, d))
}

/// Index of the largest logit in each column; ties go to the lowest class.
pub fn predictions(logits: &DenseMatrix) -> Vec<usize> {
    (0..logits.cols())
        .map(|j| {
            let mut best = 0;
            for c in 1..logits.rows() {
                if logits[(c, j)] > logits[(best, j)] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
