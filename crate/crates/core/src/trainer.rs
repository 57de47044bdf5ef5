//! Full-batch training, evaluation, parameter initialization and the
//! on-disk eigendecomposition cache.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{Graph, NormalizedAdjacency};
use crate::linalg::{DenseMatrix, LinalgError};
use crate::model::{
    backward, loss_and_output_grad, predictions, readout, spectral_forward, EignnModel, Gradients, ModelError,
    DEFAULT_EPS_F,
};
use crate::oracle::{self, OracleError};
use crate::spectral::{CacheError, SpectralCache};

pub const CSV_HEADER: &str = "epoch,train_loss,train_acc,val_acc,epoch_ms";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} mask is empty")]
    EmptyMask(&'static str),
    #[error("training diverged at epoch {epoch}: loss is not finite (try a smaller learning rate)")]
    NonFiniteLoss { epoch: usize },
    #[error("cache file is corrupt: {0}")]
    CacheCorrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<CacheError> for TrainError {
    fn from(e: CacheError) -> Self {
        match e {
            CacheError::Io(e) => TrainError::Io(e),
            CacheError::Linalg(e) => TrainError::Linalg(e),
            other => TrainError::CacheCorrupt(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    GradientDescent,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::GradientDescent => "gd",
            Optimizer::Adam { .. } => "adam",
        }
    }
}

/// How the hidden state and its gradient are computed each epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Solver {
    /// Eigendecomposition-based closed form.
    ClosedForm,
    /// Iterate forward and adjoint equations until the step is below `tol`.
    FixedPoint { tol: f64, max_iters: usize },
    /// Unroll exactly `depth` layers and backpropagate through them.
    FiniteDepth { depth: usize },
}

impl Solver {
    pub fn name(&self) -> String {
        match self {
            Solver::ClosedForm => "closed-form".into(),
            Solver::FixedPoint { tol, .. } => format!("fixed-point(tol={tol:e})"),
            Solver::FiniteDepth { depth } => format!("finite-depth(H={depth})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub eps_f: f64,
    pub seed: u64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub cache_path: Option<PathBuf>,
    pub optimizer: Optimizer,
    /// Adds a per-class bias to the readout.
    pub output_bias: bool,
    pub solver: Solver,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.5,
            weight_decay: 5e-6,
            gamma: 1.0,
            eps_f: DEFAULT_EPS_F,
            seed: 0,
            patience: 100,
            cache_path: None,
            optimizer: Optimizer::GradientDescent,
            output_bias: false,
            solver: Solver::ClosedForm,
        }
    }
}

impl TrainConfig {
    /// Settings that reach full accuracy on the chains benchmark for every
    /// class count and length tried: Adam at lr 0.01 with an output bias.
    pub fn chains() -> Self {
        Self {
            epochs: 1000,
            learning_rate: 0.01,
            patience: 200,
            optimizer: Optimizer::adam(),
            output_bias: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.eps_f > 0.0 && self.eps_f.is_finite()) {
            return fail(format!("eps_f must be positive, got {}", self.eps_f));
        }
        if self.patience < 1 {
            return fail("patience must be at least 1".into());
        }
        if let Solver::FixedPoint { tol, max_iters } = self.solver {
            if tol.is_nan() || tol <= 0.0 || max_iters < 1 {
                return fail(format!("fixed-point solver needs tol > 0 and max_iters >= 1, got {tol}, {max_iters}"));
            }
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return fail("adam needs betas in [0, 1) and eps > 0".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    /// No cache path; decomposed in memory.
    Computed,
    /// Loaded from a file whose hash matched.
    Hit,
    /// No file existed; decomposed and written.
    Built,
    /// The file belonged to another graph; decomposed and overwritten.
    Rebuilt,
}

/// Loads the decomposition of `S` from `cache_path` when it was built for
/// this graph, and otherwise computes (and, given a path, stores) it.
pub fn build_or_load_cache(graph: &Graph, cache_path: Option<&Path>) -> Result<(SpectralCache, CacheStatus)> {
    let Some(path) = cache_path else {
        return Ok((SpectralCache::from_graph(graph)?, CacheStatus::Computed));
    };
    let status = if path.exists() {
        let cached = SpectralCache::read_from(path)?;
        if cached.content_hash() == graph.content_hash() && cached.num_nodes() == graph.num_nodes() {
            return Ok((cached, CacheStatus::Hit));
        }
        CacheStatus::Rebuilt
    } else {
        CacheStatus::Built
    };
    let cache = SpectralCache::from_graph(graph)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    cache.write_to(path)?;
    Ok((cache, status))
}

/// `F` (`m × m`) and `B` (`m_y × m`) with entries uniform in `[−1/√m, 1/√m]`.
pub fn init_params(m: usize, m_y: usize, seed: u64) -> (DenseMatrix, DenseMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (m as f64).sqrt();
    let f = DenseMatrix::from_fn(m, m, |_, _| rng.gen_range(-bound..=bound));
    let b = DenseMatrix::from_fn(m_y, m, |_, _| rng.gen_range(-bound..=bound));
    (f, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub epoch_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_val_acc: f64,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// `None` when the graph has no test nodes.
    pub test_acc_at_best_val: Option<f64>,
    pub preprocessing_ms: f64,
    pub cache_status: CacheStatus,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn mean_epoch_ms(&self) -> f64 {
        self.epochs.iter().map(|e| e.epoch_ms).sum::<f64>() / self.epochs.len().max(1) as f64
    }

    pub fn median_epoch_ms(&self) -> f64 {
        let mut times: Vec<f64> = self.epochs.iter().map(|e| e.epoch_ms).collect();
        if times.is_empty() {
            return 0.0;
        }
        times.sort_by(f64::total_cmp);
        let mid = times.len() / 2;
        if times.len() % 2 == 1 {
            times[mid]
        } else {
            0.5 * (times[mid - 1] + times[mid])
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.4}",
                e.epoch, e.train_loss, e.train_acc, e.val_acc, e.epoch_ms
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Fraction of masked nodes whose argmax logit matches the label.
fn masked_accuracy(pred: &[usize], labels: &[Option<usize>], mask: &[bool]) -> Option<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for ((p, l), &m) in pred.iter().zip(labels).zip(mask) {
        if m {
            total += 1;
            if Some(*p) == *l {
                correct += 1;
            }
        }
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

/// `(accuracy, loss)` on the masked nodes.
pub fn evaluate(model: &EignnModel, graph: &Graph, cache: &SpectralCache, mask: &[bool]) -> Result<(f64, f64)> {
    evaluate_with_features(model, graph, graph.features(), cache, mask)
}

/// [`evaluate`] with the graph's features replaced by `x`.
pub fn evaluate_with_features(
    model: &EignnModel,
    graph: &Graph,
    x: &DenseMatrix,
    cache: &SpectralCache,
    mask: &[bool],
) -> Result<(f64, f64)> {
    let logits = spectral_forward(model, x, cache)?.logits;
    score(&logits, graph.labels(), mask)
}

fn score(logits: &DenseMatrix, labels: &[Option<usize>], mask: &[bool]) -> Result<(f64, f64)> {
    let (loss, _) = loss_and_output_grad(logits, labels, mask).map_err(|e| match e {
        ModelError::EmptyMask => TrainError::EmptyMask("evaluation"),
        other => other.into(),
    })?;
    let acc = masked_accuracy(&predictions(logits), labels, mask).expect("mask is nonempty");
    Ok((acc, loss))
}

/// Builds (or loads) the cache, then trains with [`train_with_cache`].
pub fn train(graph: &Graph, config: &TrainConfig) -> Result<(EignnModel, TrainReport)> {
    config.validate()?;
    let start = Instant::now();
    let (cache, status) = build_or_load_cache(graph, config.cache_path.as_deref())?;
    let preprocessing_ms = start.elapsed().as_secs_f64() * 1e3;
    let (model, mut report) = train_with_cache(graph, &cache, config)?;
    report.preprocessing_ms = preprocessing_ms;
    report.cache_status = status;
    Ok((model, report))
}

/// The initial model for `graph` under `config`.
pub fn initial_model(graph: &Graph, config: &TrainConfig) -> Result<EignnModel> {
    let (f, b) = init_params(graph.feature_dim(), graph.num_classes(), config.seed);
    let model = EignnModel::new(f, b, config.gamma, config.eps_f)?;
    Ok(if config.output_bias {
        model.with_bias(vec![0.0; graph.num_classes()])?
    } else {
        model
    })
}

struct AdamState {
    t: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    fn new() -> Self {
        Self {
            t: 0,
            moments: Vec::new(),
        }
    }

    /// Bias-corrected Adam direction for each gradient slice, in order.
    fn directions(&mut self, grads: &[&[f64]], beta1: f64, beta2: f64, eps: f64) -> Vec<Vec<f64>> {
        self.t += 1;
        if self.moments.is_empty() {
            self.moments = grads.iter().map(|g| (vec![0.0; g.len()], vec![0.0; g.len()])).collect();
        }
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        grads
            .iter()
            .zip(self.moments.iter_mut())
            .map(|(g, (m, v))| {
                g.iter()
                    .zip(m.iter_mut().zip(v.iter_mut()))
                    .map(|(&g, (m, v))| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        (*m / c1) / ((*v / c2).sqrt() + eps)
                    })
                    .collect()
            })
            .collect()
    }
}

/// One forward/backward evaluation under the configured solver.
fn forward_backward(
    model: &EignnModel,
    graph: &Graph,
    cache: &SpectralCache,
    propagation: Option<&NormalizedAdjacency>,
    solver: Solver,
) -> Result<(DenseMatrix, f64, Gradients)> {
    let x = graph.features();
    let labels = graph.labels();
    let mask = &graph.masks().train;
    let loss_grad = |logits: &DenseMatrix| loss_and_output_grad(logits, labels, mask);
    match solver {
        Solver::ClosedForm => {
            let trace = spectral_forward(model, x, cache)?;
            let (loss, d) = loss_grad(&trace.logits)?;
            let grads = backward(model, x, cache, &trace, &d)?;
            Ok((trace.logits, loss, grads))
        }
        Solver::FixedPoint { tol, max_iters } => {
            let s = propagation.expect("propagation operator is built for iterative solvers");
            let mut loss = 0.0;
            let result = oracle::fixed_point_gradients(model, x, s, tol, max_iters, |z| {
                let (l, d) = loss_grad(&readout(model, z))?;
                loss = l;
                Ok(d)
            })?;
            Ok((readout(model, &result.z), loss, result.grads))
        }
        Solver::FiniteDepth { depth } => {
            let s = propagation.expect("propagation operator is built for iterative solvers");
            let mut loss = 0.0;
            let result = oracle::finite_depth_gradients(model, x, s, depth, |z| {
                let (l, d) = loss_grad(&readout(model, z))?;
                loss = l;
                Ok(d)
            })?;
            Ok((readout(model, &result.z), loss, result.grads))
        }
    }
}

/// Full-batch training against a prepared cache. Each epoch computes the
/// loss on the train mask, records train and validation accuracy of the
/// current parameters, then takes one optimizer step. The returned model is
/// the snapshot with the best validation accuracy (earliest on ties).
pub fn train_with_cache(graph: &Graph, cache: &SpectralCache, config: &TrainConfig) -> Result<(EignnModel, TrainReport)> {
    config.validate()?;
    if cache.num_nodes() != graph.num_nodes() || cache.content_hash() != graph.content_hash() {
        return Err(TrainError::CacheCorrupt("cache was built for a different graph".into()));
    }
    let masks = graph.masks();
    let (n_train, n_val, n_test) = masks.counts();
    if n_train == 0 {
        return Err(TrainError::EmptyMask("train"));
    }
    if n_val == 0 {
        return Err(TrainError::EmptyMask("validation"));
    }
    let propagation = match config.solver {
        Solver::ClosedForm => None,
        _ => Some(NormalizedAdjacency::new(graph)),
    };
    let labels = graph.labels();
    let mut model = initial_model(graph, config)?;
    let mut adam = AdamState::new();
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Option<f64>, EignnModel)> = None;
    let mut stalled = 0;
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let (logits, loss, grads) = match forward_backward(&model, graph, cache, propagation.as_ref(), config.solver) {
            Ok(out) => out,
            Err(TrainError::Model(ModelError::NonFiniteResult(_))) => {
                return Err(TrainError::NonFiniteLoss { epoch })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        let step = match config.optimizer {
            Optimizer::GradientDescent => grads.descent_step(&model, config.learning_rate, config.weight_decay),
            Optimizer::Adam { beta1, beta2, eps } => {
                let mut slices: Vec<&[f64]> = vec![grads.f.as_slice(), grads.b.as_slice()];
                if let Some(b) = &grads.bias {
                    slices.push(b);
                }
                let dirs = adam.directions(&slices, beta1, beta2, eps);
                let direction = Gradients {
                    f: DenseMatrix::from_vec(grads.f.rows(), grads.f.cols(), dirs[0].clone())?,
                    b: DenseMatrix::from_vec(grads.b.rows(), grads.b.cols(), dirs[1].clone())?,
                    bias: grads.bias.as_ref().map(|_| dirs[2].clone()),
                };
                direction.descent_step(&model, config.learning_rate, config.weight_decay)
            }
        };
        let previous = model.clone();
        model.apply_step(&step);
        let epoch_ms = start.elapsed().as_secs_f64() * 1e3;
        if !model.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }

        let pred = predictions(&logits);
        let train_acc = masked_accuracy(&pred, labels, &masks.train).unwrap_or(0.0);
        let val_acc = masked_accuracy(&pred, labels, &masks.val).unwrap_or(0.0);
        records.push(EpochRecord {
            epoch,
            train_loss: loss,
            train_acc,
            val_acc,
            epoch_ms,
        });
        if best.as_ref().is_none_or(|(b, ..)| val_acc > *b) {
            let test_acc = (n_test > 0).then(|| masked_accuracy(&pred, labels, &masks.test)).flatten();
            best = Some((val_acc, epoch, test_acc, previous));
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_val_acc, best_epoch, test_acc_at_best_val, best_model) = best.expect("at least one epoch ran");
    Ok((
        best_model,
        TrainReport {
            epochs: records,
            best_val_acc,
            best_epoch,
            test_acc_at_best_val,
            preprocessing_ms: 0.0,
            cache_status: CacheStatus::Computed,
            stopped_early,
        },
    ))
}
