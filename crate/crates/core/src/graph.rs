//! Graphs, the normalized adjacency `S = D^{-1/2}(A+I)D^{-1/2}`, the
//! synthetic chains dataset, and plain-text dataset files.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::DenseMatrix;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("invalid chains spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible split: {train} train nodes cannot cover {classes} classes")]
    InfeasibleSplit { train: usize, classes: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("node id {id} out of range for {n} nodes")]
    DanglingNodeId { id: usize, n: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Disjoint train/validation/test node masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn empty(n: usize) -> Self {
        Self {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        }
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |m: &[bool]| m.iter().filter(|&&b| b).count();
        (c(&self.train), c(&self.val), c(&self.test))
    }
}

/// Undirected graph with node features (one column per node), optional
/// labels and split masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    features: DenseMatrix,
    labels: Vec<Option<usize>>,
    num_classes: usize,
    masks: Masks,
}

impl Graph {
    /// Validates and normalizes the inputs. Edges are stored as sorted,
    /// deduplicated `(u, v)` pairs with `u < v`; self-loops are dropped.
    pub fn new(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: DenseMatrix,
        labels: Vec<Option<usize>>,
        num_classes: usize,
        masks: Masks,
    ) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            for id in [u, v] {
                if id >= n {
                    return Err(GraphError::DanglingNodeId { id, n });
                }
            }
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        if features.cols() != n {
            return Err(GraphError::DimensionMismatch(format!(
                "feature matrix has {} columns for {n} nodes",
                features.cols()
            )));
        }
        if !features.is_finite() {
            return Err(GraphError::Invalid("non-finite feature value".into()));
        }
        if labels.len() != n {
            return Err(GraphError::DimensionMismatch(format!(
                "{} labels for {n} nodes",
                labels.len()
            )));
        }
        if let Some((i, c)) = labels
            .iter()
            .enumerate()
            .find_map(|(i, l)| l.filter(|&c| c >= num_classes).map(|c| (i, c)))
        {
            return Err(GraphError::Invalid(format!(
                "node {i} has class {c} but only {num_classes} classes are declared"
            )));
        }
        for (name, mask) in [("train", &masks.train), ("val", &masks.val), ("test", &masks.test)] {
            if mask.len() != n {
                return Err(GraphError::DimensionMismatch(format!(
                    "{name} mask has length {} for {n} nodes",
                    mask.len()
                )));
            }
            if let Some(i) = (0..n).find(|&i| mask[i] && labels[i].is_none()) {
                return Err(GraphError::Invalid(format!(
                    "node {i} is in the {name} mask but has no label"
                )));
            }
        }
        if let Some(i) = (0..n).find(|&i| {
            [masks.train[i], masks.val[i], masks.test[i]]
                .iter()
                .filter(|&&b| b)
                .count()
                > 1
        }) {
            return Err(GraphError::Invalid(format!("node {i} is in more than one mask")));
        }
        Ok(Self {
            n,
            edges: set.into_iter().collect(),
            features,
            labels,
            num_classes,
            masks,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// Sorted `(u, v)` pairs with `u < v`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// `m × n` feature matrix.
    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.rows()
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn masks(&self) -> &Masks {
        &self.masks
    }

    /// Same graph with the split replaced.
    pub fn with_masks(&self, masks: Masks) -> Result<Self> {
        Self::new(
            self.n,
            self.edges.iter().copied(),
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
            masks,
        )
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// Connected components, each sorted ascending, ordered by smallest node.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.neighbors();
        let mut seen = vec![false; self.n];
        let mut out = Vec::new();
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut head = 0;
            while head < comp.len() {
                let u = comp[head];
                head += 1;
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Hop distances from `source` (`None` when unreachable).
    pub fn bfs_distances(&self, source: usize) -> Vec<Option<usize>> {
        let adj = self.neighbors();
        let mut dist = vec![None; self.n];
        dist[source] = Some(0);
        let mut queue = std::collections::VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap();
            for &v in &adj[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// FNV-1a over the sorted edge pairs, each id as little-endian `u64`.
    pub fn content_hash(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        for &(u, v) in &self.edges {
            for byte in (u as u64).to_le_bytes().into_iter().chain((v as u64).to_le_bytes()) {
                h ^= byte as u64;
                h = h.wrapping_mul(PRIME);
            }
        }
        h
    }
}

/// Right multiplication by the normalized adjacency, `Z ↦ Z·S`.
pub trait Propagation {
    fn num_nodes(&self) -> usize;
    fn propagate(&self, z: &DenseMatrix) -> DenseMatrix;
}

impl Propagation for DenseMatrix {
    fn num_nodes(&self) -> usize {
        self.rows()
    }

    fn propagate(&self, z: &DenseMatrix) -> DenseMatrix {
        z.matmul(self)
    }
}

/// `S = D^{-1/2}(A+I)D^{-1/2}` stored as neighbor lists, self-loop included.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    rows: Vec<Vec<(usize, f64)>>,
}

impl NormalizedAdjacency {
    pub fn new(graph: &Graph) -> Self {
        let n = graph.num_nodes();
        let degree: Vec<f64> = {
            let mut d = vec![1.0; n];
            for &(u, v) in graph.edges() {
                d[u] += 1.0;
                d[v] += 1.0;
            }
            d
        };
        // d_u·d_v is commutative in IEEE arithmetic, so w_uv == w_vu bit for bit
        let weight = |u: usize, v: usize| 1.0 / (degree[u] * degree[v]).sqrt();
        let mut rows: Vec<Vec<(usize, f64)>> = (0..n).map(|u| vec![(u, weight(u, u))]).collect();
        for &(u, v) in graph.edges() {
            rows[u].push((v, weight(u, v)));
            rows[v].push((u, weight(v, u)));
        }
        for r in &mut rows {
            r.sort_unstable_by_key(|&(j, _)| j);
        }
        Self { rows }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let n = self.rows.len();
        let mut s = DenseMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                s[(i, j)] = w;
            }
        }
        s
    }

    /// The nonzeros of row `i`.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }
}

impl Propagation for NormalizedAdjacency {
    fn num_nodes(&self) -> usize {
        self.rows.len()
    }

    fn propagate(&self, z: &DenseMatrix) -> DenseMatrix {
        assert_eq!(z.cols(), self.rows.len(), "propagate: column count mismatch");
        let mut out = DenseMatrix::zeros(z.rows(), z.cols());
        // (Z·S)_{:,j} = Σ_k Z_{:,k} S_{kj}, and S is symmetric
        for r in 0..z.rows() {
            let src = z.row(r);
            let dst = out.row_mut(r);
            for (j, nbrs) in self.rows.iter().enumerate() {
                dst[j] = nbrs.iter().map(|&(k, w)| src[k] * w).sum();
            }
        }
        out
    }
}

/// Dense `n × n` normalized adjacency with self-loops.
pub fn normalized_adjacency(graph: &Graph) -> DenseMatrix {
    NormalizedAdjacency::new(graph).to_dense()
}

/// Parameters of the synthetic chains dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainsSpec {
    pub classes: usize,
    pub chains_per_class: usize,
    pub length: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl ChainsSpec {
    pub fn new(classes: usize, chains_per_class: usize, length: usize) -> Self {
        Self {
            classes,
            chains_per_class,
            length,
            feature_dim: 100,
            seed: 0,
        }
    }

    pub fn with_feature_dim(mut self, m: usize) -> Self {
        self.feature_dim = m;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn num_nodes(&self) -> usize {
        self.classes * self.chains_per_class * self.length
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(GraphError::InvalidSpec("need at least 2 classes".into()));
        }
        if self.chains_per_class < 1 {
            return Err(GraphError::InvalidSpec("need at least 1 chain per class".into()));
        }
        if self.length < 2 {
            return Err(GraphError::InvalidSpec("chain length must be at least 2".into()));
        }
        if self.feature_dim < self.classes {
            return Err(GraphError::InvalidSpec(format!(
                "feature dim {} is smaller than the class count {}",
                self.feature_dim, self.classes
            )));
        }
        Ok(())
    }

    /// First node of chain `chain`; chains of class `k` are
    /// `k·n_c .. (k+1)·n_c`.
    pub fn chain_start(&self, chain: usize) -> usize {
        chain * self.length
    }
}

pub const CHAINS_SPLIT: (f64, f64, f64) = (0.05, 0.10, 0.85);

/// The chains graph without a split: `c·n_c` disjoint paths of `l` nodes.
/// The lowest-index node of each chain carries the one-hot class code in its
/// first `c` feature rows; every other feature is zero.
pub fn chain_graph(spec: &ChainsSpec) -> Result<Graph> {
    spec.validate()?;
    let n = spec.num_nodes();
    let chains = spec.classes * spec.chains_per_class;
    let mut edges = Vec::with_capacity(chains * (spec.length - 1));
    let mut features = DenseMatrix::zeros(spec.feature_dim, n);
    let mut labels = vec![None; n];
    for chain in 0..chains {
        let class = chain / spec.chains_per_class;
        let start = spec.chain_start(chain);
        features[(class, start)] = 1.0;
        for p in 0..spec.length {
            labels[start + p] = Some(class);
            if p + 1 < spec.length {
                edges.push((start + p, start + p + 1));
            }
        }
    }
    Graph::new(n, edges, features, labels, spec.classes, Masks::empty(n))
}

/// [`chain_graph`] with the 5%/10%/85% split drawn from `spec.seed`.
pub fn generate_chains(spec: &ChainsSpec) -> Result<Graph> {
    let graph = chain_graph(spec)?;
    let (tr, va, te) = CHAINS_SPLIT;
    let masks = random_split(graph.labels(), spec.classes, tr, va, te, spec.seed)?;
    graph.with_masks(masks)
}

/// Uniform random split over labeled nodes; the train set is seeded with one
/// random node of every class.
pub fn random_split(
    labels: &[Option<usize>],
    num_classes: usize,
    train_frac: f64,
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<Masks> {
    let n = labels.len();
    let mut pool: Vec<usize> = (0..n).filter(|&i| labels[i].is_some()).collect();
    let total = pool.len();
    let n_train = (train_frac * total as f64).round() as usize;
    let n_val = ((val_frac * total as f64).round() as usize).min(total - n_train.min(total));
    let n_test = ((test_frac * total as f64).round() as usize).min(total - n_train.min(total) - n_val);
    if n_train < num_classes || n_train > total {
        return Err(GraphError::InfeasibleSplit {
            train: n_train,
            classes: num_classes,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);

    // the first occurrence of each class in shuffled order is a uniform draw
    let mut train = Vec::with_capacity(n_train);
    let mut taken = vec![false; pool.len()];
    for class in 0..num_classes {
        match pool.iter().position(|&i| labels[i] == Some(class)) {
            Some(pos) => {
                taken[pos] = true;
                train.push(pool[pos]);
            }
            None => {
                return Err(GraphError::InfeasibleSplit {
                    train: n_train,
                    classes: num_classes,
                })
            }
        }
    }
    let mut rest = pool
        .iter()
        .zip(&taken)
        .filter(|(_, &t)| !t)
        .map(|(&i, _)| i);
    train.extend(rest.by_ref().take(n_train - num_classes));
    let val: Vec<usize> = rest.by_ref().take(n_val).collect();
    let test: Vec<usize> = rest.take(n_test).collect();

    let mut masks = Masks::empty(n);
    for i in train {
        masks.train[i] = true;
    }
    for i in val {
        masks.val[i] = true;
    }
    for i in test {
        masks.test[i] = true;
    }
    Ok(masks)
}

/// How to split a loaded dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    Ratio {
        train: f64,
        val: f64,
        test: f64,
        seed: u64,
    },
    File(PathBuf),
}

impl SplitSpec {
    /// Parses `ratio:0.05,0.10,0.85`; anything else is taken as a split file path.
    pub fn parse(text: &str, seed: u64) -> std::result::Result<Self, String> {
        if let Some(rest) = text.strip_prefix("ratio:") {
            let parts: Vec<f64> = rest
                .split(',')
                .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad ratio {p:?}: {e}")))
                .collect::<std::result::Result<_, _>>()?;
            let [train, val, test] = parts[..] else {
                return Err(format!("expected three ratios, got {}", parts.len()));
            };
            if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r))
                || train + val + test > 1.0 + 1e-9
            {
                return Err(format!("ratios {train},{val},{test} must lie in [0,1] and sum to at most 1"));
            }
            Ok(Self::Ratio {
                train,
                val,
                test,
                seed,
            })
        } else {
            Ok(Self::File(PathBuf::from(text)))
        }
    }
}

/// Paths of the three text files describing a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFiles {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
}

impl DatasetFiles {
    /// `<dir>/edges.txt`, `<dir>/features.txt`, `<dir>/labels.txt`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            edges: dir.join("edges.txt"),
            features: dir.join("features.txt"),
            labels: dir.join("labels.txt"),
        }
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> GraphError {
    GraphError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn content_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push((i + 1, trimmed.to_string()));
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, tok: Option<&str>, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let tok = tok.ok_or_else(|| parse_err(path, line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|e| parse_err(path, line, format!("bad {what} {tok:?}: {e}")))
}

/// `m × n` features from a file whose header is `m n` followed by one line
/// of `m` floats per node.
pub fn read_features(path: &Path) -> Result<DenseMatrix> {
    let lines = content_lines(path)?;
    let (header_line, header) = lines
        .first()
        .ok_or_else(|| parse_err(path, 1, "empty feature file"))?;
    let mut toks = header.split_whitespace();
    let m: usize = parse_field(path, *header_line, toks.next(), "feature dimension")?;
    let n: usize = parse_field(path, *header_line, toks.next(), "node count")?;
    if toks.next().is_some() {
        return Err(parse_err(path, *header_line, "header must be `m n`"));
    }
    if lines.len() - 1 != n {
        return Err(GraphError::DimensionMismatch(format!(
            "{}: header declares {n} nodes but {} rows follow",
            path.display(),
            lines.len() - 1
        )));
    }
    let mut x = DenseMatrix::zeros(m, n);
    for (node, (line_no, line)) in lines[1..].iter().enumerate() {
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| parse_field(path, *line_no, Some(t), "feature value"))
            .collect::<Result<_>>()?;
        if values.len() != m {
            return Err(GraphError::DimensionMismatch(format!(
                "{}:{line_no}: expected {m} values, got {}",
                path.display(),
                values.len()
            )));
        }
        for (r, v) in values.into_iter().enumerate() {
            x[(r, node)] = v;
        }
    }
    Ok(x)
}

fn read_edges(path: &Path, n: usize) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (line_no, line) in content_lines(path)? {
        let mut toks = line.split_whitespace();
        let u: usize = parse_field(path, line_no, toks.next(), "node id")?;
        let v: usize = parse_field(path, line_no, toks.next(), "node id")?;
        if toks.next().is_some() {
            return Err(parse_err(path, line_no, "expected `u v`"));
        }
        for id in [u, v] {
            if id >= n {
                return Err(GraphError::DanglingNodeId { id, n });
            }
        }
        edges.push((u, v));
    }
    Ok(edges)
}

fn read_labels(path: &Path, n: usize, num_classes: Option<usize>) -> Result<(Vec<Option<usize>>, usize)> {
    let mut labels = vec![None; n];
    for (line_no, line) in content_lines(path)? {
        let mut toks = line.split_whitespace();
        let node: usize = parse_field(path, line_no, toks.next(), "node id")?;
        let class: i64 = parse_field(path, line_no, toks.next(), "class id")?;
        if toks.next().is_some() {
            return Err(parse_err(path, line_no, "expected `node_id class_id`"));
        }
        if node >= n {
            return Err(GraphError::DanglingNodeId { id: node, n });
        }
        // -1 marks an unlabeled node
        if class == -1 {
            continue;
        }
        let class = usize::try_from(class)
            .map_err(|_| parse_err(path, line_no, format!("class id {class} is negative")))?;
        if let Some(c) = num_classes {
            if class >= c {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("class id {class} is not below the declared class count {c}"),
                ));
            }
        }
        if labels[node].replace(class).is_some() {
            return Err(parse_err(path, line_no, format!("node {node} labeled twice")));
        }
    }
    let c = num_classes.unwrap_or_else(|| labels.iter().flatten().max().map_or(0, |&m| m + 1));
    Ok((labels, c))
}

fn read_split_file(path: &Path, n: usize) -> Result<Masks> {
    let mut masks = Masks::empty(n);
    for (line_no, line) in content_lines(path)? {
        let mut toks = line.split_whitespace();
        let node: usize = parse_field(path, line_no, toks.next(), "node id")?;
        if node >= n {
            return Err(GraphError::DanglingNodeId { id: node, n });
        }
        let mask = match toks.next() {
            Some("train") => &mut masks.train,
            Some("val") => &mut masks.val,
            Some("test") => &mut masks.test,
            other => {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected train|val|test, got {other:?}"),
                ))
            }
        };
        mask[node] = true;
    }
    Ok(masks)
}

/// Loads a dataset from the edge, feature and label files. `num_classes`
/// overrides the class count inferred from the labels.
pub fn load_graph(files: &DatasetFiles, split: &SplitSpec, num_classes: Option<usize>) -> Result<Graph> {
    let features = read_features(&files.features)?;
    let n = features.cols();
    let edges = read_edges(&files.edges, n)?;
    let (labels, c) = read_labels(&files.labels, n, num_classes)?;
    let masks = match split {
        SplitSpec::Ratio {
            train,
            val,
            test,
            seed,
        } => random_split(&labels, c, *train, *val, *test, *seed)?,
        SplitSpec::File(path) => read_split_file(path, n)?,
    };
    Graph::new(n, edges, features, labels, c, masks)
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(contents.as_bytes())?;
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Writes `edges.txt`, `features.txt`, `labels.txt` and `split.txt` into
/// `dir`. Output is a pure function of the graph.
pub fn write_dataset(graph: &Graph, dir: &Path) -> Result<DatasetFiles> {
    fs::create_dir_all(dir)?;
    let files = DatasetFiles::in_dir(dir);

    let mut edges = String::new();
    for &(u, v) in graph.edges() {
        writeln!(edges, "{u} {v}").unwrap();
    }
    write_atomic(&files.edges, &edges)?;

    let x = graph.features();
    let mut feats = format!("{} {}\n", x.rows(), x.cols());
    let mut col = Vec::with_capacity(x.rows());
    for node in 0..x.cols() {
        col.clear();
        col.extend((0..x.rows()).map(|r| x[(r, node)].to_string()));
        feats.push_str(&col.join(" "));
        feats.push('\n');
    }
    write_atomic(&files.features, &feats)?;

    let mut labels = String::new();
    for (i, l) in graph.labels().iter().enumerate() {
        if let Some(c) = l {
            writeln!(labels, "{i} {c}").unwrap();
        }
    }
    write_atomic(&files.labels, &labels)?;

    let masks = graph.masks();
    let mut split = String::new();
    for i in 0..graph.num_nodes() {
        let tag = if masks.train[i] {
            "train"
        } else if masks.val[i] {
            "val"
        } else if masks.test[i] {
            "test"
        } else {
            continue;
        };
        writeln!(split, "{i} {tag}").unwrap();
    }
    write_atomic(&dir.join("split.txt"), &split)?;
    Ok(files)
}

/// Counts how many nodes of each class are in `mask`.
pub fn class_histogram(graph: &Graph, mask: &[bool]) -> HashMap<usize, usize> {
    let mut h = HashMap::new();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            if let Some(c) = graph.labels()[i] {
                *h.entry(c).or_insert(0) += 1;
            }
        }
    }
    h
}
