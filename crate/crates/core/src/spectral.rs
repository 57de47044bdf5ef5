//! Eigendecomposition `S = Q_S Λ_S Q_Sᵀ` of a graph's normalized adjacency,
//! plus its binary cache file.
//!
//! `S` is block diagonal over connected components (up to a node
//! permutation), so each component is decomposed on its own and `Q_S` is
//! kept as a list of dense blocks. Products with `Q_S` then cost
//! `Σ_k m·n_k²` instead of `m·n²`. The dense `n × n` view is only
//! materialized on request and for the cache file.
//!
//! Cache layout (little-endian): magic `EIGS`, version `u32 = 1`,
//! content hash `u64`, `n` as `u64`, `n` eigenvalues ascending, then the
//! `n·n` eigenvector entries row-major.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::graph::{Graph, NormalizedAdjacency};
use crate::linalg::{sym_eig, DenseMatrix, LinalgError};

pub const CACHE_MAGIC: &[u8; 4] = b"EIGS";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache file is corrupt: {0}")]
    Corrupt(String),
    #[error("cache was built for a different graph (hash {found:#018x}, expected {expected:#018x})")]
    HashMismatch { expected: u64, found: u64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One diagonal block of `Q_S`.
#[derive(Debug, Clone, PartialEq)]
struct Block {
    /// Node (row) indices, ascending.
    nodes: Vec<usize>,
    /// Global eigenpair (column) indices, one per local eigenvector.
    columns: Vec<usize>,
    /// `nodes.len() × columns.len()` local eigenvectors.
    vectors: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCache {
    n: usize,
    eigenvalues: Vec<f64>,
    blocks: Vec<Block>,
    content_hash: u64,
}

impl SpectralCache {
    /// Decomposes the normalized adjacency of `graph`, one connected
    /// component at a time.
    pub fn from_graph(graph: &Graph) -> Result<Self, LinalgError> {
        let n = graph.num_nodes();
        let s = NormalizedAdjacency::new(graph);
        let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
        let mut local = Vec::new();
        for (b, nodes) in graph.components().into_iter().enumerate() {
            let pos: std::collections::HashMap<usize, usize> =
                nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
            let k = nodes.len();
            let mut sub = DenseMatrix::zeros(k, k);
            for (i, &u) in nodes.iter().enumerate() {
                for &(v, w) in s.row(u) {
                    sub[(i, pos[&v])] = w;
                }
            }
            let eig = sym_eig(&sub)?;
            for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
                pairs.push((lambda, b, j));
            }
            local.push((nodes, eig.eigenvectors));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut blocks: Vec<Block> = local
            .into_iter()
            .map(|(nodes, vectors)| Block {
                columns: vec![usize::MAX; nodes.len()],
                nodes,
                vectors,
            })
            .collect();
        let mut eigenvalues = Vec::with_capacity(n);
        for (global, &(lambda, b, j)) in pairs.iter().enumerate() {
            eigenvalues.push(lambda);
            blocks[b].columns[j] = global;
        }
        Ok(Self {
            n,
            eigenvalues,
            blocks,
            content_hash: graph.content_hash(),
        })
    }

    /// Builds a cache from an explicit `(Λ, Q)` pair, recovering the block
    /// structure from the sparsity pattern of `Q`.
    pub fn from_dense(
        eigenvalues: Vec<f64>,
        eigenvectors: &DenseMatrix,
        content_hash: u64,
    ) -> Result<Self, CacheError> {
        let n = eigenvalues.len();
        if eigenvectors.shape() != (n, n) {
            return Err(CacheError::Corrupt(format!(
                "{} eigenvalues but a {:?} eigenvector matrix",
                n,
                eigenvectors.shape()
            )));
        }
        let mut entries = Vec::new();
        for i in 0..n {
            for (j, &v) in eigenvectors.row(i).iter().enumerate() {
                if v != 0.0 {
                    entries.push((i, j, v));
                }
            }
        }
        Self::from_entries(eigenvalues, entries, content_hash)
    }

    fn from_entries(
        eigenvalues: Vec<f64>,
        entries: Vec<(usize, usize, f64)>,
        content_hash: u64,
    ) -> Result<Self, CacheError> {
        let n = eigenvalues.len();
        // rows are linked when they share a nonzero column
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut first_row = vec![usize::MAX; n];
        for &(i, j, _) in &entries {
            if first_row[j] == usize::MAX {
                first_row[j] = i;
            } else {
                let (a, b) = (find(&mut parent, first_row[j]), find(&mut parent, i));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        if let Some(j) = first_row.iter().position(|&r| r == usize::MAX) {
            return Err(CacheError::Corrupt(format!("eigenvector {j} is identically zero")));
        }
        let root: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
        let mut block_of_root = vec![usize::MAX; n];
        let mut groups: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
        for i in 0..n {
            if block_of_root[root[i]] == usize::MAX {
                block_of_root[root[i]] = groups.len();
                groups.push((Vec::new(), Vec::new()));
            }
            groups[block_of_root[root[i]]].0.push(i);
        }
        for (j, &r) in first_row.iter().enumerate() {
            groups[block_of_root[root[r]]].1.push(j);
        }
        let square = groups.iter().all(|(rows, cols)| rows.len() == cols.len());
        let groups = if square {
            groups
        } else {
            vec![((0..n).collect(), (0..n).collect())]
        };

        let mut blocks = Vec::with_capacity(groups.len());
        let mut local_row = vec![0usize; n];
        let mut block_of_row = vec![0usize; n];
        for (b, (rows, _)) in groups.iter().enumerate() {
            for (k, &i) in rows.iter().enumerate() {
                local_row[i] = k;
                block_of_row[i] = b;
            }
        }
        let mut local_col = vec![0usize; n];
        for (rows, cols) in &groups {
            for (k, &j) in cols.iter().enumerate() {
                local_col[j] = k;
            }
            blocks.push(Block {
                vectors: DenseMatrix::zeros(rows.len(), cols.len()),
                nodes: rows.clone(),
                columns: cols.clone(),
            });
        }
        for (i, j, v) in entries {
            let b = block_of_row[i];
            blocks[b].vectors[(local_row[i], local_col[j])] = v;
        }
        Ok(Self {
            n,
            eigenvalues,
            blocks,
            content_hash,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// `Λ_S`, ascending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn content_hash(&self) -> u64 {
        self.content_hash
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn max_abs_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Dense `Q_S`.
    pub fn eigenvectors(&self) -> DenseMatrix {
        let mut q = DenseMatrix::zeros(self.n, self.n);
        for b in &self.blocks {
            for (li, &i) in b.nodes.iter().enumerate() {
                for (lj, &j) in b.columns.iter().enumerate() {
                    q[(i, j)] = b.vectors[(li, lj)];
                }
            }
        }
        q
    }

    /// `M · Q_S` for an `r × n` matrix `M`.
    pub fn project(&self, m: &DenseMatrix) -> DenseMatrix {
        assert_eq!(m.cols(), self.n, "project: column count mismatch");
        let mut out = DenseMatrix::zeros(m.rows(), self.n);
        for b in &self.blocks {
            let part = m.select_columns(&b.nodes).matmul(&b.vectors);
            out.scatter_columns(&b.columns, &part);
        }
        out
    }

    /// `M · Q_Sᵀ` for an `r × n` matrix `M`.
    pub fn unproject(&self, m: &DenseMatrix) -> DenseMatrix {
        assert_eq!(m.cols(), self.n, "unproject: column count mismatch");
        let mut out = DenseMatrix::zeros(m.rows(), self.n);
        for b in &self.blocks {
            let part = m.select_columns(&b.columns).matmul_t(&b.vectors);
            out.scatter_columns(&b.nodes, &part);
        }
        out
    }

    /// `Q_S Λ_S Q_Sᵀ`
    pub fn reconstruct(&self) -> DenseMatrix {
        let q = self.eigenvectors();
        q.scale_columns(&self.eigenvalues).matmul_t(&q)
    }

    /// Writes the cache atomically (temp file, then rename).
    pub fn write_to(&self, path: &Path) -> Result<(), CacheError> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            w.write_all(CACHE_MAGIC)?;
            w.write_all(&CACHE_VERSION.to_le_bytes())?;
            w.write_all(&self.content_hash.to_le_bytes())?;
            w.write_all(&(self.n as u64).to_le_bytes())?;
            for v in &self.eigenvalues {
                w.write_all(&v.to_le_bytes())?;
            }
            // rows of the dense Q_S, written without materializing it
            let mut row = vec![0.0f64; self.n];
            let mut owner = vec![(0usize, 0usize); self.n];
            for (bi, b) in self.blocks.iter().enumerate() {
                for (li, &i) in b.nodes.iter().enumerate() {
                    owner[i] = (bi, li);
                }
            }
            for &(bi, li) in &owner {
                row.iter_mut().for_each(|v| *v = 0.0);
                let b = &self.blocks[bi];
                for (lj, &j) in b.columns.iter().enumerate() {
                    row[j] = b.vectors[(li, lj)];
                }
                for v in &row {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, CacheError> {
        let file = fs::File::open(path)?;
        let file_len = file.metadata()?.len();
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(CacheError::Corrupt(format!("bad magic {magic:?}")));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != CACHE_VERSION {
            return Err(CacheError::Corrupt(format!("unsupported version {version}")));
        }
        let content_hash = u64::from_le_bytes(read_array(&mut r)?);
        let n = u64::from_le_bytes(read_array(&mut r)?);
        let expected_len = n
            .checked_mul(n)
            .and_then(|nn| nn.checked_add(n))
            .and_then(|c| c.checked_mul(8))
            .and_then(|b| b.checked_add(24));
        if expected_len != Some(file_len) {
            return Err(CacheError::Corrupt(format!(
                "length {file_len} does not match n = {n}"
            )));
        }
        let n = n as usize;
        let mut eigenvalues = Vec::with_capacity(n);
        for _ in 0..n {
            eigenvalues.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        if !eigenvalues.windows(2).all(|w| w[0] <= w[1]) || !eigenvalues.iter().all(|v| v.is_finite()) {
            return Err(CacheError::Corrupt("eigenvalues are not finite and ascending".into()));
        }
        let mut entries = Vec::new();
        let mut buf = vec![0u8; 8 * n];
        for i in 0..n {
            read_exact(&mut r, &mut buf)?;
            for (j, chunk) in buf.chunks_exact(8).enumerate() {
                let v = f64::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(CacheError::Corrupt(format!("non-finite entry at ({i}, {j})")));
                }
                if v != 0.0 {
                    entries.push((i, j, v));
                }
            }
        }
        Self::from_entries(eigenvalues, entries, content_hash)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), CacheError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CacheError::Corrupt("truncated file".into()),
        _ => CacheError::Io(e),
    })
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], CacheError> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}
