//! Maximum inner product search over passage embeddings.
//!
//! Two backends share one immutable [`IndexSnapshot`] type: an exact scan and
//! an IVF-flat index that clusters the embedding space with k-means and only
//! scans the `nprobe` clusters whose centroids score highest against the
//! query. Snapshots carry a generation number and the fingerprint of the
//! passage encoder that produced them, so staleness is always observable.

mod format;
mod kmeans;

use std::cmp::Ordering;

pub use format::{load_snapshot, save_snapshot, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};
pub use kmeans::{distortion, kmeans, DEFAULT_KMEANS_ITERS};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    Exact,
    Ivf,
}

impl IndexKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IndexKind::Exact => "exact",
            IndexKind::Ivf => "ivf",
        }
    }
}

impl std::str::FromStr for IndexKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(IndexKind::Exact),
            "ivf" => Ok(IndexKind::Ivf),
            other => Err(Error::InvalidArgument(format!("unknown index kind {other:?}"))),
        }
    }
}

/// Row-major `N × d` float32 embedding table, the storage form of encoded
/// passages.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    dim: usize,
    data: Vec<f32>,
}

impl Embeddings {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged embedding rows".into()));
        }
        Self::new(dim, rows.iter().flatten().map(|&x| x as f32).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.len(), self.dim, self.data.iter().map(|&x| x as f64).collect())
    }
}

/// Immutable searchable view of the knowledge base at one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexSnapshot {
    generation: u64,
    kind: IndexKind,
    encoder_fingerprint: u64,
    embeddings: Embeddings,
    chunk_ids: Vec<u32>,
    centroids: Option<Embeddings>,
    inverted_lists: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub chunk_ids: Vec<u32>,
    /// Inner products, non-increasing.
    pub scores: Vec<f64>,
}

/// Inner product accumulated in `f64` in index order.
#[inline]
pub fn inner_product(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (&x, &y)| acc + x as f64 * y as f64)
}

/// Descending score, then ascending id.
#[inline]
fn rank_order(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn validate(embeddings: &Embeddings, chunk_ids: &[u32], generation: u64) -> Result<()> {
    if embeddings.is_empty() {
        return Err(Error::Shape("index needs at least one row".into()));
    }
    if embeddings.len() != chunk_ids.len() {
        return Err(Error::Shape(format!(
            "{} embedding rows but {} chunk ids",
            embeddings.len(),
            chunk_ids.len()
        )));
    }
    if generation == 0 {
        return Err(Error::InvalidArgument("generation must be positive".into()));
    }
    if let Some(i) = embeddings.as_slice().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "embedding row {} is not finite",
            i / embeddings.dim()
        )));
    }
    Ok(())
}

impl IndexSnapshot {
    pub fn build_exact(
        embeddings: Embeddings,
        chunk_ids: Vec<u32>,
        generation: u64,
        encoder_fingerprint: u64,
    ) -> Result<Self> {
        validate(&embeddings, &chunk_ids, generation)?;
        Ok(Self {
            generation,
            kind: IndexKind::Exact,
            encoder_fingerprint,
            embeddings,
            chunk_ids,
            centroids: None,
            inverted_lists: Vec::new(),
        })
    }

    pub fn build_ivf(
        embeddings: Embeddings,
        chunk_ids: Vec<u32>,
        generation: u64,
        encoder_fingerprint: u64,
        clusters: usize,
        seed: u64,
    ) -> Result<Self> {
        validate(&embeddings, &chunk_ids, generation)?;
        let (centroids, assignments) =
            kmeans(&embeddings.to_matrix(), clusters, DEFAULT_KMEANS_ITERS, seed)?;
        let mut inverted_lists = vec![Vec::new(); clusters];
        for (row, &c) in assignments.iter().enumerate() {
            inverted_lists[c as usize].push(row as u32);
        }
        let centroids = Embeddings::new(
            embeddings.dim(),
            centroids.as_slice().iter().map(|&x| x as f32).collect(),
        )?;
        Ok(Self {
            generation,
            kind: IndexKind::Ivf,
            encoder_fingerprint,
            embeddings,
            chunk_ids,
            centroids: Some(centroids),
            inverted_lists,
        })
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn kind(&self) -> IndexKind {
        self.kind
    }

    pub fn encoder_fingerprint(&self) -> u64 {
        self.encoder_fingerprint
    }

    pub fn embeddings(&self) -> &Embeddings {
        &self.embeddings
    }

    pub fn chunk_ids(&self) -> &[u32] {
        &self.chunk_ids
    }

    pub fn len(&self) -> usize {
        self.chunk_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunk_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn centroids(&self) -> Option<&Embeddings> {
        self.centroids.as_ref()
    }

    pub fn num_clusters(&self) -> usize {
        self.inverted_lists.len()
    }

    pub fn inverted_lists(&self) -> &[Vec<u32>] {
        &self.inverted_lists
    }

    /// Top-`k` rows by inner product with `query`. `nprobe` is ignored by
    /// the exact backend.
    pub fn search(&self, query: &[f32], k: usize, nprobe: usize) -> Result<SearchResult> {
        if k < 1 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::Shape(format!(
                "query has dimension {}, index has {}",
                query.len(),
                self.dim()
            )));
        }
        if query.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("query".into()));
        }
        let mut scored: Vec<(f64, u32)> = match self.kind {
            IndexKind::Exact => (0..self.len()).map(|row| self.score(query, row)).collect(),
            IndexKind::Ivf => {
                let c = self.num_clusters();
                if nprobe < 1 || nprobe > c {
                    return Err(Error::InvalidArgument(format!(
                        "nprobe must be in 1..={c}, got {nprobe}"
                    )));
                }
                let centroids = self.centroids.as_ref().expect("ivf snapshot has centroids");
                let mut ranked: Vec<(f64, u32)> = (0..c)
                    .map(|i| (inner_product(query, centroids.row(i)), i as u32))
                    .collect();
                ranked.sort_by(rank_order);
                ranked[..nprobe]
                    .iter()
                    .flat_map(|&(_, list)| &self.inverted_lists[list as usize])
                    .map(|&row| self.score(query, row as usize))
                    .collect()
            }
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        Ok(SearchResult {
            chunk_ids: scored.iter().map(|s| s.1).collect(),
            scores: scored.iter().map(|s| s.0).collect(),
        })
    }

    #[inline]
    fn score(&self, query: &[f32], row: usize) -> (f64, u32) {
        (inner_product(query, self.embeddings.row(row)), self.chunk_ids[row])
    }

    /// Row index of a chunk id, if present.
    pub fn row_of(&self, chunk_id: u32) -> Option<usize> {
        self.chunk_ids.iter().position(|&c| c == chunk_id)
    }

    pub(crate) fn from_parts(
        generation: u64,
        kind: IndexKind,
        encoder_fingerprint: u64,
        embeddings: Embeddings,
        chunk_ids: Vec<u32>,
        centroids: Option<Embeddings>,
        inverted_lists: Vec<Vec<u32>>,
    ) -> Self {
        Self {
            generation,
            kind,
            encoder_fingerprint,
            embeddings,
            chunk_ids,
            centroids,
            inverted_lists,
        }
    }
}
