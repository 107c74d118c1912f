//! Exact and inverted-file (spherical k-means) top-k cosine search.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embedding::{normalize, EmbeddingCorpus, Similarity};
use crate::kmeans::{spherical_kmeans, DEFAULT_MAX_ITERATIONS};
use crate::linalg::dot_f32;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub ordinal: usize,
    pub similarity: Similarity,
}

/// Common search surface of both index kinds.
pub trait VectorIndex {
    fn dimension(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn id(&self, ordinal: usize) -> &str;

    /// Top-k over records whose ordinal passes `keep`, descending similarity,
    /// ascending id on ties.
    fn search_filtered(&self, q: &[f32], k: usize, keep: &dyn Fn(usize) -> bool) -> Result<Vec<Hit>>;

    fn search(&self, q: &[f32], k: usize) -> Result<Vec<Hit>> {
        self.search_filtered(q, k, &|_| true)
    }
}

/// Unit-normalized row-major copy of a corpus.
#[derive(Debug, Clone, PartialEq)]
struct Matrix {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl Matrix {
    fn from_corpus(corpus: &EmbeddingCorpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let dim = corpus.dimension();
        let mut data = Vec::with_capacity(corpus.len() * dim);
        let mut ids = Vec::with_capacity(corpus.len());
        for r in corpus.records() {
            data.extend(normalize(&r.vector)?);
            ids.push(r.id.clone());
        }
        Ok(Self { dim, ids, data })
    }

    #[inline]
    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn check_query(&self, q: &[f32], k: usize) -> Result<Vec<f32>> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: q.len(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        normalize(q)
    }

    fn hits(&self, scored: Vec<(f64, usize)>) -> Vec<Hit> {
        scored
            .into_iter()
            .map(|(s, i)| Hit {
                id: self.ids[i].clone(),
                ordinal: i,
                similarity: Similarity::from_dot(s),
            })
            .collect()
    }

    fn top_k(&self, mut scored: Vec<(f64, usize)>, k: usize) -> Vec<Hit> {
        let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        self.hits(scored)
    }
}

/// Full-scan index: returns the true top-k.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactIndex {
    matrix: Matrix,
}

impl ExactIndex {
    pub fn build(corpus: &EmbeddingCorpus) -> Result<Self> {
        Ok(Self {
            matrix: Matrix::from_corpus(corpus)?,
        })
    }

    pub fn vector(&self, ordinal: usize) -> &[f32] {
        self.matrix.row(ordinal)
    }
}

impl VectorIndex for ExactIndex {
    fn dimension(&self) -> usize {
        self.matrix.dim
    }

    fn len(&self) -> usize {
        self.matrix.ids.len()
    }

    fn id(&self, ordinal: usize) -> &str {
        &self.matrix.ids[ordinal]
    }

    fn search_filtered(&self, q: &[f32], k: usize, keep: &dyn Fn(usize) -> bool) -> Result<Vec<Hit>> {
        let q = self.matrix.check_query(q, k)?;
        let scored = (0..self.len())
            .filter(|&i| keep(i))
            .map(|i| (dot_f32(&q, self.matrix.row(i)), i))
            .collect();
        Ok(self.matrix.top_k(scored, k))
    }
}

/// Inverted-file index over spherical k-means clusters. Search probes the
/// `probe_count` centroids closest to the query.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredIndex {
    matrix: Matrix,
    centroids: Vec<f32>,
    postings: Vec<Vec<u32>>,
    probe_count: usize,
}

impl ClusteredIndex {
    /// Clusters the corpus with a fixed seed. `probe_count` defaults to
    /// `max(1, n_clusters / 4)`.
    pub fn build(corpus: &EmbeddingCorpus, n_clusters: usize, seed: u64) -> Result<Self> {
        let matrix = Matrix::from_corpus(corpus)?;
        let km = spherical_kmeans(&matrix.data, matrix.dim, n_clusters, seed, DEFAULT_MAX_ITERATIONS)?;
        let mut postings = alloc::vec![Vec::new(); n_clusters];
        for (i, &c) in km.assignment.iter().enumerate() {
            postings[c as usize].push(i as u32);
        }
        Ok(Self {
            matrix,
            centroids: km.centroids,
            postings,
            probe_count: (n_clusters / 4).max(1),
        })
    }

    /// Reassembles a persisted index, validating its invariants.
    pub fn from_parts(
        corpus: &EmbeddingCorpus,
        centroids: Vec<f32>,
        postings: Vec<Vec<u32>>,
        probe_count: usize,
    ) -> Result<Self> {
        let matrix = Matrix::from_corpus(corpus)?;
        let k = postings.len();
        if k == 0 || centroids.len() != k * matrix.dim {
            return Err(Error::Schema(alloc::format!(
                "{} centroid floats for {k} clusters of dimension {}",
                centroids.len(),
                matrix.dim
            )));
        }
        let mut seen = alloc::vec![false; matrix.ids.len()];
        for &o in postings.iter().flatten() {
            let o = o as usize;
            if o >= seen.len() || seen[o] {
                return Err(Error::Schema(alloc::format!(
                    "ordinal {o} out of range or posted twice"
                )));
            }
            seen[o] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Schema("some records are in no posting list".into()));
        }
        Self {
            matrix,
            centroids,
            postings,
            probe_count: 1,
        }
        .with_probe_count(probe_count)
    }

    pub fn with_probe_count(mut self, probe_count: usize) -> Result<Self> {
        if probe_count == 0 || probe_count > self.n_clusters() {
            return Err(Error::InvalidArgument(alloc::format!(
                "probe_count {probe_count} outside [1, {}]",
                self.n_clusters()
            )));
        }
        self.probe_count = probe_count;
        Ok(self)
    }

    pub fn n_clusters(&self) -> usize {
        self.postings.len()
    }

    pub fn probe_count(&self) -> usize {
        self.probe_count
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn postings(&self) -> &[Vec<u32>] {
        &self.postings
    }
}

impl VectorIndex for ClusteredIndex {
    fn dimension(&self) -> usize {
        self.matrix.dim
    }

    fn len(&self) -> usize {
        self.matrix.ids.len()
    }

    fn id(&self, ordinal: usize) -> &str {
        &self.matrix.ids[ordinal]
    }

    fn search_filtered(&self, q: &[f32], k: usize, keep: &dyn Fn(usize) -> bool) -> Result<Vec<Hit>> {
        let q = self.matrix.check_query(q, k)?;
        let dim = self.matrix.dim;
        let mut order: Vec<(f64, usize)> = self
            .centroids
            .chunks_exact(dim)
            .enumerate()
            .map(|(c, centroid)| (dot_f32(&q, centroid), c))
            .collect();
        order.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let scored = order[..self.probe_count]
            .iter()
            .flat_map(|&(_, c)| self.postings[c].iter().map(|&o| o as usize))
            .filter(|&i| keep(i))
            .map(|i| (dot_f32(&q, self.matrix.row(i)), i))
            .collect();
        Ok(self.matrix.top_k(scored, k))
    }
}
