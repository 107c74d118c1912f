//! Vector primitives and the in-memory embedding corpus.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linalg::dot_f32;
use crate::{Error, Result};

/// Magnitude below which a component counts as zero for [`normalize`].
pub const ZERO_EPS: f32 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    /// Per-record modality unknown (files that mix both).
    Mixed,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Image => 1,
            Modality::Mixed => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Text),
            1 => Some(Modality::Image),
            2 => Some(Modality::Mixed),
            _ => None,
        }
    }
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Similarity(f64);

impl Similarity {
    pub(crate) fn from_dot(d: f64) -> Self {
        Similarity(d.clamp(-1.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f32>,
    pub modality: Modality,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, vector: Vec<f32>, modality: Modality) -> Result<Self> {
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            id: id.into(),
            vector,
            modality,
        })
    }
}

/// Unit-normalizes `v`, accumulating the norm in f64.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    if v.iter().all(|x| x.abs() < ZERO_EPS) {
        return Err(Error::ZeroVector);
    }
    let n = libm::sqrt(dot_f32(v, v));
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

pub fn cosine(u: &[f32], v: &[f32]) -> Result<Similarity> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    Ok(Similarity::from_dot(dot_f32(u, v)))
}

/// Cosine of `q` against every record, in corpus order.
pub fn batch_similarity<'a>(q: &[f32], corpus: &'a EmbeddingCorpus) -> Result<Vec<(&'a str, Similarity)>> {
    if q.len() != corpus.dimension() {
        return Err(Error::DimensionMismatch {
            expected: corpus.dimension(),
            found: q.len(),
        });
    }
    Ok(corpus
        .records()
        .iter()
        .map(|r| (r.id.as_str(), Similarity::from_dot(dot_f32(q, &r.vector))))
        .collect())
}

/// Records sharing one dimension, with unique ids. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCorpus {
    dimension: usize,
    records: Vec<EmbeddingRecord>,
    id_index: BTreeMap<String, usize>,
}

impl EmbeddingCorpus {
    pub fn new(dimension: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        if dimension < 2 {
            return Err(Error::InvalidArgument(alloc::format!(
                "corpus dimension must be at least 2, got {dimension}"
            )));
        }
        let mut id_index = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.vector.len() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    found: r.vector.len(),
                });
            }
            if r.vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite);
            }
            if id_index.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self {
            dimension,
            records,
            id_index,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn ordinal(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.id_index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.ordinal(id).map(|i| &self.records[i])
    }

    pub fn vector(&self, id: &str) -> Result<&[f32]> {
        self.get(id)
            .map(|r| r.vector.as_slice())
            .ok_or_else(|| Error::UnknownId(id.into()))
    }

    /// Modality of the whole corpus; `Mixed` when records disagree.
    pub fn modality(&self) -> Modality {
        let mut it = self.records.iter().map(|r| r.modality);
        match it.next() {
            None => Modality::Image,
            Some(first) => {
                if it.all(|m| m == first) {
                    first
                } else {
                    Modality::Mixed
                }
            }
        }
    }

    /// Copy with every vector unit-normalized.
    pub fn normalized(&self) -> Result<Self> {
        let records = self
            .records
            .iter()
            .map(|r| {
                Ok(EmbeddingRecord {
                    id: r.id.clone(),
                    vector: normalize(&r.vector)?,
                    modality: r.modality,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dimension: self.dimension,
            records,
            id_index: self.id_index.clone(),
        })
    }

    pub fn into_records(self) -> Vec<EmbeddingRecord> {
        self.records
    }
}
