//! Inference-time reference selection for composed retrieval.
//!
//! Stage 1 scores every candidate reference alone by validation AP@K.
//! Stage 2 combines the best candidates, greedily by default.
//!
//! A reference being evaluated is removed from the validation ranking and
//! from the validation positives, so an image cannot score by retrieving
//! itself.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ctr::{encode_query_ctr, CtrModel};
use crate::dataset::FewShotReferenceSet;
use crate::embedding::{normalize, EmbeddingCorpus};
use crate::eval::{average_precision_at_k, DEFAULT_K};
use crate::linalg::dot_f32;
use crate::{Error, Result};

/// Labeled items a selection is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSet {
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    positives: BTreeSet<String>,
}

impl ValidationSet {
    /// `items` are `(id, vector, is_positive)`; vectors are normalized here.
    pub fn new(items: impl IntoIterator<Item = (String, Vec<f32>, bool)>) -> Result<Self> {
        let mut set = Self {
            ids: Vec::new(),
            vectors: Vec::new(),
            positives: BTreeSet::new(),
        };
        let mut seen = BTreeSet::new();
        for (id, v, pos) in items {
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId(id));
            }
            if let Some(first) = set.vectors.first() {
                if first.len() != v.len() {
                    return Err(Error::DimensionMismatch {
                        expected: first.len(),
                        found: v.len(),
                    });
                }
            }
            set.vectors.push(normalize(&v)?);
            if pos {
                set.positives.insert(id.clone());
            }
            set.ids.push(id);
        }
        Ok(set)
    }

    /// The FSR positives, hard negatives and easy negatives of one query.
    pub fn from_fsr(fsr: &FewShotReferenceSet, corpus: &EmbeddingCorpus) -> Result<Self> {
        let positives = fsr.positives.iter().map(|id| (id, true));
        let negatives = fsr.hard_negatives().chain(&fsr.easy_negatives).map(|id| (id, false));
        let items = positives
            .chain(negatives)
            .map(|(id, pos)| Ok((id.clone(), corpus.vector(id)?.to_vec(), pos)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn positives(&self) -> &BTreeSet<String> {
        &self.positives
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.ids
            .iter()
            .position(|x| x == id)
            .map(|i| self.vectors[i].as_slice())
    }

    /// AP@K of ranking by `query`, with `left_out` removed from both the
    /// ranking and the positives. Zero when no positives remain.
    pub fn average_precision(&self, query: &[f32], left_out: &[String], k: usize) -> Result<f64> {
        let positives: BTreeSet<String> = self
            .positives
            .iter()
            .filter(|p| !left_out.contains(p))
            .cloned()
            .collect();
        if positives.is_empty() {
            return Ok(0.0);
        }
        let mut scored: Vec<(f64, &str)> = self
            .ids
            .iter()
            .zip(&self.vectors)
            .filter(|(id, _)| !left_out.contains(id))
            .map(|(id, v)| (dot_f32(query, v), id.as_str()))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let ranking: Vec<&str> = scored.into_iter().map(|(_, id)| id).collect();
        average_precision_at_k(&ranking, &positives, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub max_refs: usize,
    pub candidate_m: usize,
    /// Search every subset of the top candidates instead of greedy growth.
    pub exhaustive: bool,
    pub k: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            max_refs: 4,
            candidate_m: 5,
            exhaustive: false,
            k: DEFAULT_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub set: Vec<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub query_id: String,
    pub chosen: Vec<String>,
    pub individual_scores: BTreeMap<String, f64>,
    pub combination_score: f64,
    /// Accepted sets in order, starting from the best single reference.
    pub greedy_path: Vec<SelectionStep>,
}

fn reference_vectors<'a>(validation: &'a ValidationSet, ids: &[String]) -> Result<Vec<&'a [f32]>> {
    ids.iter()
        .map(|id| validation.vector(id).ok_or_else(|| Error::UnknownId(id.clone())))
        .collect()
}

/// Validation AP of composing `text` with the given references.
pub fn combination_score(
    model: &CtrModel,
    text: &[f32],
    refs: &[String],
    validation: &ValidationSet,
    k: usize,
) -> Result<f64> {
    let vectors = reference_vectors(validation, refs)?;
    let h = encode_query_ctr(model, text, &vectors)?;
    validation.average_precision(&h, refs, k)
}

/// Stage 1: each pool id alone. Pool ids must be in the validation set.
pub fn score_individual(
    model: &CtrModel,
    text: &[f32],
    pool: &[String],
    validation: &ValidationSet,
    k: usize,
) -> Result<BTreeMap<String, f64>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    pool.iter()
        .map(|id| {
            let s = combination_score(model, text, core::slice::from_ref(id), validation, k)?;
            Ok((id.clone(), s))
        })
        .collect()
}

/// Stage 2 over any set-scoring function.
///
/// Candidates are the `candidate_m` best stage-1 ids (ascending id on ties).
/// Greedy growth starts from the best one and adds whichever candidate gives
/// the highest score, accepting only strict improvements.
pub fn select_combination_with(
    query_id: &str,
    scores: &BTreeMap<String, f64>,
    cfg: &SelectionConfig,
    mut score_set: impl FnMut(&[String]) -> Result<f64>,
) -> Result<SelectionResult> {
    if scores.is_empty() {
        return Err(Error::EmptyPool);
    }
    if cfg.max_refs == 0 || cfg.candidate_m == 0 {
        return Err(Error::InvalidArgument(
            "max_refs and candidate_m must be positive".into(),
        ));
    }
    let mut ranked: Vec<(&String, f64)> = scores.iter().map(|(id, &s)| (id, s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(cfg.candidate_m);
    let candidates: Vec<String> = ranked.iter().map(|(id, _)| (*id).clone()).collect();

    let mut chosen = alloc::vec![candidates[0].clone()];
    let mut best = ranked[0].1;
    let mut path = alloc::vec![SelectionStep {
        set: chosen.clone(),
        score: best,
    }];

    if cfg.exhaustive {
        let n = candidates.len();
        for mask in 1u32..(1 << n) {
            let size = mask.count_ones() as usize;
            if size < 2 || size > cfg.max_refs {
                continue;
            }
            let set: Vec<String> = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| candidates[i].clone())
                .collect();
            let s = score_set(&set)?;
            // Masks visit smaller sets of better candidates first, so only a
            // strictly higher score replaces the incumbent.
            if s > best {
                best = s;
                chosen = set;
                path.push(SelectionStep {
                    set: chosen.clone(),
                    score: best,
                });
            }
        }
    } else {
        while chosen.len() < cfg.max_refs {
            let mut round: Option<(f64, &String)> = None;
            for c in candidates.iter().filter(|c| !chosen.contains(c)) {
                let mut trial = chosen.clone();
                trial.push(c.clone());
                let s = score_set(&trial)?;
                // Candidates are visited in stage-1 order; ties go to the smaller id.
                let better = match round {
                    None => true,
                    Some((bs, bid)) => s > bs || (s == bs && c < bid),
                };
                if better {
                    round = Some((s, c));
                }
            }
            match round {
                Some((s, c)) if s > best => {
                    best = s;
                    chosen.push(c.clone());
                    path.push(SelectionStep {
                        set: chosen.clone(),
                        score: best,
                    });
                }
                _ => break,
            }
        }
    }
    Ok(SelectionResult {
        query_id: query_id.into(),
        chosen,
        individual_scores: scores.clone(),
        combination_score: best,
        greedy_path: path,
    })
}

/// Stage 2 with the CTR model scoring sets on the validation set.
pub fn select_combination(
    query_id: &str,
    scores: &BTreeMap<String, f64>,
    model: &CtrModel,
    text: &[f32],
    validation: &ValidationSet,
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    select_combination_with(query_id, scores, cfg, |set| {
        combination_score(model, text, set, validation, cfg.k)
    })
}

/// Both stages for one query, with the FSR positives as the pool.
pub fn select_references(
    query_id: &str,
    model: &CtrModel,
    text: &[f32],
    fsr: &FewShotReferenceSet,
    corpus: &EmbeddingCorpus,
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    let validation = ValidationSet::from_fsr(fsr, corpus)?;
    let scores = score_individual(model, text, &fsr.positives, &validation, cfg.k)?;
    select_combination(query_id, &scores, model, text, &validation, cfg)
}
