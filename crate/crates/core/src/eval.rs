//! Ranking metrics and run scoring.
//!
//! AP@K is normalized by `min(K, |positives|)` so that a perfect top-K is
//! always worth 1.0, even when a query has more positives than K.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{BenchmarkManifest, SubDataset};
use crate::{Error, Result};

pub const DEFAULT_K: usize = 50;

/// Ranked retrieval output for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRun {
    pub query_id: String,
    pub ranking: Vec<String>,
    pub scores: Vec<f64>,
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::InvalidArgument("K must be at least 1".into()))
    } else {
        Ok(())
    }
}

pub fn average_precision_at_k<S: AsRef<str>>(ranking: &[S], positives: &BTreeSet<String>, k: usize) -> Result<f64> {
    check_k(k)?;
    if positives.is_empty() {
        return Err(Error::EmptyPositives);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, id) in ranking.iter().take(k).enumerate() {
        if positives.contains(id.as_ref()) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / k.min(positives.len()) as f64)
}

pub fn recall_at_k<S: AsRef<str>>(ranking: &[S], positives: &BTreeSet<String>, k: usize) -> Result<f64> {
    check_k(k)?;
    if positives.is_empty() {
        return Err(Error::EmptyPositives);
    }
    let found = ranking
        .iter()
        .take(k)
        .filter(|id| positives.contains(id.as_ref()))
        .count();
    Ok(found as f64 / k.min(positives.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub sub_dataset: SubDataset,
    pub average_precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub queries: usize,
    pub map: f64,
    pub mean_recall: f64,
}

impl MeanMetrics {
    fn of<'a>(items: impl Iterator<Item = &'a QueryMetrics>) -> Self {
        let (mut n, mut ap, mut rec) = (0usize, 0.0, 0.0);
        for m in items {
            n += 1;
            ap += m.average_precision;
            rec += m.recall;
        }
        let d = if n == 0 { 1.0 } else { n as f64 };
        Self {
            queries: n,
            map: ap / d,
            mean_recall: rec / d,
        }
    }
}

/// Per-query, per-sub-dataset and overall AP@K / Recall@K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    /// Sorted by query id.
    pub per_query: Vec<QueryMetrics>,
    pub per_sub_dataset: BTreeMap<SubDataset, MeanMetrics>,
    pub overall: MeanMetrics,
    /// Queries left out of the means because they have no test positives.
    pub skipped: Vec<String>,
}

/// Scores runs against a manifest's test positives.
///
/// A run must not contain any FSR id of its own query.
pub fn evaluate_run(runs: &[RankedRun], manifest: &BenchmarkManifest, k: usize) -> Result<MetricReport> {
    check_k(k)?;
    let mut per_query = Vec::with_capacity(runs.len());
    let mut skipped = Vec::new();
    let mut seen = BTreeSet::new();
    for run in runs {
        let q = manifest
            .query(&run.query_id)
            .ok_or_else(|| Error::UnknownQuery(run.query_id.clone()))?;
        if !seen.insert(run.query_id.as_str()) {
            return Err(Error::Schema(alloc::format!("two runs for query `{}`", run.query_id)));
        }
        if run.ranking.len() != run.scores.len() {
            return Err(Error::Schema(alloc::format!(
                "run for `{}` has {} ids but {} scores",
                run.query_id,
                run.ranking.len(),
                run.scores.len()
            )));
        }
        let mut ids = BTreeSet::new();
        if let Some(dup) = run.ranking.iter().find(|id| !ids.insert(id.as_str())) {
            return Err(Error::Schema(alloc::format!(
                "run for `{}` ranks `{dup}` twice",
                run.query_id
            )));
        }
        let fsr = manifest.fsr_ids(&q.id);
        if let Some(id) = run.ranking.iter().find(|id| fsr.contains(*id)) {
            return Err(Error::FsrLeak {
                query: q.id.clone(),
                id: id.clone(),
            });
        }
        let positives: BTreeSet<String> = q.positives.iter().cloned().collect();
        if positives.is_empty() {
            skipped.push(q.id.clone());
            continue;
        }
        per_query.push(QueryMetrics {
            query_id: q.id.clone(),
            sub_dataset: q.sub_dataset,
            average_precision: average_precision_at_k(&run.ranking, &positives, k)?,
            recall: recall_at_k(&run.ranking, &positives, k)?,
        });
    }
    per_query.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    skipped.sort();
    let subs: BTreeSet<SubDataset> = per_query.iter().map(|m| m.sub_dataset).collect();
    let per_sub_dataset = subs
        .into_iter()
        .map(|s| (s, MeanMetrics::of(per_query.iter().filter(|m| m.sub_dataset == s))))
        .collect();
    let overall = MeanMetrics::of(per_query.iter());
    Ok(MetricReport {
        k,
        per_query,
        per_sub_dataset,
        overall,
        skipped,
    })
}
