//! Benchmark data model: queries with ground-truth positives and hard
//! negatives, the few-shot reference (FSR) split, manifest validation and
//! summary statistics.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{normalize, EmbeddingCorpus};
use crate::linalg::dot_f32;
use crate::{Error, Result};

/// Maximum FSR positives, and maximum FSR hard negatives, per query.
pub const MAX_FSR_PER_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubDataset {
    CompositionalVg,
    CompositionalInquire,
    Ood,
    Synthetic,
}

impl SubDataset {
    pub fn as_str(self) -> &'static str {
        match self {
            SubDataset::CompositionalVg => "compositional_vg",
            SubDataset::CompositionalInquire => "compositional_inquire",
            SubDataset::Ood => "ood",
            SubDataset::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub id: String,
    pub text: String,
    pub sub_dataset: SubDataset,
    pub positives: Vec<String>,
    pub hard_negatives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FewShotReferenceSet {
    pub query_id: String,
    pub positives: Vec<String>,
    pub hn_near: Vec<String>,
    pub hn_far: Vec<String>,
    #[serde(default)]
    pub easy_negatives: Vec<String>,
}

impl FewShotReferenceSet {
    /// Hard negatives, near ones first.
    pub fn hard_negatives(&self) -> impl Iterator<Item = &String> {
        self.hn_near.iter().chain(&self.hn_far)
    }

    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.positives
            .iter()
            .chain(self.hard_negatives())
            .chain(&self.easy_negatives)
    }
}

/// Test-side queries plus their FSR sets, validated against a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub corpus: String,
    pub queries: Vec<QueryEntry>,
    #[serde(default)]
    pub fsr: Vec<FewShotReferenceSet>,
}

impl BenchmarkManifest {
    /// Checks every manifest invariant against `corpus`.
    pub fn validate(&self, corpus: &EmbeddingCorpus) -> Result<()> {
        let mut query_ids = BTreeSet::new();
        for q in &self.queries {
            if q.text.trim().is_empty() {
                return Err(Error::Schema(format!("query `{}` has empty text", q.id)));
            }
            if !query_ids.insert(q.id.as_str()) {
                return Err(Error::Schema(format!("duplicate query id `{}`", q.id)));
            }
            check_known(corpus, q.positives.iter().chain(&q.hard_negatives))?;
            let pos = unique_set(&q.id, &q.positives)?;
            let hn = unique_set(&q.id, &q.hard_negatives)?;
            if let Some(id) = pos.intersection(&hn).next() {
                return Err(overlap(&q.id, id));
            }
        }
        let mut with_fsr = BTreeSet::new();
        for f in &self.fsr {
            let Some(q) = self.query(&f.query_id) else {
                return Err(Error::Schema(format!(
                    "fsr entry references unknown query `{}`",
                    f.query_id
                )));
            };
            if !with_fsr.insert(f.query_id.as_str()) {
                return Err(Error::Schema(format!(
                    "more than one fsr entry for query `{}`",
                    f.query_id
                )));
            }
            if f.positives.len() > MAX_FSR_PER_SIDE || f.hn_near.len() + f.hn_far.len() > MAX_FSR_PER_SIDE {
                return Err(Error::Schema(format!(
                    "fsr for `{}` exceeds {MAX_FSR_PER_SIDE} positives or hard negatives",
                    f.query_id
                )));
            }
            check_known(corpus, f.all_ids())?;
            let fsr_ids = unique_set(&f.query_id, f.all_ids())?;
            let pos: BTreeSet<&str> = f.positives.iter().map(String::as_str).collect();
            if let Some(id) = f
                .hard_negatives()
                .chain(&f.easy_negatives)
                .find(|id| pos.contains(id.as_str()))
            {
                return Err(overlap(&f.query_id, id));
            }
            if let Some(id) = q
                .positives
                .iter()
                .chain(&q.hard_negatives)
                .find(|id| fsr_ids.contains(id.as_str()))
            {
                return Err(overlap(&f.query_id, id));
            }
        }
        Ok(())
    }

    pub fn query(&self, id: &str) -> Option<&QueryEntry> {
        self.queries.iter().find(|q| q.id == id)
    }

    pub fn fsr_for(&self, query_id: &str) -> Option<&FewShotReferenceSet> {
        self.fsr.iter().find(|f| f.query_id == query_id)
    }

    /// Every FSR id of one query (positives, hard and easy negatives).
    pub fn fsr_ids(&self, query_id: &str) -> BTreeSet<String> {
        self.fsr_for(query_id)
            .map(|f| f.all_ids().cloned().collect())
            .unwrap_or_default()
    }
}

fn overlap(query: &str, id: &str) -> Error {
    Error::OverlapViolation {
        query: query.into(),
        id: id.into(),
    }
}

fn check_known<'a>(corpus: &EmbeddingCorpus, ids: impl IntoIterator<Item = &'a String>) -> Result<()> {
    for id in ids {
        if !corpus.contains(id) {
            return Err(Error::UnknownId(id.clone()));
        }
    }
    Ok(())
}

fn unique_set<'a>(query: &str, ids: impl IntoIterator<Item = &'a String>) -> Result<BTreeSet<&'a str>> {
    let mut set = BTreeSet::new();
    for id in ids {
        if !set.insert(id.as_str()) {
            return Err(overlap(query, id));
        }
    }
    Ok(set)
}

/// Sizes used by [`smart_split`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub fsr_positives: usize,
    pub hn_near: usize,
    pub hn_far: usize,
    pub easy_negatives: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fsr_positives: 16,
            hn_near: 12,
            hn_far: 4,
            easy_negatives: 100,
        }
    }
}

/// Test-side queries and FSR sets produced by [`smart_split`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub test: Vec<QueryEntry>,
    pub fsr: Vec<FewShotReferenceSet>,
}

/// Splits ground-truth query result sets into a test part and an FSR part.
///
/// Queries are processed in input order. Images already placed in an FSR set
/// are preferred for later queries' FSR positives and far hard negatives. Near
/// hard negatives are the ones most cosine-similar to the centroid of the
/// chosen FSR positives; far ones are drawn from the rest. Easy negatives are
/// sampled from corpus items that are nobody's positive or hard negative.
pub fn smart_split(gtqr: &[QueryEntry], corpus: &EmbeddingCorpus, seed: u64, cfg: &SplitConfig) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labeled: BTreeSet<&str> = gtqr
        .iter()
        .flat_map(|q| q.positives.iter().chain(&q.hard_negatives))
        .map(String::as_str)
        .collect();
    let easy_pool: Vec<&str> = corpus
        .records()
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !labeled.contains(id))
        .collect();

    let mut allocated: BTreeSet<String> = BTreeSet::new();
    let mut test = Vec::with_capacity(gtqr.len());
    let mut fsr = Vec::with_capacity(gtqr.len());
    for q in gtqr {
        check_known(corpus, q.positives.iter().chain(&q.hard_negatives))?;
        let n_hn = cfg.hn_near + cfg.hn_far;
        if q.positives.len() <= cfg.fsr_positives || q.hard_negatives.len() <= n_hn {
            return Err(Error::InsufficientExamples(format!(
                "query `{}` has {} positives and {} hard negatives; need more than {} and {}",
                q.id,
                q.positives.len(),
                q.hard_negatives.len(),
                cfg.fsr_positives,
                n_hn
            )));
        }
        if easy_pool.len() < cfg.easy_negatives {
            return Err(Error::InsufficientExamples(format!(
                "only {} unlabeled corpus items for {} easy negatives",
                easy_pool.len(),
                cfg.easy_negatives
            )));
        }

        let positives = prioritized(&q.positives, &allocated, cfg.fsr_positives, &mut rng);

        let centroid = centroid_of(corpus, &positives)?;
        let mut ranked: Vec<(f64, &String)> = q
            .hard_negatives
            .iter()
            .map(|id| Ok((dot_f32(&centroid, corpus.vector(id)?), id)))
            .collect::<Result<_>>()?;
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let hn_near: Vec<String> = ranked[..cfg.hn_near].iter().map(|(_, id)| (*id).clone()).collect();
        let rest: Vec<String> = ranked[cfg.hn_near..].iter().map(|(_, id)| (*id).clone()).collect();
        let hn_far = prioritized(&rest, &allocated, cfg.hn_far, &mut rng);

        let easy_negatives = index::sample(&mut rng, easy_pool.len(), cfg.easy_negatives)
            .into_iter()
            .map(|i| easy_pool[i].to_string())
            .collect();

        let in_fsr: BTreeSet<&String> = positives.iter().chain(&hn_near).chain(&hn_far).collect();
        test.push(QueryEntry {
            id: q.id.clone(),
            text: q.text.clone(),
            sub_dataset: q.sub_dataset,
            positives: q.positives.iter().filter(|id| !in_fsr.contains(id)).cloned().collect(),
            hard_negatives: q
                .hard_negatives
                .iter()
                .filter(|id| !in_fsr.contains(id))
                .cloned()
                .collect(),
        });
        allocated.extend(in_fsr.into_iter().cloned());
        fsr.push(FewShotReferenceSet {
            query_id: q.id.clone(),
            positives,
            hn_near,
            hn_far,
            easy_negatives,
        });
    }
    Ok(Split { test, fsr })
}

/// Picks `n` ids: already-allocated ones first (ascending id), then a seeded
/// uniform draw from the others.
fn prioritized(ids: &[String], allocated: &BTreeSet<String>, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut preferred: Vec<&String> = ids.iter().filter(|id| allocated.contains(*id)).collect();
    preferred.sort();
    let mut others: Vec<&String> = ids.iter().filter(|id| !allocated.contains(*id)).collect();
    others.shuffle(rng);
    preferred.into_iter().chain(others).take(n).cloned().collect()
}

/// Unit centroid of the given corpus vectors.
pub fn centroid_of(corpus: &EmbeddingCorpus, ids: &[String]) -> Result<Vec<f32>> {
    let mut sum = alloc::vec![0.0f64; corpus.dimension()];
    for id in ids {
        let v = normalize(corpus.vector(id)?)?;
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x as f64;
        }
    }
    normalize(&sum.iter().map(|&x| x as f32).collect::<Vec<_>>())
}

/// Summary statistics of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ManifestStats {
    pub image_total: usize,
    pub test_image_total: usize,
    pub fsr_image_total: usize,
    pub query_count: usize,
    pub test_query_count: usize,
    pub mean_ground_truths: f64,
    pub mean_hard_negatives: f64,
    pub mean_query_tokens: f64,
}

/// Image totals come from the corpus; test images are those in no FSR set.
/// Means are over all queries; a query counts as a test query when it keeps
/// at least one test positive.
pub fn report_stats(manifest: &BenchmarkManifest, corpus: &EmbeddingCorpus) -> ManifestStats {
    let fsr_images: BTreeSet<&str> = manifest
        .fsr
        .iter()
        .flat_map(|f| f.all_ids())
        .map(String::as_str)
        .filter(|id| corpus.contains(id))
        .collect();
    let n = manifest.queries.len();
    let mean = |f: &dyn Fn(&QueryEntry) -> usize| -> f64 {
        if n == 0 {
            0.0
        } else {
            manifest.queries.iter().map(f).sum::<usize>() as f64 / n as f64
        }
    };
    ManifestStats {
        image_total: corpus.len(),
        test_image_total: corpus.len() - fsr_images.len(),
        fsr_image_total: fsr_images.len(),
        query_count: n,
        test_query_count: manifest.queries.iter().filter(|q| !q.positives.is_empty()).count(),
        mean_ground_truths: mean(&|q| q.positives.len()),
        mean_hard_negatives: mean(&|q| q.hard_negatives.len()),
        mean_query_tokens: mean(&|q| q.text.split_whitespace().count()),
    }
}

/// One query's review folders: known positives and their nearest non-positives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewFolder {
    pub query_id: String,
    pub true_ids: Vec<String>,
    pub false_ids: Vec<String>,
}

/// For every query, lists its positives (test and FSR) and the
/// `ratio × |positives|` corpus items nearest to their centroid that are not
/// positives.
pub fn review_folders(
    manifest: &BenchmarkManifest,
    corpus: &EmbeddingCorpus,
    ratio: usize,
) -> Result<Vec<ReviewFolder>> {
    let mut out = Vec::with_capacity(manifest.queries.len());
    for q in &manifest.queries {
        let mut hp: Vec<String> = q.positives.clone();
        if let Some(f) = manifest.fsr_for(&q.id) {
            hp.extend(f.positives.iter().cloned());
        }
        if hp.is_empty() {
            out.push(ReviewFolder {
                query_id: q.id.clone(),
                true_ids: Vec::new(),
                false_ids: Vec::new(),
            });
            continue;
        }
        let centroid = centroid_of(corpus, &hp)?;
        let hp_set: BTreeSet<&str> = hp.iter().map(String::as_str).collect();
        let mut ranked: Vec<(f64, &str)> = corpus
            .records()
            .iter()
            .filter(|r| !hp_set.contains(r.id.as_str()))
            .map(|r| (dot_f32(&centroid, &r.vector) / norm32(&r.vector), r.id.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        ranked.truncate(ratio * hp.len());
        out.push(ReviewFolder {
            query_id: q.id.clone(),
            true_ids: hp,
            false_ids: ranked.into_iter().map(|(_, id)| id.to_string()).collect(),
        });
    }
    Ok(out)
}

fn norm32(v: &[f32]) -> f64 {
    let n = libm::sqrt(dot_f32(v, v));
    if n > 0.0 {
        n
    } else {
        1.0
    }
}
