//! Per-query retrieval runs for the three methods, shared by every front end
//! so that they all produce the same numbers.
//!
//! Query texts are embedded by lookup: the text corpus is keyed by the query
//! text itself. Rankings never contain the query's own FSR items.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::ctr::{encode_query_ctr, CtrModel};
use crate::dataset::{BenchmarkManifest, FewShotReferenceSet, QueryEntry};
use crate::embedding::EmbeddingCorpus;
use crate::eval::RankedRun;
use crate::index::VectorIndex;
use crate::prompt::{
    refine_query, train_prompt, ExampleClass, FewShotBatch, TrainConfig, TrainOutcome, ZeroShotAnchor,
};
use crate::refselect::{select_references, SelectionConfig, SelectionResult};
use crate::{Error, Result};

/// Ranked list length written per query.
pub const RUN_DEPTH: usize = 100;

pub fn text_embedding<'a>(texts: &'a EmbeddingCorpus, text: &str) -> Result<&'a [f32]> {
    texts
        .get(text)
        .map(|r| r.vector.as_slice())
        .ok_or_else(|| Error::MissingEmbedding(text.into()))
}

fn fsr_of<'a>(manifest: &'a BenchmarkManifest, query_id: &str) -> Result<&'a FewShotReferenceSet> {
    manifest
        .fsr_for(query_id)
        .ok_or_else(|| Error::InsufficientExamples(alloc::format!("query `{query_id}` has no FSR set")))
}

/// Top-`depth` ranking of the index for `q`, without the query's FSR ids.
pub fn rank_excluding_fsr(
    index: &dyn VectorIndex,
    manifest: &BenchmarkManifest,
    query_id: &str,
    q: &[f32],
    depth: usize,
) -> Result<RankedRun> {
    let fsr = manifest.fsr_ids(query_id);
    let hits = index.search_filtered(q, depth, &|o| !fsr.contains(index.id(o)))?;
    let (ranking, scores) = hits.into_iter().map(|h| (h.id, h.similarity.value())).unzip();
    Ok(RankedRun {
        query_id: query_id.into(),
        ranking,
        scores,
    })
}

/// `shots` positives, the first `shots` hard negatives (near before far)
/// and every easy negative of the set.
pub fn few_shot_batch(fsr: &FewShotReferenceSet, corpus: &EmbeddingCorpus, shots: usize) -> Result<FewShotBatch> {
    if shots == 0 {
        return Err(Error::InvalidArgument("shots must be at least 1".into()));
    }
    let items = fsr
        .positives
        .iter()
        .take(shots)
        .map(|id| (id, ExampleClass::HardPositive))
        .chain(
            fsr.hard_negatives()
                .take(shots)
                .map(|id| (id, ExampleClass::HardNegative)),
        )
        .chain(fsr.easy_negatives.iter().map(|id| (id, ExampleClass::EasyNegative)))
        .map(|(id, c)| Ok((corpus.vector(id)?, c)))
        .collect::<Result<Vec<_>>>()?;
    FewShotBatch::new(items)
}

pub fn zero_shot_run(
    index: &dyn VectorIndex,
    manifest: &BenchmarkManifest,
    texts: &EmbeddingCorpus,
    query: &QueryEntry,
    depth: usize,
) -> Result<RankedRun> {
    let w = text_embedding(texts, &query.text)?;
    rank_excluding_fsr(index, manifest, &query.id, w, depth)
}

/// Trains a prompt on the query's FSR set and ranks with the refined vector.
#[allow(clippy::too_many_arguments)]
pub fn pl_run(
    index: &dyn VectorIndex,
    manifest: &BenchmarkManifest,
    images: &EmbeddingCorpus,
    texts: &EmbeddingCorpus,
    query: &QueryEntry,
    shots: usize,
    cfg: &TrainConfig,
    depth: usize,
) -> Result<(RankedRun, TrainOutcome)> {
    let w = text_embedding(texts, &query.text)?;
    let batch = few_shot_batch(fsr_of(manifest, &query.id)?, images, shots)?;
    let tokens = alloc::vec![w.to_vec()];
    let outcome = train_prompt(&tokens, &batch, &ZeroShotAnchor::new(w)?, cfg)?;
    let t = refine_query(&outcome.state, &tokens)?;
    Ok((rank_excluding_fsr(index, manifest, &query.id, &t, depth)?, outcome))
}

/// Selects references from the FSR positives and ranks with the composed query.
#[allow(clippy::too_many_arguments)]
pub fn ctr_run(
    index: &dyn VectorIndex,
    manifest: &BenchmarkManifest,
    images: &EmbeddingCorpus,
    texts: &EmbeddingCorpus,
    model: &CtrModel,
    query: &QueryEntry,
    cfg: &SelectionConfig,
    depth: usize,
) -> Result<(RankedRun, SelectionResult)> {
    let w = text_embedding(texts, &query.text)?;
    let fsr = fsr_of(manifest, &query.id)?;
    let selection = select_references(&query.id, model, w, fsr, images, cfg)?;
    let refs = selection
        .chosen
        .iter()
        .map(|id| images.vector(id))
        .collect::<Result<Vec<_>>>()?;
    let h = encode_query_ctr(model, w, &refs)?;
    Ok((rank_excluding_fsr(index, manifest, &query.id, &h, depth)?, selection))
}

/// Queries that carry an FSR set, in manifest order.
pub fn refinable_queries(manifest: &BenchmarkManifest) -> Vec<&QueryEntry> {
    let with_fsr: BTreeSet<&String> = manifest.fsr.iter().map(|f| &f.query_id).collect();
    manifest.queries.iter().filter(|q| with_fsr.contains(&q.id)).collect()
}
