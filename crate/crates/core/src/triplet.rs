//! Mining (query text, reference image, target image) triplets from
//! image–caption embedding pairs.
//!
//! For each sampled caption the target is its own image. Candidates are the
//! `top_n` images most similar to the target (the target itself excluded).
//! A candidate becomes a reference when the best cosine between the query
//! caption and any of the candidate's captions is strictly above `threshold`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{normalize, EmbeddingCorpus, EmbeddingRecord, Modality};
use crate::index::{ExactIndex, VectorIndex};
use crate::linalg::dot_f32;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedItem {
    pub image_id: String,
    pub image_embedding: Vec<f32>,
    pub caption_id: String,
    pub caption_embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedTriplet {
    pub query_text_id: String,
    pub reference_id: String,
    pub target_id: String,
    #[serde(rename = "img_sim")]
    pub image_similarity: f64,
    #[serde(rename = "cap_sim")]
    pub caption_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinerConfig {
    pub top_n: usize,
    pub threshold: f64,
    pub per_query_cap: usize,
    /// Fraction of captions sampled as queries, in `(0, 1]`.
    pub sample_fraction: f64,
    pub seed: u64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self {
            top_n: 200,
            threshold: 0.65,
            per_query_cap: 8,
            sample_fraction: 1.0,
            seed: 0,
        }
    }
}

pub fn mine_triplets(items: &[CaptionedItem], cfg: &MinerConfig) -> Result<Vec<MinedTriplet>> {
    if items.len() < 2 {
        return Err(Error::InvalidArgument(
            "mining needs at least two captioned items".into(),
        ));
    }
    if !(cfg.sample_fraction > 0.0 && cfg.sample_fraction <= 1.0) {
        return Err(Error::InvalidArgument("sample fraction must lie in (0, 1]".into()));
    }
    if cfg.top_n == 0 {
        return Err(Error::InvalidArgument("top_n must be positive".into()));
    }
    for it in items {
        if it.image_embedding.is_empty() {
            return Err(Error::MissingEmbedding(it.image_id.clone()));
        }
        if it.caption_embedding.is_empty() {
            return Err(Error::MissingEmbedding(it.caption_id.clone()));
        }
    }

    // One record per image (first occurrence wins), captions grouped per image.
    let mut images: BTreeMap<&str, (&[f32], Vec<Vec<f32>>)> = BTreeMap::new();
    let mut captions: BTreeMap<&str, (Vec<f32>, &str)> = BTreeMap::new();
    for it in items {
        let cap = normalize(&it.caption_embedding)?;
        if captions.insert(&it.caption_id, (cap.clone(), &it.image_id)).is_some() {
            return Err(Error::DuplicateId(it.caption_id.clone()));
        }
        images
            .entry(&it.image_id)
            .or_insert_with(|| (&it.image_embedding, Vec::new()))
            .1
            .push(cap);
    }
    let dim = items[0].image_embedding.len();
    let records = images
        .iter()
        .map(|(id, (v, _))| EmbeddingRecord::new(*id, v.to_vec(), Modality::Image))
        .collect::<Result<Vec<_>>>()?;
    let corpus = EmbeddingCorpus::new(dim, records)?;
    let index = ExactIndex::build(&corpus)?;
    let image_captions: Vec<&Vec<Vec<f32>>> = images.values().map(|(_, c)| c).collect();

    let caption_ids: Vec<&str> = captions.keys().copied().collect();
    let n_sample = (libm::round(caption_ids.len() as f64 * cfg.sample_fraction) as usize).max(1);
    let mut sampled: Vec<usize> = if n_sample >= caption_ids.len() {
        (0..caption_ids.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        index::sample(&mut rng, caption_ids.len(), n_sample).into_vec()
    };
    sampled.sort_unstable();

    let mut out = Vec::new();
    for ci in sampled {
        let cap_id = caption_ids[ci];
        let (cap_emb, target_id) = &captions[cap_id];
        let target_ord = corpus.ordinal(target_id).expect("target image indexed");
        let hits = index.search_filtered(index.vector(target_ord), cfg.top_n, &|o| o != target_ord)?;
        let mut refs: Vec<MinedTriplet> = hits
            .into_iter()
            .filter_map(|h| {
                let cap_sim = image_captions[h.ordinal]
                    .iter()
                    .map(|c| dot_f32(cap_emb, c).clamp(-1.0, 1.0))
                    .fold(f64::NEG_INFINITY, f64::max);
                (cap_sim > cfg.threshold).then(|| MinedTriplet {
                    query_text_id: cap_id.into(),
                    reference_id: h.id,
                    target_id: (*target_id).into(),
                    image_similarity: h.similarity.value(),
                    caption_similarity: cap_sim,
                })
            })
            .collect();
        refs.sort_by(|a, b| {
            b.caption_similarity
                .total_cmp(&a.caption_similarity)
                .then_with(|| a.reference_id.cmp(&b.reference_id))
        });
        refs.truncate(cfg.per_query_cap);
        out.extend(refs);
    }
    Ok(out)
}
