//! Seeded synthetic benchmark with the geometry of compositional queries.
//!
//! Each query owns a positive cluster and a few hard-negative clusters whose
//! centers sit at a fixed cosine to the positive center. Its text embedding
//! leans toward one hard-negative center and carries a shared offset, so
//! zero-shot retrieval is mediocre and reference images carry real signal.
//! A separate pool of captioned training concepts feeds the triplet miner.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{smart_split, BenchmarkManifest, QueryEntry, SplitConfig, SubDataset};
use crate::embedding::{EmbeddingCorpus, EmbeddingRecord, Modality};
use crate::linalg::{dot, normalize_in_place, to_f32};
use crate::triplet::CaptionedItem;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub queries: usize,
    pub dimension: usize,
    pub positives_per_query: usize,
    pub hn_clusters: usize,
    pub hn_per_cluster: usize,
    /// Cosine between a positive center and each hard-negative center.
    pub hn_center_cosine: f64,
    /// Norm of the noise added to a cluster center before normalizing.
    pub spread: f64,
    /// How far the text embedding leans from the positive center toward the
    /// first hard-negative center, in `[0, 1]`.
    pub text_bias: f64,
    pub text_noise: f64,
    /// Weight of the offset shared by every text embedding.
    pub modality_offset: f64,
    pub easy_negatives: usize,
    pub ctr_concepts: usize,
    pub ctr_images_per_concept: usize,
    pub caption_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            queries: 30,
            dimension: 64,
            positives_per_query: 50,
            hn_clusters: 3,
            hn_per_cluster: 50,
            hn_center_cosine: 0.8,
            spread: 0.45,
            text_bias: 0.55,
            text_noise: 0.3,
            modality_offset: 0.5,
            easy_negatives: 1500,
            ctr_concepts: 60,
            ctr_images_per_concept: 10,
            caption_noise: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub images: EmbeddingCorpus,
    /// Keyed by query text.
    pub texts: EmbeddingCorpus,
    pub ground_truth: Vec<QueryEntry>,
    pub manifest: BenchmarkManifest,
    /// Captioned images of concepts disjoint from the queries.
    pub ctr_pool: Vec<CaptionedItem>,
}

impl SyntheticBenchmark {
    pub fn ctr_images(&self) -> Result<EmbeddingCorpus> {
        let mut seen = alloc::collections::BTreeSet::new();
        let records = self
            .ctr_pool
            .iter()
            .filter(|it| seen.insert(it.image_id.as_str()))
            .map(|it| EmbeddingRecord::new(it.image_id.clone(), it.image_embedding.clone(), Modality::Image))
            .collect::<Result<Vec<_>>>()?;
        EmbeddingCorpus::new(self.images.dimension(), records)
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    dim: usize,
}

impl Sampler {
    fn gaussian(&mut self) -> Vec<f64> {
        (0..self.dim).map(|_| StandardNormal.sample(&mut self.rng)).collect()
    }

    fn unit(&mut self) -> Vec<f64> {
        let mut v = self.gaussian();
        normalize_in_place(&mut v);
        v
    }

    /// Unit vector orthogonal to the unit vector `c`.
    fn orthogonal_unit(&mut self, c: &[f64]) -> Vec<f64> {
        let mut g = self.gaussian();
        let p = dot(&g, c);
        for (x, ci) in g.iter_mut().zip(c) {
            *x -= p * ci;
        }
        normalize_in_place(&mut g);
        g
    }

    /// Normalized `center + noise`, the noise having norm about `spread`.
    fn around(&mut self, center: &[f64], spread: f64) -> Vec<f32> {
        let scale = spread / libm::sqrt(self.dim as f64);
        let mut v: Vec<f64> = center
            .iter()
            .map(|&c| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                c + scale * z
            })
            .collect();
        normalize_in_place(&mut v);
        to_f32(&v)
    }
}

fn mix(parts: &[(f64, &[f64])]) -> Vec<f64> {
    let mut v = alloc::vec![0.0; parts[0].1.len()];
    for (w, p) in parts {
        for (x, y) in v.iter_mut().zip(p.iter()) {
            *x += w * y;
        }
    }
    normalize_in_place(&mut v);
    v
}

/// Hard-negative centers at cosine `cos` to `c`.
fn hn_centers(s: &mut Sampler, c: &[f64], n: usize, cos: f64) -> Vec<Vec<f64>> {
    let sin = libm::sqrt(1.0 - cos * cos);
    (0..n)
        .map(|_| {
            let u = s.orthogonal_unit(c);
            mix(&[(cos, c), (sin, &u)])
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticBenchmark> {
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        dim: cfg.dimension,
    };
    let offset = s.unit();
    let text_for = |s: &mut Sampler, c: &[f64], h: &[f64]| -> Vec<f64> {
        let noise = s.unit();
        mix(&[
            (1.0 - cfg.text_bias, c),
            (cfg.text_bias, h),
            (cfg.text_noise, &noise),
            (cfg.modality_offset, &offset),
        ])
    };

    let mut images = Vec::new();
    let mut texts = Vec::new();
    let mut ground_truth = Vec::new();
    for q in 0..cfg.queries {
        let c = s.unit();
        let hns = hn_centers(&mut s, &c, cfg.hn_clusters, cfg.hn_center_cosine);
        let mut positives = Vec::new();
        for j in 0..cfg.positives_per_query {
            let id = format!("q{q:02}-pos-{j:03}");
            images.push(EmbeddingRecord::new(
                id.clone(),
                s.around(&c, cfg.spread),
                Modality::Image,
            )?);
            positives.push(id);
        }
        let mut hard_negatives = Vec::new();
        for (k, h) in hns.iter().enumerate() {
            for j in 0..cfg.hn_per_cluster {
                let id = format!("q{q:02}-hn{k}-{j:03}");
                images.push(EmbeddingRecord::new(
                    id.clone(),
                    s.around(h, cfg.spread),
                    Modality::Image,
                )?);
                hard_negatives.push(id);
            }
        }
        let text = format!("synthetic query {q:02}");
        let w = text_for(&mut s, &c, &hns[0]);
        texts.push(EmbeddingRecord::new(text.clone(), to_f32(&w), Modality::Text)?);
        ground_truth.push(QueryEntry {
            id: format!("q{q:02}"),
            text,
            sub_dataset: SubDataset::Synthetic,
            positives,
            hard_negatives,
        });
    }
    for j in 0..cfg.easy_negatives {
        let v = s.unit();
        images.push(EmbeddingRecord::new(
            format!("easy-{j:04}"),
            to_f32(&v),
            Modality::Image,
        )?);
    }

    // Training concepts come in pairs of clusters whose captions are hard to
    // tell apart, so only the images separate them.
    let mut ctr_pool = Vec::new();
    for k in 0..cfg.ctr_concepts {
        let c = s.unit();
        let h = hn_centers(&mut s, &c, 1, cfg.hn_center_cosine).remove(0);
        for (side, (center, other)) in [(&c, &h), (&h, &c)].into_iter().enumerate() {
            let t = text_for(&mut s, center, other);
            for j in 0..cfg.ctr_images_per_concept {
                ctr_pool.push(CaptionedItem {
                    image_id: format!("ctr-c{k:02}{side}-img-{j:02}"),
                    image_embedding: s.around(center, cfg.spread),
                    caption_id: format!("ctr-c{k:02}{side}-cap-{j:02}"),
                    caption_embedding: s.around(&t, cfg.caption_noise),
                });
            }
        }
    }

    let images = EmbeddingCorpus::new(cfg.dimension, images)?;
    let texts = EmbeddingCorpus::new(cfg.dimension, texts)?;
    let split = smart_split(&ground_truth, &images, cfg.seed, &SplitConfig::default())?;
    let manifest = BenchmarkManifest {
        corpus: "images.fsem".into(),
        queries: split.test,
        fsr: split.fsr,
    };
    Ok(SyntheticBenchmark {
        images,
        texts,
        ground_truth,
        manifest,
        ctr_pool,
    })
}
