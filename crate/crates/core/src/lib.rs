//! Few-shot text-to-image retrieval optimization over precomputed embedding corpora.
//!
//! This crate is `no_std` (with `alloc`) and holds every algorithm of the engine:
//! similarity kernels, exact and clustered top-k search, ranking metrics, the
//! benchmark data model and its split, per-query prompt tuning with calibrated
//! BCE and gradient-projected KL regularization, composed text+reference
//! alignment trained with InfoNCE, triplet mining and reference selection.
//! File formats, the HTTP service and the CLI live in the `fsir` crate.
#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` style checks are written to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

mod error;
pub use error::{Error, Result};

pub mod embedding;
pub use embedding::{batch_similarity, cosine, normalize, EmbeddingCorpus, EmbeddingRecord, Modality, Similarity};

pub mod kmeans;

pub mod index;
pub use index::{ClusteredIndex, ExactIndex, Hit, VectorIndex};

pub mod dataset;
pub use dataset::{BenchmarkManifest, FewShotReferenceSet, ManifestStats, QueryEntry, SplitConfig, SubDataset};

pub mod eval;
pub use eval::{average_precision_at_k, recall_at_k, MetricReport, RankedRun};

pub mod optim;

pub mod ctr;
pub mod pipeline;
pub mod prompt;
pub mod refselect;
pub mod synth;
pub mod triplet;

pub(crate) mod linalg;
