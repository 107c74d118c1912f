//! Session records and the synchronous work behind the session routes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use fsir_core::ctr::{encode_query_ctr, CtrModel};
use fsir_core::prompt::{refine_query, train_prompt, ExampleClass, FewShotBatch, TrainConfig, ZeroShotAnchor};
use fsir_core::refselect::{score_individual, select_combination, SelectionConfig, SelectionResult, ValidationSet};
use fsir_core::{average_precision_at_k, recall_at_k, BenchmarkManifest, EmbeddingCorpus, Hit, VectorIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::problem::ProblemBody;
use crate::fsix::AnyIndex;
use crate::models::PromptFile;

/// Easy negatives drawn from the corpus for every refinement.
pub const EASY_NEGATIVES: usize = 100;
/// Cutoff of the metrics recorded in session history.
pub const HISTORY_K: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ZeroShot,
    Pl,
    Ctr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    HardNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackLabel {
    Positive,
    HardNegative,
    Cleared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    #[default]
    Idle,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct JobStatus {
    pub state: JobState,
    pub method: Option<Method>,
    pub error: Option<ProblemBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub k: usize,
    pub average_precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub method: Method,
    pub positives: usize,
    pub hard_negatives: usize,
    pub metrics: Option<QueryScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub embedding: Vec<f32>,
    pub positives: usize,
    pub hard_negatives: usize,
    pub prompt: Option<PromptFile>,
    pub selection: Option<SelectionResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub query_text: String,
    /// Manifest query with the same text, when one is loaded.
    pub query_id: Option<String>,
    pub zero_shot: Vec<f32>,
    pub feedback: BTreeMap<String, Label>,
    pub refined: BTreeMap<Method, Refinement>,
    pub status: JobStatus,
    pub history: Vec<Snapshot>,
}

impl Session {
    pub fn labelled(&self, label: Label) -> Vec<String> {
        self.feedback
            .iter()
            .filter(|(_, l)| **l == label)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn embedding(&self, method: Method) -> Option<&[f32]> {
        match method {
            Method::ZeroShot => Some(&self.zero_shot),
            m => self.refined.get(&m).map(|r| r.embedding.as_slice()),
        }
    }
}

/// Everything `POST /corpus` loads. Shared read-only by every request.
#[derive(Debug)]
pub struct Loaded {
    pub images: EmbeddingCorpus,
    pub texts: EmbeddingCorpus,
    pub index: AnyIndex,
    pub manifest: Option<BenchmarkManifest>,
    pub ctr: Option<CtrModel>,
    pub digest: String,
    /// Thumbnail paths by image id; empty when none were supplied.
    pub image_paths: BTreeMap<String, PathBuf>,
}

impl Loaded {
    pub fn query_id_for(&self, text: &str) -> Option<String> {
        self.manifest
            .as_ref()?
            .queries
            .iter()
            .find(|q| q.text == text)
            .map(|q| q.id.clone())
    }

    /// Ids kept out of a session's evaluated rankings: its query's FSR set and
    /// every item it gave feedback on.
    pub fn held_out(&self, session: &Session) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = session.feedback.keys().cloned().collect();
        if let (Some(m), Some(q)) = (&self.manifest, &session.query_id) {
            out.extend(m.fsr_ids(q));
        }
        out
    }

    pub fn rank(&self, q: &[f32], k: usize, exclude: &BTreeSet<String>) -> fsir_core::Result<Vec<Hit>> {
        self.index
            .search_filtered(q, k, &|o| !exclude.contains(self.index.id(o)))
    }

    /// AP@K and Recall@K against the manifest's test positives, if any.
    pub fn score(&self, session: &Session, q: &[f32], k: usize) -> fsir_core::Result<Option<QueryScore>> {
        let Some(entry) = session
            .query_id
            .as_ref()
            .and_then(|id| self.manifest.as_ref()?.query(id))
        else {
            return Ok(None);
        };
        let positives: BTreeSet<String> = entry.positives.iter().cloned().collect();
        if positives.is_empty() {
            return Ok(None);
        }
        let ids: Vec<String> = self
            .rank(q, k, &self.held_out(session))?
            .into_iter()
            .map(|h| h.id)
            .collect();
        Ok(Some(QueryScore {
            k,
            average_precision: average_precision_at_k(&ids, &positives, k)?,
            recall: recall_at_k(&ids, &positives, k)?,
        }))
    }

    /// Seeded draw of corpus items the session has not labelled and the
    /// manifest does not list as the query's positives or hard negatives.
    pub fn easy_negatives(&self, session: &Session, n: usize, seed: u64) -> Vec<String> {
        let mut known: BTreeSet<&str> = session.feedback.keys().map(String::as_str).collect();
        let entry = session
            .query_id
            .as_ref()
            .and_then(|id| self.manifest.as_ref()?.query(id));
        if let Some(e) = entry {
            known.extend(e.positives.iter().chain(&e.hard_negatives).map(String::as_str));
        }
        let pool: Vec<&str> = self
            .images
            .records()
            .iter()
            .map(|r| r.id.as_str())
            .filter(|id| !known.contains(id))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, pool.len(), n.min(pool.len())).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| pool[i].to_string()).collect()
    }
}

fn need_positives(positives: &[String]) -> fsir_core::Result<()> {
    if positives.is_empty() {
        Err(fsir_core::Error::InsufficientExamples(
            "refinement needs at least one positive".into(),
        ))
    } else {
        Ok(())
    }
}

pub fn refine_pl(loaded: &Loaded, session: &Session, cfg: &TrainConfig) -> fsir_core::Result<Refinement> {
    let positives = session.labelled(Label::Positive);
    let negatives = session.labelled(Label::HardNegative);
    need_positives(&positives)?;
    let easy = loaded.easy_negatives(session, EASY_NEGATIVES, cfg.seed);
    let items = positives
        .iter()
        .map(|id| (id, ExampleClass::HardPositive))
        .chain(negatives.iter().map(|id| (id, ExampleClass::HardNegative)))
        .chain(easy.iter().map(|id| (id, ExampleClass::EasyNegative)))
        .map(|(id, c)| Ok((loaded.images.vector(id)?, c)))
        .collect::<fsir_core::Result<Vec<_>>>()?;
    let batch = FewShotBatch::new(items)?;
    let w = &session.zero_shot;
    let tokens = vec![w.clone()];
    let outcome = train_prompt(&tokens, &batch, &ZeroShotAnchor::new(w)?, cfg)?;
    let embedding = refine_query(&outcome.state, &tokens)?;
    let key = session.query_id.as_deref().unwrap_or(&session.query_text);
    Ok(Refinement {
        embedding,
        positives: positives.len(),
        hard_negatives: negatives.len(),
        prompt: Some(PromptFile::new(key, &outcome.state, cfg, outcome.loss_trajectory)),
        selection: None,
    })
}

pub fn refine_ctr(
    loaded: &Loaded,
    model: &CtrModel,
    session: &Session,
    cfg: &SelectionConfig,
    seed: u64,
) -> fsir_core::Result<Refinement> {
    let positives = session.labelled(Label::Positive);
    let negatives = session.labelled(Label::HardNegative);
    need_positives(&positives)?;
    let easy = loaded.easy_negatives(session, EASY_NEGATIVES, seed);
    let items = positives
        .iter()
        .map(|id| (id, true))
        .chain(negatives.iter().chain(&easy).map(|id| (id, false)))
        .map(|(id, p)| Ok((id.clone(), loaded.images.vector(id)?.to_vec(), p)))
        .collect::<fsir_core::Result<Vec<_>>>()?;
    let validation = ValidationSet::new(items)?;
    let w = &session.zero_shot;
    let scores = score_individual(model, w, &positives, &validation, cfg.k)?;
    let key = session.query_id.as_deref().unwrap_or(&session.query_text);
    let selection = select_combination(key, &scores, model, w, &validation, cfg)?;
    let refs = selection
        .chosen
        .iter()
        .map(|id| loaded.images.vector(id))
        .collect::<fsir_core::Result<Vec<_>>>()?;
    Ok(Refinement {
        embedding: encode_query_ctr(model, w, &refs)?,
        positives: positives.len(),
        hard_negatives: negatives.len(),
        prompt: None,
        selection: Some(selection),
    })
}
