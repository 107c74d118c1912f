//! Composed text + reference query model aligned to a frozen image space.
//!
//! A gated linear composer fuses a text embedding with the mean of zero or
//! more reference image embeddings, and an output projection maps the result
//! into the external encoder's space:
//!
//! ```text
//! h = normalize(P · (α · W_text · t + (1 − α) · W_ref · mean(r)))
//! ```
//!
//! Training minimizes InfoNCE with in-batch negatives under the
//! temperature-scaled cosine `φ(h, v) = exp(cos(h, v) / τ)`. All losses are
//! evaluated in log space.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingCorpus;
use crate::linalg::{
    add_outer, dot, log_sum_exp, matvec, matvec_t, normalize_backward, normalize_in_place, to_f32, to_f64,
};
use crate::optim::Adam;
use crate::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.02;
pub const DEFAULT_BATCH_SIZE: usize = 32;

/// A text embedding with its reference image embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedQuery {
    pub text: Vec<f32>,
    pub references: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrModel {
    pub d_text: usize,
    pub d_ref: usize,
    pub d_out: usize,
    pub d_ext: usize,
    /// Text weight of the fusion gate, in `[0, 1]`.
    pub alpha: f64,
    /// `d_out × d_text`, row-major.
    pub w_text: Vec<f64>,
    /// `d_out × d_ref`, row-major.
    pub w_ref: Vec<f64>,
    /// `d_ext × d_out`, row-major.
    pub out_proj: Vec<f64>,
    pub temperature: f64,
}

fn identity_padded(rows: usize, cols: usize) -> Vec<f64> {
    let mut m = vec![0.0; rows * cols];
    for i in 0..rows.min(cols) {
        m[i * cols + i] = 1.0;
    }
    m
}

impl CtrModel {
    /// Identity-padded projections and `α = 0.5`.
    pub fn identity(d_text: usize, d_ref: usize, d_out: usize, d_ext: usize, temperature: f64) -> Result<Self> {
        let m = Self {
            d_text,
            d_ref,
            d_out,
            d_ext,
            alpha: 0.5,
            w_text: identity_padded(d_out, d_text),
            w_ref: identity_padded(d_out, d_ref),
            out_proj: identity_padded(d_ext, d_out),
            temperature,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_text, self.d_ref, self.d_out, self.d_ext].contains(&0) {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument("alpha must lie in [0, 1]".into()));
        }
        let shapes = [
            (self.w_text.len(), self.d_out * self.d_text),
            (self.w_ref.len(), self.d_out * self.d_ref),
            (self.out_proj.len(), self.d_ext * self.d_out),
        ];
        for (found, expected) in shapes {
            if found != expected {
                return Err(Error::DimensionMismatch { expected, found });
            }
        }
        if self.params().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    /// Flattened trainable parameters: `alpha`, `w_text`, `w_ref`, `out_proj`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.push(self.alpha);
        p.extend_from_slice(&self.w_text);
        p.extend_from_slice(&self.w_ref);
        p.extend_from_slice(&self.out_proj);
        p
    }

    pub fn n_params(&self) -> usize {
        1 + self.w_text.len() + self.w_ref.len() + self.out_proj.len()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let (a, rest) = p.split_at(1);
        let (wt, rest) = rest.split_at(self.w_text.len());
        let (wr, op) = rest.split_at(self.w_ref.len());
        self.alpha = a[0];
        self.w_text.copy_from_slice(wt);
        self.w_ref.copy_from_slice(wr);
        self.out_proj.copy_from_slice(op);
    }

    fn forward(&self, q: &ComposedQuery) -> Result<Forward> {
        if q.text.len() != self.d_text {
            return Err(Error::DimensionMismatch {
                expected: self.d_text,
                found: q.text.len(),
            });
        }
        let mut t = to_f64(&q.text);
        if normalize_in_place(&mut t) == 0.0 {
            return Err(Error::ZeroVector);
        }
        let wt_t = matvec(&self.w_text, self.d_out, self.d_text, &t);
        let (z, ref_part) = if q.references.is_empty() {
            (wt_t.clone(), None)
        } else {
            let mut r_mean = vec![0.0; self.d_ref];
            for r in &q.references {
                if r.len() != self.d_ref {
                    return Err(Error::DimensionMismatch {
                        expected: self.d_ref,
                        found: r.len(),
                    });
                }
                let mut rv = to_f64(r);
                if normalize_in_place(&mut rv) == 0.0 {
                    return Err(Error::ZeroVector);
                }
                r_mean.iter_mut().zip(rv).for_each(|(m, x)| *m += x);
            }
            let k = q.references.len() as f64;
            r_mean.iter_mut().for_each(|m| *m /= k);
            let wr_r = matvec(&self.w_ref, self.d_out, self.d_ref, &r_mean);
            let z = wt_t
                .iter()
                .zip(&wr_r)
                .map(|(a, b)| self.alpha * a + (1.0 - self.alpha) * b)
                .collect();
            (z, Some((r_mean, wr_r)))
        };
        let mut h = matvec(&self.out_proj, self.d_ext, self.d_out, &z);
        let y_norm = normalize_in_place(&mut h);
        if !(y_norm > 0.0) {
            return Err(Error::ZeroVector);
        }
        Ok(Forward {
            t,
            wt_t,
            ref_part,
            z,
            y_norm,
            h,
        })
    }

    /// Accumulates into `grad` (laid out like [`CtrModel::params`]) the
    /// gradient w.r.t. every parameter, given `g_h = dL/dh`.
    fn backward(&self, f: &Forward, g_h: &[f64], grad: &mut [f64]) {
        let g_y = normalize_backward(g_h, &f.h, f.y_norm);
        let (g_alpha, rest) = grad.split_at_mut(1);
        let (g_wt, rest) = rest.split_at_mut(self.w_text.len());
        let (g_wr, g_op) = rest.split_at_mut(self.w_ref.len());
        add_outer(g_op, &g_y, &f.z, 1.0);
        let g_z = matvec_t(&self.out_proj, self.d_ext, self.d_out, &g_y);
        match &f.ref_part {
            None => add_outer(g_wt, &g_z, &f.t, 1.0),
            Some((r_mean, wr_r)) => {
                add_outer(g_wt, &g_z, &f.t, self.alpha);
                add_outer(g_wr, &g_z, r_mean, 1.0 - self.alpha);
                g_alpha[0] += g_z
                    .iter()
                    .zip(f.wt_t.iter().zip(wr_r))
                    .map(|(g, (a, b))| g * (a - b))
                    .sum::<f64>();
            }
        }
    }
}

struct Forward {
    t: Vec<f64>,
    wt_t: Vec<f64>,
    ref_part: Option<(Vec<f64>, Vec<f64>)>,
    z: Vec<f64>,
    y_norm: f64,
    h: Vec<f64>,
}

/// Unit query embedding in the external space.
pub fn compose(model: &CtrModel, q: &ComposedQuery) -> Result<Vec<f32>> {
    Ok(to_f32(&model.forward(q)?.h))
}

/// Search embedding for a text and its selected references.
pub fn encode_query_ctr(model: &CtrModel, text: &[f32], references: &[&[f32]]) -> Result<Vec<f32>> {
    compose(
        model,
        &ComposedQuery {
            text: text.to_vec(),
            references: references.iter().map(|r| r.to_vec()).collect(),
        },
    )
}

/// `log φ(h, v) = cos(h, v) / τ` for unit `h`, `v`.
pub fn log_matching_score(h: &[f32], v: &[f32], temperature: f64) -> Result<f64> {
    Ok(crate::embedding::cosine(h, v)?.value() / temperature)
}

/// `φ(h, v) = exp(cos(h, v) / τ)`. Overflows to infinity for tiny `τ`; losses
/// use [`log_matching_score`].
pub fn matching_score(h: &[f32], v: &[f32], temperature: f64) -> Result<f64> {
    Ok(libm::exp(log_matching_score(h, v, temperature)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletRow {
    pub query: ComposedQuery,
    pub target_id: String,
    pub target: Vec<f32>,
}

/// Rows whose targets act as each other's negatives.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TripletBatch {
    pub rows: Vec<TripletRow>,
}

impl TripletBatch {
    /// Ordered pairs `(i, j)`, `i ≠ j`, whose target ids coincide. Such a
    /// target is not used as a negative for the other row.
    pub fn duplicate_target_pairs(&self) -> usize {
        let mut n = 0;
        for (i, a) in self.rows.iter().enumerate() {
            for (j, b) in self.rows.iter().enumerate() {
                if i != j && a.target_id == b.target_id {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Mean InfoNCE loss of a batch.
pub fn infonce_loss(batch: &TripletBatch, model: &CtrModel) -> Result<f64> {
    infonce_with_gradient(batch, model, None)
}

/// InfoNCE loss and its gradient over [`CtrModel::params`].
pub fn infonce_gradient(batch: &TripletBatch, model: &CtrModel) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.n_params()];
    let loss = infonce_with_gradient(batch, model, Some(&mut grad))?;
    Ok((loss, grad))
}

fn infonce_with_gradient(batch: &TripletBatch, model: &CtrModel, mut grad: Option<&mut [f64]>) -> Result<f64> {
    let b = batch.rows.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty triplet batch".into()));
    }
    let targets: Vec<Vec<f64>> = batch
        .rows
        .iter()
        .map(|r| {
            if r.target.len() != model.d_ext {
                return Err(Error::DimensionMismatch {
                    expected: model.d_ext,
                    found: r.target.len(),
                });
            }
            let mut v = to_f64(&r.target);
            if normalize_in_place(&mut v) == 0.0 {
                return Err(Error::ZeroVector);
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    let inv_tau = 1.0 / model.temperature;
    let mut total = 0.0;
    for (i, row) in batch.rows.iter().enumerate() {
        let f = model.forward(&row.query)?;
        // Candidate 0 is the positive.
        let mut cands = vec![i];
        cands.extend((0..b).filter(|&j| j != i && batch.rows[j].target_id != row.target_id));
        let logits: Vec<f64> = cands.iter().map(|&j| dot(&f.h, &targets[j]) * inv_tau).collect();
        let lse = log_sum_exp(&logits);
        total += lse - logits[0];
        if let Some(g) = grad.as_deref_mut() {
            let mut g_h = vec![0.0; model.d_ext];
            for (&j, &l) in cands.iter().zip(&logits) {
                let w = libm::exp(l - lse) - if j == i { 1.0 } else { 0.0 };
                let s = w * inv_tau / b as f64;
                g_h.iter_mut().zip(&targets[j]).for_each(|(o, v)| *o += s * v);
            }
            model.backward(&f, &g_h, g);
        }
    }
    Ok(total / b as f64)
}

/// One mined training example before target lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct CtrTriplet {
    pub text: Vec<f32>,
    pub reference: Vec<f32>,
    pub target_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrTrainConfig {
    /// Width of the fused representation; defaults to the external dimension.
    pub d_out: Option<usize>,
    pub temperature: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs training the projections with the gate frozen.
    pub stage_a_epochs: usize,
    /// Epochs training everything, gate included.
    pub stage_b_epochs: usize,
    pub seed: u64,
}

impl Default for CtrTrainConfig {
    fn default() -> Self {
        Self {
            d_out: None,
            temperature: DEFAULT_TEMPERATURE,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: 1e-3,
            stage_a_epochs: 4,
            stage_b_epochs: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Projections only.
    A,
    /// Projections and gate.
    B,
}

impl Stage {
    /// Trainable-parameter mask over [`CtrModel::params`].
    pub fn mask(self, model: &CtrModel) -> Vec<bool> {
        let mut m = vec![true; model.n_params()];
        m[0] = self == Stage::B;
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtrTrainOutcome {
    pub model: CtrModel,
    /// Mini-batch losses in training order.
    pub loss_trajectory: Vec<f64>,
    /// Duplicate-target pairs excluded from the negative sets.
    pub excluded_duplicates: usize,
}

/// Mini-batch Adam on InfoNCE. The external corpus is only read.
pub fn train_ctr(
    triplets: &[CtrTriplet],
    external: &EmbeddingCorpus,
    text_dim: usize,
    ref_dim: usize,
    cfg: &CtrTrainConfig,
) -> Result<CtrTrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let d_ext = external.dimension();
    let mut model = CtrModel::identity(text_dim, ref_dim, cfg.d_out.unwrap_or(d_ext), d_ext, cfg.temperature)?;
    let rows: Vec<TripletRow> = triplets
        .iter()
        .map(|t| {
            let target = external
                .get(&t.target_id)
                .ok_or_else(|| Error::UnknownTargetId(t.target_id.clone()))?;
            Ok(TripletRow {
                query: ComposedQuery {
                    text: t.text.clone(),
                    references: vec![t.reference.clone()],
                },
                target_id: t.target_id.clone(),
                target: target.vector.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.params();
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut trajectory = Vec::new();
    let mut excluded = 0;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let stages =
        core::iter::repeat_n(Stage::A, cfg.stage_a_epochs).chain(core::iter::repeat_n(Stage::B, cfg.stage_b_epochs));
    for stage in stages {
        let mask = stage.mask(&model);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = TripletBatch {
                rows: chunk.iter().map(|&i| rows[i].clone()).collect(),
            };
            excluded += batch.duplicate_target_pairs();
            let (loss, grad) = infonce_gradient(&batch, &model)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    iteration: trajectory.len(),
                    bce: loss,
                    kl: 0.0,
                });
            }
            trajectory.push(loss);
            adam.step(&mut params, &grad, Some(&mask));
            params[0] = params[0].clamp(0.0, 1.0);
            model.set_params(&params);
        }
    }
    Ok(CtrTrainOutcome {
        model,
        loss_trajectory: trajectory,
        excluded_duplicates: excluded,
    })
}
