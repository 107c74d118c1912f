//! Per-query few-shot prompt tuning.
//!
//! A prompt is a set of learnable context vectors passed through a
//! differentiable [`ComposerKind`] to a unit query embedding. Each batch item's
//! cosine score `x` is calibrated as `p = σ(a·x + b)` and scored with weighted
//! binary cross-entropy. A KL term keeps the batch-softmax of the learned
//! scores close to the one produced by the frozen zero-shot embedding, and the
//! two gradients are merged with [`prograd_combine`].

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, log_sum_exp, norm, normalize_backward, normalize_in_place, to_f32, to_f64};
use crate::optim::Adam;
use crate::{Error, Result};

/// Lower bound `a` is projected onto after every step.
pub const MIN_SLOPE: f64 = 1e-3;
/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before taking logs.
pub const P_CLAMP: f64 = 1e-7;

/// `σ(a·x + b)`.
pub fn calibrated_probability(x: f64, a: f64, b: f64) -> f64 {
    sigmoid(a * x + b)
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + libm::exp(-s))
    } else {
        let e = libm::exp(s);
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with `p` clamped away from 0 and 1.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    -(y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p))
}

/// `KL(p_zs ‖ p) = −Σ p_zs · log(p / p_zs)`.
pub fn kl_loss(p_zs: &[f64], p: &[f64]) -> Result<f64> {
    if p_zs.len() != p.len() {
        return Err(Error::DimensionMismatch {
            expected: p_zs.len(),
            found: p.len(),
        });
    }
    for dist in [p_zs, p] {
        if dist.iter().any(|&x| !(x > 0.0)) || (dist.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::DistributionInvalid);
        }
    }
    Ok(-p_zs.iter().zip(p).map(|(&q, &r)| q * libm::log(r / q)).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProGradMode {
    /// Drop the component of the task gradient that opposes the KL gradient.
    Projection,
    /// Add the KL gradient scaled by `λ · max(0, cos(g_bce, g_kl))`.
    Gate,
}

/// Merges the task (BCE) gradient with the KL gradient.
///
/// `lambda` only affects [`ProGradMode::Gate`]. A zero KL gradient returns
/// `g_bce` unchanged.
pub fn prograd_combine(g_bce: &[f64], g_kl: &[f64], mode: ProGradMode, lambda: f64) -> Vec<f64> {
    let kl_sq = dot(g_kl, g_kl);
    if kl_sq == 0.0 {
        return g_bce.to_vec();
    }
    let d = dot(g_bce, g_kl);
    match mode {
        ProGradMode::Projection => {
            if d >= 0.0 {
                g_bce.to_vec()
            } else {
                let c = d / kl_sq;
                g_bce.iter().zip(g_kl).map(|(b, k)| b - c * k).collect()
            }
        }
        ProGradMode::Gate => {
            let bce_norm = norm(g_bce);
            let gate = if bce_norm == 0.0 {
                0.0
            } else {
                (d / (bce_norm * libm::sqrt(kl_sq))).max(0.0)
            };
            g_bce.iter().zip(g_kl).map(|(b, k)| b + gate * lambda * k).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposerKind {
    /// Mean of the context rows and the query token rows, normalized.
    MeanPool,
    /// A single learnable vector, normalized; query tokens are ignored.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleClass {
    HardPositive,
    HardNegative,
    EasyNegative,
}

impl ExampleClass {
    pub fn label(self) -> f64 {
        match self {
            ExampleClass::HardPositive => 1.0,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub embedding: Vec<f64>,
    pub class: ExampleClass,
}

/// Labeled reference images for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotBatch {
    items: Vec<BatchItem>,
    dim: usize,
}

impl FewShotBatch {
    /// Normalizes every embedding; needs at least one positive and one negative.
    pub fn new<'a>(items: impl IntoIterator<Item = (&'a [f32], ExampleClass)>) -> Result<Self> {
        let mut out = Vec::new();
        let mut dim = None;
        for (v, class) in items {
            let d = *dim.get_or_insert(v.len());
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: v.len(),
                });
            }
            let mut e = to_f64(v);
            if normalize_in_place(&mut e) == 0.0 {
                return Err(Error::ZeroVector);
            }
            out.push(BatchItem { embedding: e, class });
        }
        let has_pos = out.iter().any(|i| i.class == ExampleClass::HardPositive);
        let has_neg = out.iter().any(|i| i.class != ExampleClass::HardPositive);
        if !has_pos || !has_neg {
            return Err(Error::InsufficientExamples(
                "a few-shot batch needs at least one positive and one negative".into(),
            ));
        }
        Ok(Self {
            items: out,
            dim: dim.unwrap_or(0),
        })
    }

    pub fn items(&self) -> &[BatchItem] {
        &self.items
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }
}

/// The frozen zero-shot query embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotAnchor(Vec<f64>);

impl ZeroShotAnchor {
    pub fn new(v: &[f32]) -> Result<Self> {
        let mut e = to_f64(v);
        if normalize_in_place(&mut e) == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(Self(e))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub hard_positive: f64,
    pub hard_negative: f64,
    pub easy_negative: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self {
            hard_positive: 1.0,
            hard_negative: 1.0,
            easy_negative: 0.25,
        }
    }
}

impl ClassWeights {
    pub fn of(&self, class: ExampleClass) -> f64 {
        match class {
            ExampleClass::HardPositive => self.hard_positive,
            ExampleClass::HardNegative => self.hard_negative,
            ExampleClass::EasyNegative => self.easy_negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Context rows for the mean-pool composer; the direct composer always uses one.
    pub context_len: usize,
    pub composer: ComposerKind,
    pub weights: ClassWeights,
    pub kl_coefficient: f64,
    pub prograd_mode: ProGradMode,
    pub seed: u64,
    pub init_a: f64,
    pub init_b: f64,
    /// Standard deviation of the context initialization noise.
    pub init_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            iterations: 200,
            context_len: 16,
            composer: ComposerKind::MeanPool,
            weights: ClassWeights::default(),
            kl_coefficient: 1.0,
            prograd_mode: ProGradMode::Projection,
            seed: 0,
            init_a: 10.0,
            init_b: -3.0,
            init_noise: 0.02,
        }
    }
}

/// Learnable prompt: context rows plus the calibration `(a, b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub composer: ComposerKind,
    pub context: Vec<Vec<f64>>,
    pub a: f64,
    pub b: f64,
}

impl PromptState {
    /// Context rows scattered around the anchor with seeded Gaussian noise.
    /// The noise is centered across rows, so the mean context row (and with it
    /// the composer output for tokens averaging to the anchor) starts exactly on
    /// the anchor direction.
    pub fn init(anchor: &ZeroShotAnchor, cfg: &TrainConfig) -> Self {
        let m = match cfg.composer {
            ComposerKind::MeanPool => cfg.context_len.max(1),
            ComposerKind::Direct => 1,
        };
        let d = anchor.0.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut noise: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        cfg.init_noise * z
                    })
                    .collect()
            })
            .collect();
        for j in 0..d {
            let mean = noise.iter().map(|r| r[j]).sum::<f64>() / m as f64;
            noise.iter_mut().for_each(|r| r[j] -= mean);
        }
        let context = noise
            .into_iter()
            .map(|n| n.iter().zip(&anchor.0).map(|(x, w)| w + x).collect())
            .collect();
        Self {
            composer: cfg.composer,
            context,
            a: cfg.init_a,
            b: cfg.init_b,
        }
    }

    pub fn context_len(&self) -> usize {
        self.context.len()
    }

    pub fn dimension(&self) -> usize {
        self.context.first().map_or(0, Vec::len)
    }

    /// Flattened parameters: context rows, then `a`, then `b`.
    pub fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.context.iter().flatten().copied().collect();
        p.push(self.a);
        p.push(self.b);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let d = self.dimension();
        for (row, chunk) in self.context.iter_mut().zip(p.chunks_exact(d)) {
            row.copy_from_slice(chunk);
        }
        let n = p.len();
        self.a = p[n - 2];
        self.b = p[n - 1];
    }
}

/// Composer input built from the query token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTokens {
    sum: Vec<f64>,
    count: usize,
}

impl QueryTokens {
    pub fn new(tokens: &[Vec<f32>], dim: usize) -> Result<Self> {
        let mut sum = vec![0.0; dim];
        for t in tokens {
            if t.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: t.len(),
                });
            }
            for (s, &x) in sum.iter_mut().zip(t) {
                *s += x as f64;
            }
        }
        Ok(Self {
            sum,
            count: tokens.len(),
        })
    }
}

struct Composed {
    t: Vec<f64>,
    e_norm: f64,
    denom: f64,
}

fn compose(state: &PromptState, tokens: &QueryTokens) -> Result<Composed> {
    let (mut e, denom) = match state.composer {
        ComposerKind::Direct => (state.context[0].clone(), 1.0),
        ComposerKind::MeanPool => {
            let denom = (state.context.len() + tokens.count) as f64;
            let mut e = tokens.sum.clone();
            for row in &state.context {
                e.iter_mut().zip(row).for_each(|(s, x)| *s += x);
            }
            e.iter_mut().for_each(|s| *s /= denom);
            (e, denom)
        }
    };
    let e_norm = normalize_in_place(&mut e);
    if !(e_norm > 0.0) || !e_norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(Composed { t: e, e_norm, denom })
}

/// Refined search embedding produced by a trained prompt.
pub fn refine_query(state: &PromptState, query_tokens: &[Vec<f32>]) -> Result<Vec<f32>> {
    let tokens = QueryTokens::new(query_tokens, state.dimension())?;
    Ok(to_f32(&compose(state, &tokens)?.t))
}

/// Loss values and gradients (over [`PromptState::params`]) at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct PlTerms {
    pub bce: f64,
    pub kl: f64,
    pub grad_bce: Vec<f64>,
    pub grad_kl: Vec<f64>,
}

/// The training objective for one query.
#[derive(Debug, Clone)]
pub struct PlObjective<'a> {
    batch: &'a FewShotBatch,
    tokens: QueryTokens,
    weights: ClassWeights,
    total_weight: f64,
    zs_dist: Vec<f64>,
}

impl<'a> PlObjective<'a> {
    /// The zero-shot distribution is the batch softmax of `init_a · cos(anchor, v)`.
    pub fn new(
        query_tokens: &[Vec<f32>],
        batch: &'a FewShotBatch,
        anchor: &ZeroShotAnchor,
        weights: ClassWeights,
        init_a: f64,
    ) -> Result<Self> {
        let dim = batch.dimension();
        if anchor.0.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: anchor.0.len(),
            });
        }
        let total_weight: f64 = batch.items.iter().map(|i| weights.of(i.class)).sum();
        if !(total_weight > 0.0) {
            return Err(Error::InvalidArgument("class weights sum to zero".into()));
        }
        let zs_logits: Vec<f64> = batch
            .items
            .iter()
            .map(|i| init_a * dot(&anchor.0, &i.embedding))
            .collect();
        let lse = log_sum_exp(&zs_logits);
        Ok(Self {
            batch,
            tokens: QueryTokens::new(query_tokens, dim)?,
            weights,
            total_weight,
            zs_dist: zs_logits.iter().map(|u| libm::exp(u - lse)).collect(),
        })
    }

    pub fn zero_shot_distribution(&self) -> &[f64] {
        &self.zs_dist
    }

    /// `bce + lambda · kl`.
    pub fn loss(&self, state: &PromptState, lambda: f64) -> Result<f64> {
        let t = self.evaluate(state)?;
        Ok(t.bce + lambda * t.kl)
    }

    pub fn evaluate(&self, state: &PromptState) -> Result<PlTerms> {
        let dim = self.batch.dim;
        if state.dimension() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: state.dimension(),
            });
        }
        let c = compose(state, &self.tokens)?;
        let items = &self.batch.items;
        let xs: Vec<f64> = items.iter().map(|i| dot(&c.t, &i.embedding)).collect();

        // Weighted-mean BCE and its derivative w.r.t. each logit s = a·x + b.
        let mut bce = 0.0;
        let mut d_s = Vec::with_capacity(items.len());
        for (item, &x) in items.iter().zip(&xs) {
            let w = self.weights.of(item.class) / self.total_weight;
            let y = item.class.label();
            let p = calibrated_probability(x, state.a, state.b);
            bce += w * bce_loss(p, y);
            let clamped = !(P_CLAMP..=1.0 - P_CLAMP).contains(&p);
            d_s.push(if clamped { 0.0 } else { w * (p - y) });
        }

        // KL between zero-shot and learned batch softmax over u = a·x.
        let logits: Vec<f64> = xs.iter().map(|x| state.a * x).collect();
        let lse = log_sum_exp(&logits);
        let mut kl = 0.0;
        let mut d_u = Vec::with_capacity(items.len());
        for (&q, &u) in self.zs_dist.iter().zip(&logits) {
            let log_p = u - lse;
            if q > 0.0 {
                kl += q * (libm::log(q) - log_p);
            }
            d_u.push(libm::exp(log_p) - q);
        }

        let grad_bce = self.backprop(state, &c, &xs, &d_s, true);
        let grad_kl = self.backprop(state, &c, &xs, &d_u, false);
        Ok(PlTerms {
            bce,
            kl,
            grad_bce,
            grad_kl,
        })
    }

    /// Pulls per-item logit gradients back to the flattened parameters.
    fn backprop(&self, state: &PromptState, c: &Composed, xs: &[f64], d_logit: &[f64], with_b: bool) -> Vec<f64> {
        let dim = self.batch.dim;
        let mut g_t = vec![0.0; dim];
        let mut g_a = 0.0;
        let mut g_b = 0.0;
        for ((item, &x), &g) in self.batch.items.iter().zip(xs).zip(d_logit) {
            g_a += g * x;
            g_b += g;
            let s = g * state.a;
            g_t.iter_mut().zip(&item.embedding).for_each(|(o, v)| *o += s * v);
        }
        let g_e = normalize_backward(&g_t, &c.t, c.e_norm);
        let m = state.context.len();
        let mut out = Vec::with_capacity(m * dim + 2);
        match state.composer {
            ComposerKind::MeanPool => {
                for _ in 0..m {
                    out.extend(g_e.iter().map(|g| g / c.denom));
                }
            }
            ComposerKind::Direct => {
                out.extend_from_slice(&g_e);
                out.extend(core::iter::repeat_n(0.0, (m - 1) * dim));
            }
        }
        out.push(g_a);
        out.push(if with_b { g_b } else { 0.0 });
        out
    }
}

/// Final prompt and the per-iteration total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: PromptState,
    pub loss_trajectory: Vec<f64>,
}

/// Adam descent on the combined objective. Deterministic for a fixed seed.
pub fn train_prompt(
    query_tokens: &[Vec<f32>],
    batch: &FewShotBatch,
    anchor: &ZeroShotAnchor,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("learning rate must be positive".into()));
    }
    if !(cfg.init_a > 0.0) {
        return Err(Error::InvalidArgument("initial slope a must be positive".into()));
    }
    let objective = PlObjective::new(query_tokens, batch, anchor, cfg.weights, cfg.init_a)?;
    let mut state = PromptState::init(anchor, cfg);
    let mut params = state.params();
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut trajectory = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let terms = objective.evaluate(&state)?;
        let total = terms.bce + cfg.kl_coefficient * terms.kl;
        if !total.is_finite() || terms.grad_bce.iter().chain(&terms.grad_kl).any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration,
                bce: terms.bce,
                kl: terms.kl,
            });
        }
        trajectory.push(total);
        let g = prograd_combine(&terms.grad_bce, &terms.grad_kl, cfg.prograd_mode, cfg.kl_coefficient);
        adam.step(&mut params, &g, None);
        let a_idx = params.len() - 2;
        params[a_idx] = params[a_idx].max(MIN_SLOPE);
        state.set_params(&params);
    }
    Ok(TrainOutcome {
        state,
        loss_trajectory: trajectory,
    })
}
