use std::collections::BTreeMap;

use fsir_core::ctr::{encode_query_ctr, train_ctr, CtrTrainConfig, CtrTriplet};
use fsir_core::optim::Adam;
use fsir_core::prompt::{
    refine_query, train_prompt, ComposerKind, ExampleClass, FewShotBatch, PlObjective, ProGradMode, PromptState,
    TrainConfig, ZeroShotAnchor, MIN_SLOPE,
};
use fsir_core::refselect::{combination_score, score_individual, ValidationSet};
use fsir_core::{cosine, normalize, EmbeddingCorpus, EmbeddingRecord, Modality};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    normalize(&(0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>()).unwrap()
}

fn jitter(rng: &mut ChaCha8Rng, v: &[f32], s: f32) -> Vec<f32> {
    normalize(&v.iter().map(|x| x + rng.random_range(-s..s)).collect::<Vec<_>>()).unwrap()
}

type Separable = (Vec<Vec<f32>>, Vec<(Vec<f32>, ExampleClass)>, Vec<f32>);

/// Positives around `u`, negatives around `-u`; the query is a random
/// direction leaning toward `u` by `lean`.
fn separable(rng: &mut ChaCha8Rng, d: usize, lean: f32) -> Separable {
    let u = unit(rng, d);
    let neg: Vec<f32> = u.iter().map(|x| -x).collect();
    let mut items = Vec::new();
    for _ in 0..8 {
        items.push((jitter(rng, &u, 0.2), ExampleClass::HardPositive));
        items.push((jitter(rng, &neg, 0.2), ExampleClass::HardNegative));
    }
    let r = unit(rng, d);
    let w = normalize(&r.iter().zip(&u).map(|(a, b)| a + lean * b).collect::<Vec<_>>()).unwrap();
    (vec![w.clone()], items, w)
}

#[test]
fn gate_with_zero_lambda_is_plain_bce_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (tokens, items, w) = separable(&mut rng, 12, 0.0);
    let batch = FewShotBatch::new(items.iter().map(|(v, c)| (v.as_slice(), *c))).unwrap();
    let anchor = ZeroShotAnchor::new(&w).unwrap();
    let cfg = TrainConfig {
        iterations: 60,
        context_len: 4,
        kl_coefficient: 0.0,
        prograd_mode: ProGradMode::Gate,
        ..Default::default()
    };
    let trained = train_prompt(&tokens, &batch, &anchor, &cfg).unwrap();

    let objective = PlObjective::new(&tokens, &batch, &anchor, cfg.weights, cfg.init_a).unwrap();
    let mut state = PromptState::init(&anchor, &cfg);
    let mut params = state.params();
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut trajectory = Vec::new();
    for _ in 0..cfg.iterations {
        let terms = objective.evaluate(&state).unwrap();
        trajectory.push(terms.bce);
        adam.step(&mut params, &terms.grad_bce, None);
        let a = params.len() - 2;
        params[a] = params[a].max(MIN_SLOPE);
        state.set_params(&params);
    }
    assert_eq!(trained.loss_trajectory, trajectory);
    assert_eq!(trained.state, state);
}

fn final_bce(lean: f32, cfg: TrainConfig, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tokens, items, w) = separable(&mut rng, 16, lean);
    let batch = FewShotBatch::new(items.iter().map(|(v, c)| (v.as_slice(), *c))).unwrap();
    let anchor = ZeroShotAnchor::new(&w).unwrap();
    let out = train_prompt(&tokens, &batch, &anchor, &cfg).unwrap();
    let objective = PlObjective::new(&tokens, &batch, &anchor, cfg.weights, cfg.init_a).unwrap();
    (objective.evaluate(&out.state).unwrap().bce, out.state.a)
}

#[test]
fn separable_batch_is_learned() {
    for composer in [ComposerKind::MeanPool, ComposerKind::Direct] {
        let cfg = TrainConfig {
            iterations: 500,
            composer,
            ..Default::default()
        };
        let (bce, a) = final_bce(0.3, cfg, 8);
        assert!(bce < 0.1, "{composer:?}: final BCE {bce}");
        assert!(a >= MIN_SLOPE);
    }
}

#[test]
fn gate_mode_learns_against_an_uninformative_query() {
    let cfg = TrainConfig {
        iterations: 500,
        prograd_mode: ProGradMode::Gate,
        ..Default::default()
    };
    let (bce, _) = final_bce(0.0, cfg, 8);
    assert!(bce < 0.1, "final BCE {bce}");
}

/// Projection only admits updates that do not fight the KL pull. When the
/// zero-shot query says nothing about the labels, every useful step does.
#[test]
fn projection_holds_an_uninformative_query_near_zero_shot() {
    let cfg = TrainConfig {
        iterations: 500,
        ..Default::default()
    };
    let (bce, _) = final_bce(0.0, cfg, 8);
    assert!(bce > 0.3, "final BCE {bce}");
}

#[test]
fn prompt_training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (tokens, items, w) = separable(&mut rng, 10, 0.3);
    let batch = FewShotBatch::new(items.iter().map(|(v, c)| (v.as_slice(), *c))).unwrap();
    let anchor = ZeroShotAnchor::new(&w).unwrap();
    let cfg = TrainConfig {
        iterations: 50,
        seed: 99,
        ..Default::default()
    };
    let a = train_prompt(&tokens, &batch, &anchor, &cfg).unwrap();
    let b = train_prompt(&tokens, &batch, &anchor, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        refine_query(&a.state, &tokens).unwrap(),
        refine_query(&b.state, &tokens).unwrap()
    );
}

#[test]
fn mean_pool_over_matching_context_returns_token_mean() {
    let state = PromptState {
        composer: ComposerKind::MeanPool,
        context: vec![vec![0.0, 2.0, 0.0], vec![2.0, 0.0, 0.0]],
        a: 1.0,
        b: 0.0,
    };
    let tokens = vec![vec![0.0f32, 2.0, 0.0], vec![2.0, 0.0, 0.0]];
    let t = refine_query(&state, &tokens).unwrap();
    let s = std::f32::consts::FRAC_1_SQRT_2;
    assert!((t[0] - s).abs() < 1e-7 && (t[1] - s).abs() < 1e-7 && t[2] == 0.0);
}

#[test]
fn ctr_learns_identity_alignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 8;
    let n = 64;
    let targets: Vec<Vec<f32>> = (0..n).map(|_| unit(&mut rng, d)).collect();
    let records = targets
        .iter()
        .enumerate()
        .map(|(i, v)| EmbeddingRecord::new(format!("t{i:02}"), v.clone(), Modality::Image).unwrap())
        .collect();
    let external = EmbeddingCorpus::new(d, records).unwrap();
    // The text carries nothing; the reference is the target itself.
    let triplets: Vec<CtrTriplet> = (0..n)
        .map(|i| CtrTriplet {
            text: unit(&mut rng, d),
            reference: targets[i].clone(),
            target_id: format!("t{i:02}"),
        })
        .collect();
    let cfg = CtrTrainConfig {
        learning_rate: 1e-2,
        stage_a_epochs: 10,
        stage_b_epochs: 30,
        batch_size: 16,
        temperature: 0.1,
        ..Default::default()
    };
    let out = train_ctr(&triplets, &external, d, d, &cfg).unwrap();
    let mean_cos: f64 = triplets
        .iter()
        .zip(&targets)
        .map(|(t, v)| {
            let h = encode_query_ctr(&out.model, &t.text, &[&t.reference]).unwrap();
            cosine(&h, v).unwrap().value()
        })
        .sum::<f64>()
        / n as f64;
    assert!(mean_cos >= 0.95, "mean cosine {mean_cos}");
    assert!(out.model.alpha < 0.5);
}

#[test]
fn stage_one_winner_is_the_exhaustive_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = 6;
    let c = unit(&mut rng, d);
    let mut items = Vec::new();
    for i in 0..8 {
        items.push((format!("p{i}"), jitter(&mut rng, &c, 0.6), true));
        items.push((format!("n{i}"), unit(&mut rng, d), false));
    }
    let validation = ValidationSet::new(items).unwrap();
    let mut model = fsir_core::ctr::CtrModel::identity(d, d, d, d, 0.05).unwrap();
    model.alpha = 0.3;
    let text = unit(&mut rng, d);
    let pool: Vec<String> = (0..8).map(|i| format!("p{i}")).collect();
    let scores = score_individual(&model, &text, &pool, &validation, 10).unwrap();
    let independent: BTreeMap<String, f64> = pool
        .iter()
        .map(|id| {
            (
                id.clone(),
                combination_score(&model, &text, std::slice::from_ref(id), &validation, 10).unwrap(),
            )
        })
        .collect();
    assert_eq!(scores, independent);
    assert_eq!(scores, score_individual(&model, &text, &pool, &validation, 10).unwrap());
}
