use std::collections::BTreeSet;

use fsir_core::prompt::{calibrated_probability, prograd_combine, ProGradMode};
use fsir_core::{
    average_precision_at_k, batch_similarity, cosine, normalize, EmbeddingCorpus, EmbeddingRecord, ExactIndex,
    Modality, VectorIndex,
};
use proptest::prelude::*;

fn vec_of(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn corpus_of(rows: &[Vec<f32>]) -> EmbeddingCorpus {
    let dim = rows[0].len();
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, v)| EmbeddingRecord::new(format!("id{i:04}"), normalize(v).unwrap(), Modality::Image).unwrap())
        .collect();
    EmbeddingCorpus::new(dim, records).unwrap()
}

/// Straightforward O(K²) AP@K: precision at every relevant rank, recomputed
/// from scratch.
fn ap_reference(ranking: &[String], positives: &BTreeSet<String>, k: usize) -> f64 {
    let top: Vec<&String> = ranking.iter().take(k).collect();
    let mut sum = 0.0;
    for i in 0..top.len() {
        if positives.contains(top[i]) {
            let rel = (0..=i).filter(|&j| positives.contains(top[j])).count();
            sum += rel as f64 / (i + 1) as f64;
        }
    }
    sum / k.min(positives.len()) as f64
}

fn ranking_and_labels() -> impl Strategy<Value = (Vec<String>, BTreeSet<String>, usize)> {
    (1usize..60).prop_flat_map(|n| {
        (
            Just((0..n).map(|i| format!("x{i}")).collect::<Vec<_>>()).prop_shuffle(),
            prop::collection::vec(any::<bool>(), n),
            1usize..80,
        )
            .prop_filter_map("needs a positive", |(r, flags, k)| {
                let pos: BTreeSet<String> = flags
                    .iter()
                    .enumerate()
                    .filter(|(_, f)| **f)
                    .map(|(i, _)| format!("x{i}"))
                    .collect();
                (!pos.is_empty()).then_some((r, pos, k))
            })
    })
}

proptest! {
    #[test]
    fn cosine_is_symmetric((u, v) in (2usize..40).prop_flat_map(|d| (vec_of(d), vec_of(d)))) {
        let (u, v) = (normalize(&u).unwrap(), normalize(&v).unwrap());
        prop_assert_eq!(cosine(&u, &v).unwrap(), cosine(&v, &u).unwrap());
        let c = cosine(&u, &v).unwrap().value();
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn normalize_gives_unit_norm_and_is_idempotent(v in vec_of(17)) {
        let n = normalize(&v).unwrap();
        let len: f64 = n.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!((len - 1.0).abs() < 1e-6);
        let nn = normalize(&n).unwrap();
        for (a, b) in n.iter().zip(&nn) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_similarity_matches_loop(rows in prop::collection::vec(vec_of(8), 1..30), q in vec_of(8)) {
        let corpus = corpus_of(&rows);
        let q = normalize(&q).unwrap();
        let batch = batch_similarity(&q, &corpus).unwrap();
        prop_assert_eq!(batch.len(), corpus.len());
        for ((id, s), r) in batch.iter().zip(corpus.records()) {
            prop_assert_eq!(*id, r.id.as_str());
            let expect: f64 = q.iter().zip(&r.vector).map(|(a, b)| *a as f64 * *b as f64).sum();
            prop_assert!((s.value() - expect.clamp(-1.0, 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_index_matches_sort_oracle(rows in prop::collection::vec(vec_of(6), 1..80), q in vec_of(6), k in 1usize..100) {
        let corpus = corpus_of(&rows);
        let idx = ExactIndex::build(&corpus).unwrap();
        let q = normalize(&q).unwrap();
        let mut oracle: Vec<(f64, String)> = corpus
            .records()
            .iter()
            .map(|r| (q.iter().zip(&r.vector).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>(), r.id.clone()))
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let got: Vec<String> = idx.search(&q, k).unwrap().into_iter().map(|h| h.id).collect();
        let want: Vec<String> = oracle.into_iter().take(k).map(|(_, id)| id).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn smaller_k_is_a_prefix(rows in prop::collection::vec(vec_of(5), 1..60), q in vec_of(5), k1 in 1usize..30, k2 in 1usize..30) {
        let idx = ExactIndex::build(&corpus_of(&rows)).unwrap();
        let (lo, hi) = (k1.min(k2), k1.max(k2));
        let small = idx.search(&q, lo).unwrap();
        let large = idx.search(&q, hi).unwrap();
        prop_assert_eq!(&large[..small.len()], &small[..]);
    }

    #[test]
    fn ap_matches_reference((ranking, pos, k) in ranking_and_labels()) {
        let ap = average_precision_at_k(&ranking, &pos, k).unwrap();
        prop_assert!((ap - ap_reference(&ranking, &pos, k)).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
    }

    #[test]
    fn ap_ignores_order_below_k((mut ranking, pos, k) in ranking_and_labels(), seed in any::<u64>()) {
        let before = average_precision_at_k(&ranking, &pos, k).unwrap();
        if ranking.len() > k {
            let tail = &mut ranking[k..];
            let n = tail.len();
            tail.rotate_left((seed as usize) % n);
        }
        prop_assert_eq!(average_precision_at_k(&ranking, &pos, k).unwrap(), before);
    }

    #[test]
    fn promoting_a_positive_never_lowers_ap((mut ranking, pos, k) in ranking_and_labels(), at in any::<prop::sample::Index>()) {
        let i = at.index(ranking.len());
        if i > 0 && pos.contains(&ranking[i]) && !pos.contains(&ranking[i - 1]) {
            let before = average_precision_at_k(&ranking, &pos, k).unwrap();
            ranking.swap(i - 1, i);
            prop_assert!(average_precision_at_k(&ranking, &pos, k).unwrap() >= before);
        }
    }

    #[test]
    fn calibration_preserves_ranking(xs in prop::collection::vec(-1.0f64..1.0, 1..50), a in 1e-3f64..30.0, b in -10.0f64..10.0) {
        let mut by_x: Vec<usize> = (0..xs.len()).collect();
        by_x.sort_by(|&i, &j| xs[j].total_cmp(&xs[i]).then(i.cmp(&j)));
        let ps: Vec<f64> = xs.iter().map(|&x| calibrated_probability(x, a, b)).collect();
        // Saturation can tie distinct scores, hence the non-strict check.
        for w in by_x.windows(2) {
            prop_assert!(ps[w[0]] >= ps[w[1]]);
        }
    }

    #[test]
    fn projection_never_opposes_kl(g in prop::collection::vec(-5.0f64..5.0, 1..20), h in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let n = g.len().min(h.len());
        let (g, h) = (&g[..n], &h[..n]);
        let out = prograd_combine(g, h, ProGradMode::Projection, 1.0);
        let d: f64 = out.iter().zip(h).map(|(a, b)| a * b).sum();
        prop_assert!(d >= -1e-9);
    }
}
