use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use fsir::service::{router, AppState};
use fsir::{cli, fsem, models};
use fsir_core::ctr::{train_ctr, CtrTrainConfig, CtrTriplet};
use fsir_core::prompt::refine_query;
use fsir_core::synth::{generate, SynthConfig, SyntheticBenchmark};
use fsir_core::triplet::{mine_triplets, MinerConfig};
use fsir_core::{ExactIndex, VectorIndex};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn small() -> SynthConfig {
    SynthConfig {
        queries: 4,
        positives_per_query: 30,
        hn_per_cluster: 20,
        easy_negatives: 300,
        ctr_concepts: 4,
        ctr_images_per_concept: 5,
        ..SynthConfig::default()
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
    bench: SyntheticBenchmark,
    state_dir: std::path::PathBuf,
    data: std::path::PathBuf,
}

fn write_ctr_model(b: &SyntheticBenchmark, path: &Path) {
    let mined = mine_triplets(&b.ctr_pool, &MinerConfig::default()).unwrap();
    let ext = b.ctr_images().unwrap();
    let caption = |id: &str| {
        b.ctr_pool
            .iter()
            .find(|c| c.caption_id == id)
            .unwrap()
            .caption_embedding
            .clone()
    };
    let trips: Vec<_> = mined
        .iter()
        .map(|t| CtrTriplet {
            text: caption(&t.query_text_id),
            reference: ext.vector(&t.reference_id).unwrap().to_vec(),
            target_id: t.target_id.clone(),
        })
        .collect();
    let cfg = CtrTrainConfig {
        stage_a_epochs: 1,
        stage_b_epochs: 1,
        ..Default::default()
    };
    let out = train_ctr(&trips, &ext, 64, 64, &cfg).unwrap();
    let sidecar = models::CtrSidecar {
        config: cfg,
        triplets: trips.len(),
        excluded_duplicates: out.excluded_duplicates,
        loss_trajectory: out.loss_trajectory,
        external_digest: fsem::digest(&ext).unwrap(),
    };
    models::write_ctr(&out.model, &sidecar, path).unwrap();
}

async fn fixture(with_ctr: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let bench = generate(&small()).unwrap();
    cli::write_synth(&bench, &data).unwrap();
    let mut req = json!({
        "manifest": data.join("manifest.json"),
        "texts": data.join("texts.fsem"),
    });
    if with_ctr {
        write_ctr_model(&bench, &data.join("model.fctr"));
        req["ctr_model"] = json!(data.join("model.fctr"));
    }
    let state_dir = dir.path().join("state");
    let app = router(AppState::new(&state_dir).unwrap());
    let (status, body) = call(&app, "POST", "/corpus", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    Fixture {
        _dir: dir,
        app,
        bench,
        state_dir,
        data,
    }
}

async fn call_raw(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, String, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, ctype, value)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, _, v) = call_raw(app, method, uri, body).await;
    (s, v)
}

async fn new_session(f: &Fixture, query: usize) -> String {
    let text = &f.bench.manifest.queries[query].text;
    let (s, v) = call(&f.app, "POST", "/sessions", Some(json!({ "query_text": text }))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn mark(f: &Fixture, id: &str, item: &str, label: &str) -> (StatusCode, Value) {
    call(
        &f.app,
        "POST",
        &format!("/sessions/{id}/feedback"),
        Some(json!({ "item_id": item, "label": label })),
    )
    .await
}

/// Marks 3 FSR positives and 2 FSR hard negatives of the session's query.
async fn mark_fsr(f: &Fixture, id: &str, query: usize) {
    let fsr = &f.bench.manifest.fsr[query];
    for p in &fsr.positives[..3] {
        assert_eq!(mark(f, id, p, "positive").await.0, StatusCode::OK);
    }
    for n in fsr.hard_negatives().take(2) {
        assert_eq!(mark(f, id, n, "hard_negative").await.0, StatusCode::OK);
    }
}

async fn wait_done(f: &Fixture, id: &str) -> Value {
    for _ in 0..600 {
        let (_, v) = call(&f.app, "GET", &format!("/sessions/{id}/status"), None).await;
        if v["status"]["state"] != "running" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("refinement did not finish");
}

#[tokio::test]
async fn health_reports_corpus_digest() {
    let f = fixture(false).await;
    let (s, v) = call(&f.app, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["corpus_loaded"], true);
    assert_eq!(v["corpus_digest"], fsem::digest(&f.bench.images).unwrap());
    assert_eq!(v["queries"], 4);
}

#[tokio::test]
async fn search_returns_k_ranked_ids() {
    let f = fixture(false).await;
    let q = &f.bench.manifest.queries[0];
    let (s, v) = call(
        &f.app,
        "POST",
        "/search",
        Some(json!({ "query_text": q.text, "k": 10 })),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let results = v["results"].as_array().unwrap();
    assert_eq!(results.len(), 10);
    assert_eq!(v["refined"], false);
    let idx = ExactIndex::build(&f.bench.images).unwrap();
    let expected = idx.search(f.bench.texts.vector(&q.text).unwrap(), 10).unwrap();
    for (r, h) in results.iter().zip(&expected) {
        assert_eq!(r["id"], h.id.as_str());
        assert_eq!(r["score"].as_f64().unwrap(), h.similarity.value());
        assert!(r.get("thumbnail").is_none());
    }
}

#[tokio::test]
async fn thumbnails_come_from_the_image_path_map() {
    let f = fixture(false).await;
    let q = &f.bench.manifest.queries[0];
    let paths = f.data.join("paths.json");
    let first = f.bench.images.records()[0].id.clone();
    std::fs::write(&paths, json!({ &first: "thumbs/first.jpg" }).to_string()).unwrap();
    let req = json!({
        "manifest": f.data.join("manifest.json"),
        "texts": f.data.join("texts.fsem"),
        "image_paths": paths,
    });
    let (s, v) = call(&f.app, "POST", "/corpus", Some(req)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let (_, v) = call(&f.app, "POST", "/search", Some(json!({ "query_text": q.text, "k": 2000 }))).await;
    let results = v["results"].as_array().unwrap();
    for r in results {
        if r["id"] == first.as_str() {
            assert_eq!(r["thumbnail"], "thumbs/first.jpg");
        } else {
            assert!(r.get("thumbnail").is_none());
        }
    }
    assert!(results.iter().any(|r| r["id"] == first.as_str()));
}

#[tokio::test]
async fn unknown_text_is_a_422_problem() {
    let f = fixture(false).await;
    let (s, ctype, v) = call_raw(&f.app, "POST", "/search", Some(json!({ "query_text": "no such text" }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(ctype, "application/problem+json");
    assert_eq!(v["code"], "NO_EMBEDDING");
    assert_eq!(v["status"], 422);
    let (s, v) = call(&f.app, "POST", "/sessions", Some(json!({ "query_text": "nope" }))).await;
    assert_eq!(
        (s, v["code"].as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, Some("NO_EMBEDDING"))
    );
}

#[tokio::test]
async fn requests_before_loading_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(dir.path()).unwrap());
    let (s, v) = call(&app, "POST", "/search", Some(json!({ "query_text": "x" }))).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::CONFLICT, Some("NO_CORPUS")));
    let (_, v) = call(&app, "GET", "/health", None).await;
    assert_eq!(v["corpus_loaded"], false);
}

#[tokio::test]
async fn refine_without_positives_is_insufficient() {
    let f = fixture(false).await;
    let id = new_session(&f, 0).await;
    let n = &f.bench.manifest.fsr[0].hn_near[0];
    mark(&f, &id, n, "hard_negative").await;
    let (s, v) = call(
        &f.app,
        "POST",
        &format!("/sessions/{id}/refine"),
        Some(json!({ "method": "pl" })),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "INSUFFICIENT_EXAMPLES");
}

#[tokio::test]
async fn feedback_round_trip() {
    let f = fixture(false).await;
    let id = new_session(&f, 0).await;
    let p = &f.bench.manifest.fsr[0].positives[0];
    let (_, v) = mark(&f, &id, p, "positive").await;
    assert_eq!(v["feedback"][p.as_str()], "positive");
    let (_, v) = mark(&f, &id, p, "cleared").await;
    assert!(v["feedback"].as_object().unwrap().is_empty());
    let (_, v) = call(&f.app, "GET", &format!("/sessions/{id}"), None).await;
    assert!(v["feedback"].as_object().unwrap().is_empty());
    let (s, v) = mark(&f, &id, "not-an-item", "positive").await;
    assert_eq!(
        (s, v["code"].as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, Some("UNKNOWN_ID"))
    );
    let (s, v) = mark(&f, "0000", p, "positive").await;
    assert_eq!(
        (s, v["code"].as_str()),
        (StatusCode::NOT_FOUND, Some("SESSION_NOT_FOUND"))
    );
    let (s, _) = mark(&f, "../etc", p, "positive").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn pl_refinement_reranks_with_the_refined_embedding() {
    let f = fixture(false).await;
    let (_, before) = call(&f.app, "GET", "/health", None).await;
    let id = new_session(&f, 0).await;
    mark_fsr(&f, &id, 0).await;
    let (s, v) = call(
        &f.app,
        "POST",
        &format!("/sessions/{id}/refine"),
        Some(json!({ "method": "pl" })),
    )
    .await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    assert_eq!(v["state"], "running");
    let st = wait_done(&f, &id).await;
    assert_eq!(st["status"]["state"], "done", "{st}");

    let (_, session) = call(&f.app, "GET", &format!("/sessions/{id}"), None).await;
    let refined = &session["refined"]["pl"];
    let embedding: Vec<f32> = serde_json::from_value(refined["embedding"].clone()).unwrap();
    let prompt: models::PromptFile = serde_json::from_value(refined["prompt"].clone()).unwrap();
    assert_eq!(prompt.loss_trajectory.len(), prompt.config.iterations);
    let w = f
        .bench
        .texts
        .vector(&f.bench.manifest.queries[0].text)
        .unwrap()
        .to_vec();
    assert_eq!(
        refine_query(&prompt.state(), std::slice::from_ref(&w)).unwrap(),
        embedding
    );
    assert_ne!(embedding, w);

    let (s, v) = call(
        &f.app,
        "POST",
        "/search",
        Some(json!({ "session_id": id, "k": 20, "method": "pl" })),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["refined"], true);
    let idx = ExactIndex::build(&f.bench.images).unwrap();
    let expected: Vec<String> = idx.search(&embedding, 20).unwrap().into_iter().map(|h| h.id).collect();
    let got: Vec<String> = v["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["id"].as_str().unwrap().into())
        .collect();
    assert_eq!(got, expected);

    // The zero-shot baseline stays available.
    let (_, z) = call(&f.app, "POST", "/search", Some(json!({ "session_id": id, "k": 5 }))).await;
    let zs: Vec<String> = idx.search(&w, 5).unwrap().into_iter().map(|h| h.id).collect();
    let got: Vec<String> = z["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["id"].as_str().unwrap().into())
        .collect();
    assert_eq!((got, z["refined"].clone()), (zs, json!(false)));

    let (_, cmp) = call(&f.app, "GET", &format!("/sessions/{id}/compare"), None).await;
    assert_eq!(cmp["labelled"], true);
    assert_eq!(cmp["entries"][0]["method"], "zero_shot");
    assert_eq!(cmp["entries"][1]["method"], "pl");
    let ap = |i: usize| cmp["entries"][i]["metrics"]["average_precision"].as_f64().unwrap();
    assert_eq!(cmp["entries"][1]["delta_ap"].as_f64().unwrap(), ap(1) - ap(0));
    let fsr = f.bench.manifest.fsr_ids(&f.bench.manifest.queries[0].id);
    for e in cmp["entries"].as_array().unwrap() {
        for r in e["ranking"].as_array().unwrap() {
            assert!(!fsr.contains(r["id"].as_str().unwrap()));
        }
    }
    assert_eq!(session["history"].as_array().unwrap().len(), 2);

    let (_, after) = call(&f.app, "GET", "/health", None).await;
    assert_eq!(before["corpus_digest"], after["corpus_digest"]);
    assert_eq!(
        fsem::digest(&fsem::read(&f.data.join("images.fsem")).unwrap()).unwrap(),
        after["corpus_digest"]
    );
}

#[tokio::test]
async fn feedback_refinement_improves_mean_ap() {
    let f = fixture(false).await;
    let mut deltas = Vec::new();
    for q in 0..f.bench.manifest.queries.len() {
        let id = new_session(&f, q).await;
        mark_fsr(&f, &id, q).await;
        let (s, _) = call(
            &f.app,
            "POST",
            &format!("/sessions/{id}/refine"),
            Some(json!({ "method": "pl" })),
        )
        .await;
        assert_eq!(s, StatusCode::ACCEPTED);
        assert_eq!(wait_done(&f, &id).await["status"]["state"], "done");
        let (_, cmp) = call(&f.app, "GET", &format!("/sessions/{id}/compare"), None).await;
        deltas.push(cmp["entries"][1]["delta_ap"].as_f64().unwrap());
    }
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    assert!(mean > 0.0, "{deltas:?}");
}

#[tokio::test]
async fn refined_method_needs_a_refinement() {
    let f = fixture(false).await;
    let id = new_session(&f, 1).await;
    let (s, v) = call(
        &f.app,
        "POST",
        "/search",
        Some(json!({ "session_id": id, "method": "pl" })),
    )
    .await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::CONFLICT, Some("NOT_REFINED")));
    let (s, v) = call(
        &f.app,
        "POST",
        &format!("/sessions/{id}/refine"),
        Some(json!({ "method": "ctr" })),
    )
    .await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::CONFLICT, Some("NO_CTR_MODEL")));
}

#[tokio::test]
async fn one_refinement_at_a_time() {
    let f = fixture(false).await;
    let id = new_session(&f, 0).await;
    mark_fsr(&f, &id, 0).await;
    let uri = format!("/sessions/{id}/refine");
    let slow = json!({ "method": "pl", "config": { "iterations": 20000 } });
    let (s, _) = call(&f.app, "POST", &uri, Some(slow.clone())).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let (s, v) = call(&f.app, "POST", &uri, Some(slow)).await;
    assert_eq!(
        (s, v["code"].as_str()),
        (StatusCode::CONFLICT, Some("REFINE_IN_PROGRESS"))
    );
    assert_eq!(wait_done(&f, &id).await["status"]["state"], "done");
}

#[tokio::test]
async fn bad_config_override_is_rejected() {
    let f = fixture(false).await;
    let id = new_session(&f, 0).await;
    mark_fsr(&f, &id, 0).await;
    let body = json!({ "method": "pl", "config": { "iterationz": 3 } });
    let (s, v) = call(&f.app, "POST", &format!("/sessions/{id}/refine"), Some(body)).await;
    assert_eq!(
        (s, v["code"].as_str()),
        (StatusCode::BAD_REQUEST, Some("INVALID_ARGUMENT"))
    );
    let (s, v) = call(&f.app, "POST", "/search", Some(json!({ "k": "ten" }))).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::BAD_REQUEST, Some("SCHEMA_ERROR")));
}

#[tokio::test]
async fn sessions_do_not_share_feedback() {
    let f = fixture(false).await;
    let a = new_session(&f, 0).await;
    let b = new_session(&f, 1).await;
    let pa = f.bench.manifest.fsr[0].positives[0].clone();
    let pb = f.bench.manifest.fsr[1].positives[0].clone();
    let (ra, rb) = tokio::join!(mark(&f, &a, &pa, "positive"), mark(&f, &b, &pb, "positive"));
    assert_eq!(ra.0, StatusCode::OK);
    assert_eq!(rb.0, StatusCode::OK);
    let (_, va) = call(&f.app, "GET", &format!("/sessions/{a}"), None).await;
    let (_, vb) = call(&f.app, "GET", &format!("/sessions/{b}"), None).await;
    assert_eq!(va["feedback"], json!({ pa: "positive" }));
    assert_eq!(vb["feedback"], json!({ pb: "positive" }));
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let f = fixture(false).await;
    let id = new_session(&f, 2).await;
    let app = router(AppState::new(&f.state_dir).unwrap());
    let (s, v) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["query_text"], f.bench.manifest.queries[2].text.as_str());
}

#[tokio::test]
async fn ctr_refinement_selects_feedback_positives() {
    let f = fixture(true).await;
    let id = new_session(&f, 0).await;
    mark_fsr(&f, &id, 0).await;
    let body = json!({ "method": "ctr", "config": { "max_refs": 2 } });
    let (s, v) = call(&f.app, "POST", &format!("/sessions/{id}/refine"), Some(body)).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    assert_eq!(wait_done(&f, &id).await["status"]["state"], "done");
    let (_, session) = call(&f.app, "GET", &format!("/sessions/{id}"), None).await;
    let chosen = session["refined"]["ctr"]["selection"]["chosen"].as_array().unwrap();
    assert!((1..=2).contains(&chosen.len()));
    let positives = &f.bench.manifest.fsr[0].positives[..3];
    for c in chosen {
        assert!(positives.iter().any(|p| p == c.as_str().unwrap()));
    }
    let (s, v) = call(
        &f.app,
        "POST",
        "/search",
        Some(json!({ "session_id": id, "method": "ctr" })),
    )
    .await;
    assert_eq!((s, v["refined"].clone()), (StatusCode::OK, json!(true)));
}

#[tokio::test]
async fn evaluate_inline_runs() {
    let f = fixture(false).await;
    let idx = ExactIndex::build(&f.bench.images).unwrap();
    let runs: Vec<_> = f
        .bench
        .manifest
        .queries
        .iter()
        .map(|q| fsir_core::pipeline::zero_shot_run(&idx, &f.bench.manifest, &f.bench.texts, q, 100).unwrap())
        .collect();
    let expected = fsir_core::eval::evaluate_run(&runs, &f.bench.manifest, 50).unwrap();
    let (s, v) = call(&f.app, "POST", "/evaluate", Some(json!({ "runs": runs, "k": 50 }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["overall"]["map"].as_f64().unwrap(), expected.overall.map);
    let (s, v) = call(&f.app, "POST", "/evaluate", Some(json!({ "k": 50 }))).await;
    assert_eq!(
        (s, v["code"].as_str()),
        (StatusCode::BAD_REQUEST, Some("INVALID_ARGUMENT"))
    );
}

#[test]
fn state_is_shareable() {
    fn assert_send_sync<T: Send + Sync>() {}
    assert_send_sync::<Arc<AppState>>();
}
