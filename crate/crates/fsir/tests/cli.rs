use std::path::Path;
use std::process::{Command, Output};

use fsir_core::synth::SynthConfig;

const BIN: &str = env!("CARGO_BIN_EXE_fsir");

fn fsir(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = fsir(args);
    assert!(
        out.status.success(),
        "fsir {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small benchmark written by `synth-bench`.
fn small_bench(dir: &Path) {
    ok(&[
        "synth-bench",
        "--out",
        p(dir),
        "--queries",
        "4",
        "--positives-per-query",
        "30",
        "--hn-per-cluster",
        "20",
        "--easy-negatives",
        "300",
        "--ctr-concepts",
        "4",
        "--ctr-images-per-concept",
        "5",
    ]);
}

const SUBCOMMANDS: [&str; 12] = [
    "import-embeddings",
    "index-build",
    "search",
    "split",
    "mine",
    "train-ctr",
    "refine-pl",
    "select-refs",
    "evaluate",
    "report-stats",
    "serve",
    "synth-bench",
];

#[test]
fn help_matches_golden_file() {
    let mut text = String::from_utf8(ok(&["--help"]).stdout).unwrap();
    for sub in SUBCOMMANDS {
        text.push_str(&format!("\n===== {sub} =====\n"));
        text.push_str(&String::from_utf8(ok(&[sub, "--help"]).stdout).unwrap());
    }
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/help.txt");
    if std::env::var_os("FSIR_BLESS").is_some() {
        std::fs::write(&golden, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(&golden).unwrap());
}

#[test]
fn synth_defaults_show_in_help() {
    let help = String::from_utf8(ok(&["synth-bench", "--help"]).stdout).unwrap();
    let d = SynthConfig::default();
    assert!(help.contains(&format!("[default: {}]", d.hn_center_cosine)));
    assert!(help.contains(&format!("[default: {}]", d.easy_negatives)));
    assert!(help.contains("--seed <SEED>"));
}

#[test]
fn usage_errors_exit_2_and_name_the_flag() {
    let out = fsir(&["evaluate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
    let out = fsir(&["search", "--texts", "t.fsem", "--text-id", "x", "--all"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_text_exits_1_with_code() {
    let dir = tempfile::tempdir().unwrap();
    small_bench(dir.path());
    let out = fsir(&[
        "search",
        "--manifest",
        p(&dir.path().join("manifest.json")),
        "--texts",
        p(&dir.path().join("texts.fsem")),
        "--text-id",
        "unknown",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("NO_EMBEDDING"));
}

#[test]
fn search_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_bench(d);
    let m = d.join("manifest.json");
    let run = d.join("run.jsonl");
    ok(&[
        "search",
        "--manifest",
        p(&m),
        "--texts",
        p(&d.join("texts.fsem")),
        "--all",
        "--out",
        p(&run),
    ]);
    let out = ok(&["evaluate", "--run", p(&run), "--manifest", p(&m), "--k", "50"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["k"], 50);
    assert_eq!(report["overall"]["queries"], 4);
    let table = String::from_utf8(out.stderr).unwrap();
    assert!(table.contains("AP@50") && table.contains("overall"));

    let single = ok(&[
        "search",
        "--manifest",
        p(&m),
        "--texts",
        p(&d.join("texts.fsem")),
        "--text-id",
        "synthetic query 00",
        "--k",
        "7",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&single.stdout).unwrap();
    assert_eq!(v["results"].as_array().unwrap().len(), 7);
}

#[test]
fn clustered_index_with_full_probing_matches_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_bench(d);
    let m = d.join("manifest.json");
    let texts = d.join("texts.fsem");
    let idx = d.join("images.fsix");
    ok(&[
        "index-build",
        "--corpus",
        p(&d.join("images.fsem")),
        "--output",
        p(&idx),
        "--clusters",
        "8",
        "--probes",
        "8",
    ]);
    let base = ["search", "--manifest", p(&m), "--texts", p(&texts), "--all"];
    let exact = ok(&base).stdout;
    let mut with_index = base.to_vec();
    with_index.extend(["--index", p(&idx)]);
    assert_eq!(ok(&with_index).stdout, exact);
}

#[test]
fn config_file_supplies_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_bench(d);
    let m = d.join("manifest.json");
    let run = d.join("run.jsonl");
    ok(&[
        "search",
        "--manifest",
        p(&m),
        "--texts",
        p(&d.join("texts.fsem")),
        "--all",
        "--out",
        p(&run),
    ]);
    let cfg = d.join("fsir.toml");
    std::fs::write(
        &cfg,
        format!("log_level = \"error\"\n[evaluate]\nmanifest = {:?}\nk = 10\n", p(&m)),
    )
    .unwrap();
    let out = ok(&["--config", p(&cfg), "evaluate", "--run", p(&run)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["k"], 10);
    let out = ok(&["--config", p(&cfg), "evaluate", "--run", p(&run), "--k", "5"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["k"], 5);
}

#[test]
fn import_text_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("e.tsv");
    std::fs::write(&src, "a\t1,0,0\nb\t0,1,0\n").unwrap();
    let dst = dir.path().join("e.fsem");
    ok(&[
        "import-embeddings",
        "--input",
        p(&src),
        "--output",
        p(&dst),
        "--modality",
        "image",
    ]);
    let c = fsir::fsem::read(&dst).unwrap();
    assert_eq!(c.len(), 2);
    assert_eq!(c.modality(), fsir_core::Modality::Image);
    let out = fsir(&[
        "import-embeddings",
        "--input",
        p(&dir.path().join("missing.fsem")),
        "--output",
        p(&dst),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("IO_ERROR"));
}

#[test]
fn split_reproduces_the_synthetic_manifest_and_exports_review_folders() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_bench(d);
    let out = d.join("split.json");
    let review = d.join("review");
    ok(&[
        "split",
        "--gtqr",
        p(&d.join("gtqr.json")),
        "--corpus",
        p(&d.join("images.fsem")),
        "--out",
        p(&out),
        "--review-dir",
        p(&review),
    ]);
    assert_eq!(
        std::fs::read(&out).unwrap(),
        std::fs::read(d.join("manifest.json")).unwrap()
    );
    let listing = std::fs::read_to_string(review.join("q00/true/manifest.txt")).unwrap();
    let falses = std::fs::read_to_string(review.join("q00/false/manifest.txt")).unwrap();
    assert_eq!(listing.lines().count(), 30);
    assert_eq!(falses.lines().count(), 90);
    let copy = fsir(&[
        "split",
        "--gtqr",
        p(&d.join("gtqr.json")),
        "--corpus",
        p(&d.join("images.fsem")),
        "--out",
        p(&out),
        "--review-dir",
        p(&review),
        "--copy-images",
    ]);
    assert_eq!(copy.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&copy.stderr).contains("MISSING_IMAGE_PATH"));
}

#[test]
fn report_stats_counts() {
    let dir = tempfile::tempdir().unwrap();
    small_bench(dir.path());
    let out = ok(&["report-stats", "--manifest", p(&dir.path().join("manifest.json"))]);
    let s: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // 4 queries × (30 positives + 3 × 20 hard negatives) + 300 easy images.
    assert_eq!(s["image_total"], 4 * 90 + 300);
    assert_eq!(s["query_count"], 4);
    assert_eq!(s["mean_ground_truths"], 14.0);
    assert_eq!(s["mean_hard_negatives"], 44.0);
    assert_eq!(s["mean_query_tokens"], 3.0);
}

#[test]
fn ctr_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_bench(d);
    let triplets = d.join("triplets.jsonl");
    ok(&[
        "mine",
        "--images",
        p(&d.join("ctr_images.fsem")),
        "--captions",
        p(&d.join("ctr_captions.fsem")),
        "--caption-map",
        p(&d.join("caption_map.json")),
        "--out",
        p(&triplets),
    ]);
    assert!(std::fs::read_to_string(&triplets).unwrap().lines().count() > 0);
    let model = d.join("model.fctr");
    ok(&[
        "train-ctr",
        "--triplets",
        p(&triplets),
        "--images",
        p(&d.join("ctr_images.fsem")),
        "--captions",
        p(&d.join("ctr_captions.fsem")),
        "--out",
        p(&model),
        "--stage-a-epochs",
        "1",
        "--stage-b-epochs",
        "1",
    ]);
    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("model.json")).unwrap()).unwrap();
    let ext = fsir::fsem::read(&d.join("ctr_images.fsem")).unwrap();
    assert_eq!(sidecar["external_digest"], fsir::fsem::digest(&ext).unwrap());
    let report = ok(&[
        "select-refs",
        "--manifest",
        p(&d.join("manifest.json")),
        "--texts",
        p(&d.join("texts.fsem")),
        "--model",
        p(&model),
        "--max-refs",
        "2",
        "--run-out",
        p(&d.join("ctr.jsonl")),
    ]);
    let sel: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    assert_eq!(sel.as_array().unwrap().len(), 4);
    assert!(sel[0]["chosen"].as_array().unwrap().len() <= 2);
    ok(&[
        "evaluate",
        "--run",
        p(&d.join("ctr.jsonl")),
        "--manifest",
        p(&d.join("manifest.json")),
    ]);
}

#[test]
fn refine_pl_writes_runs_and_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_bench(d);
    let prompts = d.join("prompts");
    let out = ok(&[
        "refine-pl",
        "--manifest",
        p(&d.join("manifest.json")),
        "--texts",
        p(&d.join("texts.fsem")),
        "--query",
        "q01",
        "--shots",
        "4",
        "--iterations",
        "20",
        "--init-b",
        "-2.5",
        "--prompts-dir",
        p(&prompts),
    ]);
    let run = fsir::runs::parse_runs(&out.stdout[..]).unwrap();
    assert_eq!(run.len(), 1);
    assert_eq!(run[0].query_id, "q01");
    let prompt: fsir::models::PromptFile =
        serde_json::from_slice(&std::fs::read(prompts.join("q01.json")).unwrap()).unwrap();
    assert_eq!(prompt.loss_trajectory.len(), 20);
    assert_eq!(prompt.config.init_b, -2.5);
    assert_eq!(prompt.m, 16);
    let out = fsir(&[
        "refine-pl",
        "--manifest",
        p(&d.join("manifest.json")),
        "--texts",
        p(&d.join("texts.fsem")),
        "--query",
        "nope",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("UNKNOWN_QUERY"));
}
