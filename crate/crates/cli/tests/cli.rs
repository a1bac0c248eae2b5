use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use defsent::entry_embed::{BuilderTag, EntryEmbeddingMatrix, EntryPooling};
use defsent::experiment::read_csv_rows;
use nalgebra::DMatrix;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_defsent"));
    c.env_remove("DEFSENT_OUTPUT_DIR").env("RUST_LOG", "warn");
    c
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const TINY: &str = r#"
seed = 1
[synthetic]
n_entries = 32
vocab_size = 200
n_test_pairs = 60
n_dev_pairs = 40
[encoder]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_position = 32
[plan]
learning_rates = [5e-3]
seeds = [0, 1]
compare_branches = false
combination = { sentence_pooling = "MEAN", entry_type = "AMP" }
"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_counts_match_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.jsonl");
    ok(&["ingest", "--input", s(&fixture("dict_a.jsonl")), "--output", s(&out)]);
    let stats = json(&dir.path().join("a.jsonl.stats.json"));
    assert_eq!(stats["n_entries"], 5);
    assert_eq!(stats["n_definitions"], 6);
    assert_eq!(stats["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 6);
}

#[test]
fn ingest_merges_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.jsonl");
    let stats = dir.path().join("m.json");
    ok(&[
        "ingest",
        "--input",
        s(&fixture("dict_a.jsonl")),
        s(&fixture("dict_b.jsonl")),
        "--output",
        s(&out),
        "--stats",
        s(&stats),
    ]);
    let v = json(&stats);
    assert_eq!(v["n_entries"], 6);
    assert_eq!(v["n_definitions"], 8);

    let out = dir.path().join("g.jsonl");
    ok(&["ingest", "--input", s(&fixture("gloss.tsv")), "--format", "wordnet-gloss-tsv", "--output", s(&out)]);
    assert_eq!(json(&dir.path().join("g.jsonl.stats.json"))["n_entries"], 2);
}

#[test]
fn ingest_failures_exit_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = run(&["ingest", "--input", s(&empty), "--output", s(&dir.path().join("o.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no records"));

    let out = run(&["ingest", "--input", s(&fixture("malformed.jsonl")), "--output", s(&dir.path().join("o.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn stats_reports_the_single_word_filter() {
    let out = ok(&["stats", "--input", s(&fixture("dict_a.jsonl")), "--headword-vocab", s(&fixture("headwords.txt"))]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["filter"]["kept"], 3);
    assert_eq!(v["filter"]["total"], 5);
    assert!((v["filter"]["exploitation_rate"].as_f64().unwrap() - 0.6).abs() < 1e-12);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["pst", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_plan_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = run(&["pst", "--config", s(&cfg), "--learning-rates", "1e-3,2e-3", "--output-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("must not increase"));
    assert!(!out_dir.exists());

    let out = run(&["pst", "--config", s(&cfg), "--learning-rates", "3e-3,2e-3,1e-3,1e-4", "--output-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.exists());
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn one_step_two_seeds_writes_two_records_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    ok(&["pst", "--config", s(&cfg), "--output-dir", s(&out_dir)]);
    assert_eq!(
        files_in(&out_dir.join("records")),
        vec!["step1_quasi_isotropic_seed0.json", "step1_quasi_isotropic_seed1.json"]
    );
    let summary = json(&out_dir.join("summary.json"));
    assert_eq!(summary["final_step"], 1);
    assert_eq!(summary["final_combination"], "(Mean, AMP)");
    let record = json(&out_dir.join("records/step1_quasi_isotropic_seed0.json"));
    assert_eq!(record["config_hash"], summary["config_hash"]);
    assert_eq!(record["init_fingerprint"], summary["base_fingerprint"]);
    assert!(out_dir.join("checkpoints/step1_best.ckpt").exists());
    assert!(out_dir.join("matrices/step1_quasi_isotropic.emb").exists());
    assert_eq!(read_csv_rows(&out_dir.join("geometry/step1_quasi_isotropic.csv")).unwrap().len(), 32);
}

#[test]
fn output_dir_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let env_dir = dir.path().join("from_env");
    let out = bin()
        .args(["pst", "--config", s(&cfg), "--seeds", "0"])
        .env("DEFSENT_OUTPUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(env_dir.join("summary.json").exists());
}

#[test]
fn three_steps_compare_both_final_branches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    ok(&[
        "pst",
        "--config",
        s(&cfg),
        "--learning-rates",
        "5e-3,4e-3,3e-3",
        "--seeds",
        "0",
        "--output-dir",
        s(&out_dir),
    ]);
    let records = files_in(&out_dir.join("records"));
    assert_eq!(records.len(), 3);

    let cfg = tiny_config(dir.path());
    let text = fs::read_to_string(&cfg).unwrap().replace("compare_branches = false", "compare_branches = true");
    fs::write(&cfg, text).unwrap();
    let out_dir = dir.path().join("out2");
    ok(&[
        "pst",
        "--config",
        s(&cfg),
        "--learning-rates",
        "5e-3,4e-3,3e-3",
        "--seeds",
        "0",
        "--output-dir",
        s(&out_dir),
    ]);
    let records = files_in(&out_dir.join("records"));
    assert!(records.contains(&"step3_quasi_isotropic_seed0.json".to_string()));
    assert!(records.contains(&"step3_ica_transformed_seed0.json".to_string()));
    assert_eq!(records.len(), 4);
    let summary = json(&out_dir.join("summary.json"));
    let branches = summary["steps"][2]["branches"].as_array().unwrap();
    assert_eq!(branches.len(), 2);
    assert_eq!(branches[1]["matrix_tag"], "ICA(AMP)");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["pst", "--config", s(&cfg), "--output-dir", s(&a)]);
    ok(&["--jobs", "1", "pst", "--config", s(&cfg), "--output-dir", s(&b)]);
    for name in [
        "summary.json",
        "records/step1_quasi_isotropic_seed0.json",
        "records/step1_quasi_isotropic_seed1.json",
        "geometry/step1_quasi_isotropic.csv",
        "checkpoints/step1_best.ckpt",
        "matrices/step1_quasi_isotropic.emb",
    ] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn component_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let world = d.join("world");
    ok(&["synth", "--n-entries", "32", "--vocab-size", "200", "--output-dir", s(&world)]);
    let cfg = tiny_config(d);
    let run_dir = d.join("run");
    ok(&["pst", "--config", s(&cfg), "--output-dir", s(&run_dir)]);
    let ckpt = run_dir.join("checkpoints/step1_best.ckpt");
    let vocab = run_dir.join("vocab.json");
    let dict = world.join("dictionary.jsonl");

    let m = d.join("m.emb");
    let out = ok(&[
        "build-embeds",
        "--checkpoint",
        s(&ckpt),
        "--vocab",
        s(&vocab),
        "--dictionary",
        s(&dict),
        "--pooling",
        "AMP",
        "--output",
        s(&m),
    ]);
    let built: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(built["n_entries"], 32);
    assert_eq!(built["builder_tag"], "AMP");

    let report = d.join("geo.json");
    let ica = d.join("ica.emb");
    ok(&["geometry", "--matrix", s(&m), "--output", s(&report), "--ica-output", s(&ica)]);
    assert!(json(&report)["mean_pairwise_cosine"].is_number());
    assert_eq!(EntryEmbeddingMatrix::load(&ica).unwrap().builder_tag().to_string(), "ICA(AMP)");

    let csv = d.join("plot.csv");
    ok(&["export-plot", "--matrix", s(&m), "--mode", "pca_whitened", "--output", s(&csv)]);
    let rows = read_csv_rows(&csv).unwrap();
    assert_eq!(rows.len(), 32);
    for col in 0..2 {
        let v: Vec<f64> = rows.iter().map(|r| r[col]).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        assert!((var - 1.0).abs() < 1e-6, "column {col} variance {var}");
    }

    let trained = d.join("t.ckpt");
    ok(&[
        "train",
        "--checkpoint",
        s(&ckpt),
        "--vocab",
        s(&vocab),
        "--dictionary",
        s(&dict),
        "--matrix",
        s(&m),
        "--pooling",
        "MEAN",
        "--output",
        s(&trained),
    ]);
    let record = json(&d.join("t.ckpt.json"));
    assert_eq!(record["losses"].as_array().unwrap().len(), built_steps(&dict));
    let out = run(&[
        "train",
        "--checkpoint",
        s(&ckpt),
        "--vocab",
        s(&vocab),
        "--dictionary",
        s(&dict),
        "--matrix",
        s(&m),
        "--batch-size",
        "7",
        "--output",
        s(&trained),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&trained),
        "--vocab",
        s(&vocab),
        "--sts",
        s(&world.join("sts_dev.tsv")),
        s(&world.join("sts_test.tsv")),
        "--pooling",
        "mean",
    ]);
    let eval: Value = serde_json::from_slice(&out.stdout).unwrap();
    let sets = eval["per_set_rho_x100"].as_object().unwrap();
    assert_eq!(sets.len(), 2);
    assert!(sets.contains_key("sts_dev"));
}

fn built_steps(dict: &Path) -> usize {
    fs::read_to_string(dict).unwrap().lines().count().div_ceil(16)
}

fn write_matrix(path: &Path, rows: usize, cols: usize, data: &[f64]) {
    let weights = DMatrix::from_row_slice(rows, cols, data);
    let tag = BuilderTag {
        pooling: EntryPooling::Amp,
        ica: false,
    };
    EntryEmbeddingMatrix::new(weights, tag, "test".into()).unwrap().save(path).unwrap();
}

#[test]
fn export_plot_of_planar_data_preserves_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("p.emb");
    let data = [1.0, 2.0, -0.5, 1.5, 3.0, -1.0, 0.25, 0.75, -2.0, -2.5];
    write_matrix(&m, 5, 2, &data);
    let csv = dir.path().join("p.csv");
    ok(&["export-plot", "--matrix", s(&m), "--output", s(&csv)]);
    let rows = read_csv_rows(&csv).unwrap();
    assert_eq!(rows.len(), 5);
    // an orthogonal change of basis keeps every inner product
    for i in 0..5 {
        for j in 0..5 {
            let orig = data[2 * i] * data[2 * j] + data[2 * i + 1] * data[2 * j + 1];
            let proj = rows[i][0] * rows[j][0] + rows[i][1] * rows[j][1];
            assert!((orig - proj).abs() < 1e-12, "({i},{j}) {orig} vs {proj}");
        }
    }

    let flat = dir.path().join("flat.emb");
    write_matrix(&flat, 3, 2, &[1.0, 2.0, 2.0, 4.0, -1.0, -2.0]);
    let out = run(&["export-plot", "--matrix", s(&flat), "--output", s(&dir.path().join("f.csv"))]);
    assert_eq!(out.status.code(), Some(3));
}
