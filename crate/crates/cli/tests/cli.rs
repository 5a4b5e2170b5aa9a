use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use arena_pref::ingest::read_records_jsonl;
use arena_pref::model::{Model, ModelSpec};
use arena_pref::preset::MemberPreset;
use arena_pref::tokenizer::format_input;
use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_arena-pref"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
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

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn line_count(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count()
}

/// Synthesizes `n` records and preprocesses them into `dir/data`.
fn prepared(dir: &Path, n: usize) -> PathBuf {
    let raw = dir.join("raw.csv");
    let data = dir.join("data");
    ok(&[
        "synth",
        "--n",
        &n.to_string(),
        "--seed",
        "4",
        "--out",
        s(&raw),
    ]);
    ok(&[
        "preprocess",
        "--input",
        s(&raw),
        "--format",
        "csv",
        "--output",
        s(&data),
        "--seed",
        "9",
    ]);
    data
}

/// A tiny member configuration for `preset`, written to `dir/<preset>.json`.
fn tiny_config(dir: &Path, preset: MemberPreset, lr: Option<f64>) -> PathBuf {
    let out = ok(&["config", "--preset", preset.name(), "--seed", "3"]);
    let mut cfg: Value = serde_json::from_slice(&out.stdout).unwrap();
    cfg["model"] = json!({"vocab_size": 261, "d_model": 16, "n_layers": 3, "n_heads": 2, "d_ff": 32, "max_len": 64});
    cfg["train"]["max_steps"] = json!(12);
    cfg["train"]["eval_every"] = json!(4);
    cfg["train"]["batch_size"] = json!(4);
    cfg["train"]["clock"] = json!("work");
    if let Some(lr) = lr {
        cfg["train"]["learning_rate"] = json!(lr);
    }
    let path = dir.join(format!("{}.json", preset.name()));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn write_preds(path: &Path, rows: &[(&str, [f64; 3])]) {
    let mut text = String::from("id,p_a,p_b,p_tie\n");
    for (id, p) in rows {
        text.push_str(&format!("{id},{},{},{}\n", p[0], p[1], p[2]));
    }
    fs::write(path, text).unwrap();
}

fn read_preds(path: &Path) -> Vec<(String, [f64; 3])> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (
                f[0].to_string(),
                [
                    f[1].parse().unwrap(),
                    f[2].parse().unwrap(),
                    f[3].parse().unwrap(),
                ],
            )
        })
        .collect()
}

fn write_labels(path: &Path, labels: &[(&str, &str)]) {
    let text: String = labels
        .iter()
        .map(|(id, l)| format!("{{\"id\":\"{id}\",\"prompt\":\"p\",\"response_a\":\"a\",\"response_b\":\"b\",\"label\":\"{l}\"}}\n"))
        .collect();
    fs::write(path, text).unwrap();
}

#[test]
fn preprocess_splits_every_kept_record_deterministically() {
    let tmp = TempDir::new().unwrap();
    let data = prepared(tmp.path(), 300);
    let report = read_json(&data.join("drop_report.json"));
    let dropped: u64 = ["null_prompt", "null_response", "invalid_label"]
        .iter()
        .map(|k| report[k].as_u64().unwrap())
        .sum();
    let kept: usize = ["train", "validation", "test"]
        .iter()
        .map(|p| line_count(&data.join(format!("{p}.jsonl"))))
        .sum();
    assert_eq!(kept as u64 + dropped, 300);
    assert!(dropped > 0);

    let again = tmp.path().join("again");
    ok(&[
        "preprocess",
        "--input",
        s(&tmp.path().join("raw.csv")),
        "--format",
        "csv",
        "--output",
        s(&again),
        "--seed",
        "9",
    ]);
    for f in [
        "train.jsonl",
        "validation.jsonl",
        "test.jsonl",
        "drop_report.json",
    ] {
        assert_eq!(
            fs::read(data.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
    let manifest = read_json(&data.join("manifest.json"));
    let digest = manifest["dataset_sha256"]
        .as_object()
        .unwrap()
        .values()
        .next()
        .unwrap();
    assert_eq!(digest.as_str().unwrap().len(), 64);
}

#[test]
fn preprocess_golden_fixture_counts() {
    let tmp = TempDir::new().unwrap();
    ok(&[
        "preprocess",
        "--input",
        s(&fixture("golden_raw.csv")),
        "--format",
        "csv",
        "--output",
        s(tmp.path()),
    ]);
    let report = read_json(&tmp.path().join("drop_report.json"));
    assert_eq!(
        report,
        json!({"null_prompt": 0, "null_response": 2, "invalid_label": 1})
    );
    let kept: usize = ["train", "validation", "test"]
        .iter()
        .map(|p| line_count(&tmp.path().join(format!("{p}.jsonl"))))
        .sum();
    assert_eq!(kept, 9);
}

#[test]
fn preprocess_schema_and_duplicate_errors() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing.csv");
    fs::write(&missing, "id,model_a,model_b,prompt,response_a,response_b,winner_model_a,winner_model_b\nx,m,n,p,a,b,1,0\n").unwrap();
    let out = s(&tmp.path().join("o1")).to_string();
    assert_eq!(
        code(&[
            "preprocess",
            "--input",
            s(&missing),
            "--format",
            "csv",
            "--output",
            &out
        ]),
        2
    );

    let dup = tmp.path().join("dup.csv");
    fs::write(
        &dup,
        "id,model_a,model_b,prompt,response_a,response_b,winner_model_a,winner_model_b,winner_tie\nx,m,n,p,a,b,1,0,0\nx,m,n,q,a,b,0,1,0\n",
    )
    .unwrap();
    let out = s(&tmp.path().join("o2")).to_string();
    assert_eq!(
        code(&[
            "preprocess",
            "--input",
            s(&dup),
            "--format",
            "csv",
            "--output",
            &out
        ]),
        3
    );
    assert_eq!(
        code(&[
            "preprocess",
            "--input",
            s(&dup),
            "--format",
            "csv",
            "--output",
            &out,
            "--split",
            "0.5,0.5"
        ]),
        1
    );
}

#[test]
fn train_requires_data() {
    assert_eq!(
        code(&["train", "--preset", "gemma-like", "--out", "/tmp/unused"]),
        1
    );
    assert_eq!(
        code(&["train", "--preset", "mistral", "--data", "x", "--out", "y"]),
        1
    );
}

#[test]
fn each_preset_trains_and_records_its_learning_rate() {
    let tmp = TempDir::new().unwrap();
    let data = prepared(tmp.path(), 160);
    for preset in [MemberPreset::GemmaLike, MemberPreset::LlamaLike] {
        let cfg = tiny_config(tmp.path(), preset, None);
        let out = tmp.path().join(preset.name());
        ok(&[
            "train",
            "--data",
            s(&data),
            "--preset",
            preset.name(),
            "--config",
            s(&cfg),
            "--out",
            s(&out),
        ]);
        let manifest = read_json(&out.join("manifest.json"));
        assert_eq!(
            manifest["config"]["train"]["learning_rate"]
                .as_f64()
                .unwrap(),
            preset.learning_rate()
        );
        assert_eq!(manifest["presets"], json!([preset.name()]));
        for f in [
            "best.ckpt",
            "best.json",
            "latest.ckpt",
            "latest.json",
            "curve.csv",
            "train_summary.json",
        ] {
            assert!(out.join(f).exists(), "{f}");
        }
        assert_eq!(line_count(&out.join("curve.csv")), 1 + 4);
    }
    let other = tiny_config(tmp.path(), MemberPreset::GemmaLike, None);
    let out = s(&tmp.path().join("mismatch")).to_string();
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&data),
            "--preset",
            "llama-like",
            "--config",
            s(&other),
            "--out",
            &out
        ]),
        1
    );
}

#[test]
fn predict_matches_the_in_memory_model() {
    let tmp = TempDir::new().unwrap();
    let data = prepared(tmp.path(), 160);
    let cfg = tiny_config(tmp.path(), MemberPreset::GemmaLike, None);
    let out = tmp.path().join("m");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--preset",
        "gemma-like",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
    ]);
    let val = data.join("validation.jsonl");
    let pred = tmp.path().join("pred.csv");
    ok(&[
        "predict",
        "--checkpoint",
        s(&out.join("best.ckpt")),
        "--data",
        s(&val),
        "--out",
        s(&pred),
        "--batch-size",
        "3",
    ]);
    let rows = read_preds(&pred);
    assert_eq!(line_count(&pred), line_count(&val) + 1);

    let spec: ModelSpec = serde_json::from_value(read_json(&out.join("best.json"))).unwrap();
    let model =
        Model::read_checkpoint(&spec, fs::File::open(out.join("best.ckpt")).unwrap()).unwrap();
    let records = read_records_jsonl(fs::File::open(&val).unwrap()).unwrap();
    let seqs: Vec<_> = records
        .iter()
        .map(|r| format_input(r, 64).unwrap())
        .collect();
    let direct = model.predict(&seqs, 64).unwrap();
    for ((id, p), (r, q)) in rows.iter().zip(records.iter().zip(&direct)) {
        assert_eq!(id, &r.id);
        assert_eq!(p, &q.0);
    }
}

#[test]
fn diverging_training_exits_with_numeric_error() {
    let tmp = TempDir::new().unwrap();
    let data = prepared(tmp.path(), 120);
    let cfg = tiny_config(tmp.path(), MemberPreset::LlamaLike, Some(f64::MAX));
    let out = s(&tmp.path().join("m")).to_string();
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&data),
            "--preset",
            "llama-like",
            "--config",
            s(&cfg),
            "--out",
            &out
        ]),
        4
    );
}

#[test]
fn fixed_weight_ensemble_is_the_convex_combination() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a.csv"), tmp.path().join("b.csv"));
    write_preds(&a, &[("r1", [0.5, 0.3, 0.2]), ("r2", [0.1, 0.1, 0.8])]);
    write_preds(&b, &[("r1", [0.2, 0.2, 0.6]), ("r2", [0.3, 0.6, 0.1])]);
    let out = tmp.path().join("e.csv");
    ok(&[
        "ensemble",
        "--members",
        s(&a),
        s(&b),
        "--weights",
        "0.7,0.3",
        "--out",
        s(&out),
    ]);
    let rows = read_preds(&out);
    let expect = [[0.41, 0.27, 0.32], [0.16, 0.25, 0.59]];
    for ((_, got), want) in rows.iter().zip(expect) {
        for j in 0..3 {
            assert!((got[j] - want[j]).abs() < 1e-12);
        }
    }
    let weights = read_json(&tmp.path().join("e.weights.json"));
    assert_eq!(weights["weights"], json!([0.7, 0.3]));

    assert_eq!(
        code(&[
            "ensemble",
            "--members",
            s(&a),
            s(&b),
            "--weights",
            "0.6,0.6",
            "--out",
            s(&out)
        ]),
        5
    );
    assert_eq!(
        code(&[
            "ensemble",
            "--members",
            s(&a),
            s(&b),
            "--weights",
            "1.2,-0.2",
            "--out",
            s(&out)
        ]),
        5
    );
    assert_eq!(
        code(&[
            "ensemble",
            "--members",
            s(&a),
            s(&b),
            "--weights",
            "1.0",
            "--out",
            s(&out)
        ]),
        5
    );

    let c = tmp.path().join("c.csv");
    write_preds(&c, &[("r2", [0.2, 0.2, 0.6]), ("r1", [0.3, 0.6, 0.1])]);
    assert_eq!(
        code(&[
            "ensemble",
            "--members",
            s(&a),
            s(&c),
            "--weights",
            "0.5,0.5",
            "--out",
            s(&out)
        ]),
        6
    );
}

#[test]
fn search_picks_the_perfect_member() {
    let tmp = TempDir::new().unwrap();
    let third = 1.0 / 3.0;
    let (a, b, labels) = (
        tmp.path().join("a.csv"),
        tmp.path().join("b.csv"),
        tmp.path().join("l.jsonl"),
    );
    write_preds(
        &a,
        &[
            ("r1", [1.0, 0.0, 0.0]),
            ("r2", [0.0, 0.0, 1.0]),
            ("r3", [0.0, 1.0, 0.0]),
        ],
    );
    write_preds(
        &b,
        &[("r1", [third; 3]), ("r2", [third; 3]), ("r3", [third; 3])],
    );
    write_labels(&labels, &[("r1", "A"), ("r2", "Tie"), ("r3", "B")]);
    let out = tmp.path().join("e.csv");
    let stdout = ok(&[
        "ensemble",
        "--members",
        s(&a),
        s(&b),
        "--mode",
        "search",
        "--labels",
        s(&labels),
        "--out",
        s(&out),
    ])
    .stdout;
    let report: Value = serde_json::from_slice(&stdout).unwrap();
    assert_eq!(report["weights"], json!([1.0, 0.0]));
    assert_eq!(report["val_log_loss"], json!(0.0));
    assert_eq!(
        code(&[
            "ensemble",
            "--members",
            s(&a),
            s(&b),
            "--mode",
            "search",
            "--out",
            s(&out)
        ]),
        1
    );

    write_labels(&labels, &[("r1", "A"), ("r2", "Tie")]);
    assert_eq!(
        code(&[
            "ensemble",
            "--members",
            s(&a),
            s(&b),
            "--mode",
            "search",
            "--labels",
            s(&labels),
            "--out",
            s(&out)
        ]),
        6
    );
}

#[test]
fn evaluate_reports_known_values() {
    let tmp = TempDir::new().unwrap();
    let third = 1.0 / 3.0;
    let labels = tmp.path().join("l.jsonl");
    write_labels(&labels, &[("r1", "A"), ("r2", "B")]);
    let (perfect, uniform) = (tmp.path().join("p.csv"), tmp.path().join("u.csv"));
    write_preds(
        &perfect,
        &[("r1", [1.0, 0.0, 0.0]), ("r2", [0.0, 1.0, 0.0])],
    );
    write_preds(&uniform, &[("r1", [third; 3]), ("r2", [third; 3])]);
    let out = tmp.path().join("m.json");

    ok(&[
        "evaluate",
        "--predictions",
        s(&perfect),
        "--labels",
        s(&labels),
        "--out",
        s(&out),
    ]);
    assert_eq!(
        read_json(&out),
        json!({"accuracy": 1.0, "log_loss": 0.0, "n": 2})
    );
    ok(&[
        "evaluate",
        "--predictions",
        s(&uniform),
        "--labels",
        s(&labels),
        "--out",
        s(&out),
    ]);
    assert!((read_json(&out)["log_loss"].as_f64().unwrap() - 3f64.ln()).abs() < 1e-9);

    write_labels(&labels, &[("r1", "A")]);
    assert_eq!(
        code(&[
            "evaluate",
            "--predictions",
            s(&perfect),
            "--labels",
            s(&labels),
            "--out",
            s(&out)
        ]),
        6
    );
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "id,pa,pb\nr1,0.5,0.5\n").unwrap();
    assert_eq!(
        code(&[
            "evaluate",
            "--predictions",
            s(&bad),
            "--labels",
            s(&labels),
            "--out",
            s(&out)
        ]),
        2
    );
}
