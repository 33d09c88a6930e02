use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dagcd_core::decoder::DecoderConfig;
use dagcd_core::detector::UtilizationDetector;
use dagcd_core::toy::{plant_scenario, PlantConfig};
use dagcd_core::trace::{record_greedy_trace, write_trace, RecordConfig};
use serde_json::Value;
use tempfile::TempDir;

fn dagcd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dagcd"))
        .args(args)
        .current_dir(dir)
        .env_remove("DAGCD_OUT_DIR")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Toy-geometry detector written to `<dir>/det/detector.json`.
fn train_toy_detector(dir: &Path) -> PathBuf {
    let out = dagcd(
        dir,
        &[
            "train-detector",
            "--n",
            "200",
            "--seed",
            "1",
            "--out",
            "det",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join("det/detector.json")
}

#[test]
fn train_detector_reports_auc_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = dagcd(tmp.path(), &["train-detector", "--n", "100", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("held-out AUC"));
    let manifest = json(tmp.path().join("o/manifest.json"));
    assert_eq!(manifest["command"], "train-detector");
    let outputs: Vec<&str> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    for f in outputs {
        assert!(tmp.path().join("o").join(f).exists(), "{f}");
    }
    let det = UtilizationDetector::load(tmp.path().join("o/detector.json")).unwrap();
    assert_eq!(det.head_order.len(), 10);
}

#[test]
fn single_class_examples_exit_2() {
    let tmp = TempDir::new().unwrap();
    let line = r#"{"features":{"values":[0.5,0.2],"head_order":[[0,0],[0,1]]},"label":true}"#;
    fs::write(
        tmp.path().join("ex.jsonl"),
        format!("{line}\n{line}\n{line}\n{line}\n"),
    )
    .unwrap();
    let out = dagcd(
        tmp.path(),
        &[
            "train-detector",
            "--examples",
            "ex.jsonl",
            "--layers",
            "1",
            "--heads",
            "2",
            "--out",
            "o",
        ],
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(
        stderr(&out).to_lowercase().contains("label"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let unknown = dagcd(tmp.path(), &["analyze", "--analysis", "bogus"]);
    assert_eq!(code(&unknown), 2);
    let zero = dagcd(tmp.path(), &["toy-demo", "--scenarios", "0", "--out", "o"]);
    assert_eq!(code(&zero), 2);
    let no_det = dagcd(tmp.path(), &["decode", "--planted", "--out", "o"]);
    assert_eq!(code(&no_det), 2);
    let bad_roles = dagcd(
        tmp.path(),
        &[
            "decode", "--policy", "greedy", "--prompt", "1,2", "--roles", "TX", "--out", "o",
        ],
    );
    assert_eq!(code(&bad_roles), 2);
}

#[test]
fn detector_geometry_mismatch_exits_2() {
    let tmp = TempDir::new().unwrap();
    let out = dagcd(
        tmp.path(),
        &[
            "train-detector",
            "--n",
            "100",
            "--layers",
            "4",
            "--heads",
            "8",
            "--out",
            "wide",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = dagcd(
        tmp.path(),
        &["decode", "--detector", "wide/detector.json", "--out", "o"],
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn planted_decode_flips_and_alpha_zero_matches_greedy() {
    let tmp = TempDir::new().unwrap();
    let det = train_toy_detector(tmp.path());
    let det = det.to_str().unwrap();
    let run = |extra: &[&str], out: &str| {
        let mut args = vec![
            "decode",
            "--planted",
            "--seed",
            "3",
            "--detector",
            det,
            "--out",
            out,
        ];
        args.extend_from_slice(extra);
        let o = dagcd(tmp.path(), &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (
            stdout(&o),
            json(tmp.path().join(out).join("generation.json")),
        )
    };
    let (dagcd_out, dagcd_gen) = run(&[], "d");
    let (_, greedy_gen) = run(&["--policy", "greedy"], "g");
    let (_, zero_gen) = run(&["--alpha", "0"], "z");
    assert!(dagcd_out.contains("first token gold"), "{dagcd_out}");
    assert_eq!(dagcd_gen["flip_steps"][0], 0);
    assert_eq!(
        greedy_gen["token_ids"][0],
        greedy_gen["scenario"]["distractor_token"]
    );
    assert_eq!(zero_gen["token_ids"], greedy_gen["token_ids"]);
}

#[test]
fn replay_divergence_exits_0_with_partial_output() {
    let tmp = TempDir::new().unwrap();
    let det_path = train_toy_detector(tmp.path());
    let det = UtilizationDetector::load(&det_path).unwrap();
    let (sc, mut oracle) = plant_scenario(5, &PlantConfig::default(), &det).unwrap();
    let cfg = RecordConfig {
        decoder: DecoderConfig {
            max_new_tokens: 4,
            ..DecoderConfig::default()
        },
        ..RecordConfig::default()
    };
    let (trace, greedy) = record_greedy_trace(&mut oracle, &sc.layout, &cfg).unwrap();
    assert_eq!(greedy.token_ids[0], sc.distractor_token);
    write_trace(&trace, tmp.path().join("run.dgtr")).unwrap();

    let out = dagcd(
        tmp.path(),
        &[
            "decode",
            "--oracle",
            "replay",
            "--trace",
            "run.dgtr",
            "--detector",
            det_path.to_str().unwrap(),
            "--max-new-tokens",
            "4",
            "--out",
            "r",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let gen = json(tmp.path().join("r/generation.json"));
    assert_eq!(gen["outcome"]["kind"], "diverged");
    assert_eq!(gen["outcome"]["step"], 1);
    assert_eq!(gen["token_ids"], serde_json::json!([sc.gold_token]));

    let out = dagcd(
        tmp.path(),
        &[
            "decode",
            "--oracle",
            "replay",
            "--trace",
            "run.dgtr",
            "--policy",
            "greedy",
            "--max-new-tokens",
            "4",
            "--out",
            "g",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let gen = json(tmp.path().join("g/generation.json"));
    assert_eq!(gen["outcome"]["kind"], "max_tokens");
    assert_eq!(
        gen["token_ids"],
        serde_json::to_value(&greedy.token_ids).unwrap()
    );
}

fn write_eval_inputs(dir: &Path, predictions: &str) {
    let dataset = [
        r#"{"id":"q1","context":"The tower is in Paris.","question":"Where?","answers":["Paris"]}"#,
        r#"{"id":"q2","context":"It is in New York City.","question":"Which city?","answers":["York City"]}"#,
    ];
    fs::write(dir.join("data.jsonl"), dataset.join("\n") + "\n").unwrap();
    fs::write(dir.join("pred.jsonl"), predictions).unwrap();
}

#[test]
fn eval_scores_fixture() {
    let tmp = TempDir::new().unwrap();
    write_eval_inputs(
        tmp.path(),
        "{\"id\":\"q1\",\"prediction\":\"paris.\"}\n{\"id\":\"q2\",\"prediction\":\"New York City\"}\n",
    );
    let out = dagcd(
        tmp.path(),
        &[
            "eval",
            "--predictions",
            "pred.jsonl",
            "--dataset",
            "data.jsonl",
            "--out",
            "e",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    // EM (1 + 0) / 2, F1 (1 + 0.8) / 2, in percent
    assert!(stdout(&out).contains("EM 50.00"), "{}", stdout(&out));
    assert!(stdout(&out).contains("F1 90.00"), "{}", stdout(&out));
    let records = fs::read_to_string(tmp.path().join("e/eval_records.jsonl")).unwrap();
    let second: Value = serde_json::from_str(records.lines().nth(1).unwrap()).unwrap();
    assert_eq!(second["f1"], 0.8);
}

#[test]
fn eval_rejects_bad_predictions() {
    let tmp = TempDir::new().unwrap();
    let args = [
        "eval",
        "--predictions",
        "pred.jsonl",
        "--dataset",
        "data.jsonl",
        "--out",
        "e",
    ];
    write_eval_inputs(tmp.path(), "");
    assert_eq!(code(&dagcd(tmp.path(), &args)), 2);
    write_eval_inputs(
        tmp.path(),
        "{\"id\":\"q1\",\"prediction\":\"x\"}\n{\"id\":\"zz\",\"prediction\":\"y\"}\n",
    );
    assert_eq!(code(&dagcd(tmp.path(), &args)), 2);
    write_eval_inputs(
        tmp.path(),
        "{\"id\":\"q1\",\"prediction\":\"x\"}\n{\"id\":\"q1\",\"prediction\":\"y\"}\n",
    );
    assert_eq!(code(&dagcd(tmp.path(), &args)), 2);
}

#[test]
fn config_file_then_flag_precedence() {
    let tmp = TempDir::new().unwrap();
    let det = train_toy_detector(tmp.path());
    fs::write(
        tmp.path().join("c.toml"),
        "alpha = 0.0\nseed = 3\nout = \"from-config\"\n",
    )
    .unwrap();
    let base = [
        "--config",
        "c.toml",
        "decode",
        "--planted",
        "--detector",
        det.to_str().unwrap(),
    ];

    let out = dagcd(tmp.path(), &base);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest = json(tmp.path().join("from-config/manifest.json"));
    assert_eq!(manifest["config"]["decoder"]["alpha"], 0.0);
    assert_eq!(manifest["seeds"]["model"], 3);
    assert!(stdout(&out).contains("first token distractor"));

    let mut args = base.to_vec();
    args.extend(["--alpha", "2", "--out", "from-flag"]);
    let out = dagcd(tmp.path(), &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        json(tmp.path().join("from-flag/manifest.json"))["config"]["decoder"]["alpha"],
        2.0
    );
    assert!(stdout(&out).contains("first token gold"));
}

#[test]
fn out_dir_falls_back_to_environment() {
    let tmp = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dagcd"))
        .args(["decode", "--policy", "greedy", "--max-new-tokens", "3"])
        .current_dir(tmp.path())
        .env("DAGCD_OUT_DIR", "env-out")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(tmp.path().join("env-out/generation.json").exists());
}

#[test]
fn analyze_writes_json_report() {
    let tmp = TempDir::new().unwrap();
    let mut lines = String::new();
    for i in 0..12 {
        lines.push_str(&format!(
            "{{\"id\":\"r{i}\",\"correct\":{},\"entropy\":{},\"msp\":0.5,\"gold_rank\":{},\"gap\":0.1,\"f1\":{}}}\n",
            i % 2 == 0,
            i as f64 / 12.0,
            1 + i,
            (i % 2) as f64
        ));
    }
    fs::write(tmp.path().join("rec.jsonl"), lines).unwrap();
    let out = dagcd(
        tmp.path(),
        &[
            "analyze",
            "--analysis",
            "spearman",
            "--records",
            "rec.jsonl",
            "--format",
            "json",
            "--out",
            "a",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = json(tmp.path().join("a/spearman.json"));
    assert!(report.is_object(), "{report}");
    let missing = dagcd(
        tmp.path(),
        &["analyze", "--analysis", "spearman", "--out", "b"],
    );
    assert_eq!(code(&missing), 2);
}

#[test]
fn recorded_trace_replays_and_diverges_under_guidance() {
    let tmp = TempDir::new().unwrap();
    let det = train_toy_detector(tmp.path());
    let det = det.to_str().unwrap();
    let out = dagcd(
        tmp.path(),
        &[
            "decode",
            "--planted",
            "--seed",
            "2",
            "--detector",
            det,
            "--policy",
            "greedy",
            "--max-new-tokens",
            "5",
            "--record-trace",
            "run.dgtr",
            "--out",
            "rec",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let recorded = json(tmp.path().join("rec/generation.json"));
    assert!(json(tmp.path().join("rec/manifest.json"))["outputs"]
        .as_array()
        .unwrap()
        .contains(&"run.dgtr".into()));

    let replay = |extra: &[&str], out: &str| {
        let mut args = vec![
            "decode",
            "--oracle",
            "replay",
            "--trace",
            "rec/run.dgtr",
            "--max-new-tokens",
            "5",
            "--out",
            out,
        ];
        args.extend_from_slice(extra);
        let o = dagcd(tmp.path(), &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        json(tmp.path().join(out).join("generation.json"))
    };
    let greedy = replay(&["--policy", "greedy"], "g");
    assert_eq!(greedy["token_ids"], recorded["token_ids"]);
    assert_eq!(greedy["outcome"]["kind"], "max_tokens");
    let guided = replay(&["--detector", det], "d");
    assert_eq!(guided["outcome"]["kind"], "diverged");
    assert_eq!(guided["token_ids"][0], recorded["scenario"]["gold_token"]);

    let bad = dagcd(
        tmp.path(),
        &[
            "decode",
            "--detector",
            det,
            "--record-trace",
            "x.dgtr",
            "--out",
            "bad",
        ],
    );
    assert_eq!(code(&bad), 2);
}

#[test]
fn eval_perfect_predictions_score_100() {
    let tmp = TempDir::new().unwrap();
    write_eval_inputs(
        tmp.path(),
        "{\"id\":\"q1\",\"prediction\":\"Paris\"}\n{\"id\":\"q2\",\"prediction\":\"York City\"}\n",
    );
    let out = dagcd(
        tmp.path(),
        &[
            "eval",
            "--predictions",
            "pred.jsonl",
            "--dataset",
            "data.jsonl",
            "--out",
            "e",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(
        stdout(&out).contains("EM 100.00 F1 100.00"),
        "{}",
        stdout(&out)
    );
}
