use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn efm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efm"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// Writes a small store dataset where the response depends on `color` and
/// `size`, plus a schema and a pipeline config.
fn fixture(dir: &Path) {
    let mut train = String::from("sku,store,color,size,shape,qty\n");
    let mut test = train.clone();
    let colors = ["red", "blue", "green"];
    let sizes = ["s", "m", "l"];
    let shapes = ["round", "flat"];
    for i in 0..90 {
        let (c, s, h) = (i % 3, (i / 3) % 3, (i / 9) % 2);
        let qty = (1.0 + c as f64) * (2.0 + s as f64) * (1.0 + 0.05 * ((i * 7) % 5) as f64);
        let line = format!("sku{},st{},{},{},{},{qty}\n", i % 10, i / 10, colors[c], sizes[s], shapes[h]);
        if i % 5 == 4 {
            test.push_str(&line);
        } else {
            train.push_str(&line);
        }
    }
    fs::write(dir.join("train.csv"), train).unwrap();
    fs::write(dir.join("test.csv"), &test).unwrap();
    fs::write(dir.join("unseen.csv"), test.replacen("red", "purple", 1)).unwrap();
    let schema = json!({
        "response": "qty",
        "attributes": ["color", "size", "shape"],
        "item_column": "sku",
        "group_column": "store"
    });
    fs::write(dir.join("schema.json"), schema.to_string()).unwrap();
    let config = json!({
        "loss": "pes",
        "seed": 3,
        "train": {"eta": 0.004, "max_iterations": 800, "lambda_v": 0.0, "lambda_w": 0.0},
        "selection": {"b": 1, "g": 1, "lambda_A": 0.0, "lambda_I": 0.0, "k": 4},
        "data": {"schema": schema, "train": "train.csv", "test": "test.csv"},
        "output_dir": "out"
    });
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config).unwrap()).unwrap();
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = efm(&["pipeline", "--config", "config.json"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["model.json", "forecasts.csv", "evaluation.json", "diagnostics.json", "selection_trace.json", "loss_curve.csv"] {
        assert!(dir.path().join("out").join(name).is_file(), "{name}");
    }
    let trace: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/selection_trace.json")).unwrap()).unwrap();
    // size may enter on its own or through an interaction
    let mentioned = trace["attributes"].to_string() + &trace["interactions"].to_string();
    assert!(mentioned.contains("color") && mentioned.contains("size"), "{mentioned}");
    let eval: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/evaluation.json")).unwrap()).unwrap();
    assert!(eval["model"]["mape_store"].as_f64().unwrap() < eval["null_model"]["mape_store"].as_f64().unwrap());
}

#[test]
fn staged_commands_match_the_pipeline_model() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let d = dir.path();
    assert_eq!(code(&efm(&["pipeline", "--config", "config.json"], d)), 0);
    assert_eq!(code(&efm(&["select", "--config", "config.json", "--output", "sel.json"], d)), 0);
    assert_eq!(code(&efm(&["train", "--config", "config.json", "--selection", "sel.json", "--output", "model.json"], d)), 0);
    assert_eq!(
        fs::read(d.join("model.json")).unwrap(),
        fs::read(d.join("out/model.json")).unwrap()
    );
    let predict = ["predict", "--model", "model.json", "--schema", "schema.json", "--input", "test.csv", "--output", "f.csv"];
    assert_eq!(code(&efm(&predict, d)), 0);
    assert_eq!(fs::read(d.join("f.csv")).unwrap(), fs::read(d.join("out/forecasts.csv")).unwrap());
    let eval = efm(&["evaluate", "--forecasts", "f.csv"], d);
    assert_eq!(code(&eval), 0);
    let report: Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["n_rows"], 18);
}

#[test]
fn unseen_levels_fail_unless_remapped() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let d = dir.path();
    assert_eq!(code(&efm(&["pipeline", "--config", "config.json"], d)), 0);
    let args = ["predict", "--model", "out/model.json", "--schema", "schema.json", "--input", "unseen.csv", "--output", "f.csv"];
    let out = efm(&args, d);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("purple"));
    // the training data has no missing level to remap to
    let mut remap = args.to_vec();
    remap.push("--remap-unseen");
    assert_eq!(code(&efm(&remap, d)), 2);
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let d = dir.path();

    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(d.join("config.json")).unwrap()).unwrap();
    cfg["train"]["eta"] = json!(50.0);
    fs::write(d.join("diverge.json"), cfg.to_string()).unwrap();
    assert_eq!(code(&efm(&["pipeline", "--config", "diverge.json"], d)), 3);

    cfg["train"]["eta"] = json!(-1.0);
    fs::write(d.join("negative.json"), cfg.to_string()).unwrap();
    assert_eq!(code(&efm(&["pipeline", "--config", "negative.json"], d)), 4);

    cfg["train"]["eta"] = json!(0.01);
    cfg["train"]["learning_rate"] = json!(0.01);
    fs::write(d.join("unknown.json"), cfg.to_string()).unwrap();
    assert_eq!(code(&efm(&["pipeline", "--config", "unknown.json"], d)), 4);

    assert_eq!(code(&efm(&["pipeline", "--bogus"], d)), 4);
    assert_eq!(code(&efm(&["evaluate", "--forecasts", "absent.csv"], d)), 2);
    assert_eq!(code(&efm(&["--help"], d)), 0);
}

#[test]
fn analysis_commands_print_reports() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let d = dir.path();

    let sweep = efm(&["lps-sweep", "--sigma-min", "0", "--sigma-max", "100", "--steps", "3"], d);
    assert_eq!(code(&sweep), 0);
    let text = String::from_utf8(sweep.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sigma,ratio_indicator,mes_ls,mes_lps,mpes_ls,mpes_lps,under_ls,under_lps");
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("50,"));

    let dist = efm(&["distribution", "--schema", "schema.json", "--input", "train.csv", "--input", "test.csv"], d);
    assert_eq!(code(&dist), 0);
    let text = String::from_utf8(dist.stdout).unwrap();
    let fractions: f64 = text
        .lines()
        .nth(1)
        .unwrap()
        .split('\t')
        .map(|f| f.trim_end_matches('%').parse::<f64>().unwrap())
        .sum();
    assert!((fractions - 100.0).abs() < 0.05);

    fs::write(d.join("tiny.csv"), "sku,store,color,size,shape,qty\na,1,red,s,flat,1\nb,1,red,s,flat,2\nc,1,blue,s,flat,4\n").unwrap();
    let check = efm(&["bounds-check", "--schema", "schema.json", "--input", "tiny.csv", "--attributes", "color"], d);
    assert_eq!(code(&check), 0, "{}", String::from_utf8_lossy(&check.stderr));
    let report: Value = serde_json::from_slice(&check.stdout).unwrap();
    assert_eq!(report["ratio_indicator"], 16.0);
    assert_eq!(report["es_bounds_hold"], true);

    let ingest = efm(&["ingest", "--schema", "schema.json", "--input", "train.csv", "--output", "norm.csv"], d);
    assert_eq!(code(&ingest), 0);
    assert!(String::from_utf8(ingest.stdout).unwrap().contains("color: 3 levels"));
    assert!(fs::read_to_string(d.join("norm.csv")).unwrap().starts_with("item,group,color,size,shape,response"));
}
