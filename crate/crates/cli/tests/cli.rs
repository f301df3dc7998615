use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pmss::backbone::BackboneConfig;
use pmss::data::SynthSpec;
use pmss::framework::{RunConfig, Strategy};
use serde_json::Value;
use tempfile::TempDir;

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn pmss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmss")).args(args).output().expect("pmss runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn schema(name: &str) -> jsonschema::JSONSchema {
    let text = std::fs::read_to_string(crate_dir().join("schemas").join(format!("{name}.schema.json"))).unwrap();
    let value: Value = serde_json::from_str(&text).unwrap();
    jsonschema::JSONSchema::compile(&value).unwrap_or_else(|e| panic!("schema {name}: {e}"))
}

fn assert_valid(name: &str, doc: &Value) {
    let s = schema(name);
    let msgs: Vec<String> = match s.validate(doc) {
        Ok(()) => return,
        Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    panic!("{name} schema violations: {msgs:#?}\n{doc:#}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_else(|| panic!("empty stderr"));
    let v: Value = serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"));
    assert_valid("error", &v);
    v
}

/// A configuration small enough to train in well under a second.
fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.backbone = BackboneConfig::Cnn { channels: vec![4, 8], depths: vec![1, 1], seed: 3 };
    cfg.spm.stages = vec![1, 2, 3];
    cfg.spm.channels = 4;
    cfg.head.channels = 4;
    cfg.modules.channels = 4;
    cfg.train.steps = 4;
    cfg.train.batch = 2;
    cfg.data.size = 16;
    cfg.data.train = 4;
    cfg.data.val = 4;
    cfg.pretrain = None;
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn train(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", arg(config), "--out", arg(out)];
    args.extend_from_slice(extra);
    pmss(&args)
}

#[test]
fn shipped_configs_match_schema_and_parse() {
    for name in ["default.json", "oneshot.json"] {
        let v = read_json(&crate_dir().join("configs").join(name));
        assert_valid("run_config", &v);
        RunConfig::from_json(&v.to_string()).unwrap().validate().unwrap();
    }
    assert_valid("run_config", &serde_json::to_value(tiny()).unwrap());
}

#[test]
fn default_config_trains_on_a_saved_backbone() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = crate_dir().join("configs/default.json");
    let cfg = RunConfig::from_json(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    let bb_path = tmp.path().join("backbone.pmss");
    let mut bb = cfg.backbone.build().unwrap();
    bb.freeze();
    bb.save(&bb_path).unwrap();
    let out = tmp.path().join("run");
    let res = train(&cfg_path, &out, &["--steps", "3", "--backbone", arg(&bb_path)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let report = std::fs::read_to_string(out.join("report.ndjson")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 3);
    for l in lines {
        assert_valid("step_record", &serde_json::from_str(l).unwrap());
    }
    let manifest = read_json(&out.join("manifest.json"));
    assert_valid("manifest", &manifest);
    assert_valid("run_config", &manifest["config"]);
    assert_valid("metrics", &read_json(&out.join("metrics.json")));
    assert_eq!(manifest["backbone_sha256_before"], manifest["backbone_sha256_after"]);
    assert_eq!(manifest["config"]["train"]["steps"], 3);
    assert!(out.join("model.pmss").exists());
}

#[test]
fn zero_iterations_is_a_config_error_naming_the_field() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny();
    cfg.spm.iterations = 0;
    let res = train(&write_config(tmp.path(), "bad.json", &cfg), &tmp.path().join("run"), &[]);
    assert_eq!(res.status.code(), Some(2));
    let err = stderr_error(&res);
    assert_eq!(err["error"], "config");
    assert_eq!(err["field"], "spm.R");
}

#[test]
fn unknown_config_field_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("typo.json");
    std::fs::write(&path, r#"{"train": {"stpes": 10}}"#).unwrap();
    let res = pmss(&["count", "--config", arg(&path)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr_error(&res)["message"].as_str().unwrap().contains("stpes"));
}

#[test]
fn identical_inputs_give_identical_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", &tiny());
    let sha = |dir: &str| {
        let out = tmp.path().join(dir);
        let res = train(&cfg, &out, &[]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        let m = read_json(&out.join("manifest.json"));
        assert_valid("manifest", &m);
        (m["checkpoint_sha256"].clone(), m["input_hash"].clone(), std::fs::read_to_string(out.join("report.ndjson")).unwrap())
    };
    assert_eq!(sha("a"), sha("b"));
    let other = train(&cfg, &tmp.path().join("c"), &["--seed", "1"]);
    assert!(other.status.success());
    assert_ne!(read_json(&tmp.path().join("c/manifest.json"))["checkpoint_sha256"], sha("a").0);
}

#[test]
fn eval_reloads_a_checkpoint_and_rejects_a_corrupt_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", &tiny());
    let run = tmp.path().join("run");
    assert!(train(&cfg, &run, &[]).status.success());
    let ckpt = run.join("model.pmss");

    let res = pmss(&["eval", "--checkpoint", arg(&ckpt), "--json"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let m: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_valid("metrics", &m);
    // the run's own final evaluation used the same split
    assert_eq!(m["miou"], read_json(&run.join("metrics.json"))["miou"]);

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xff;
    let bad = tmp.path().join("bad.pmss");
    std::fs::write(&bad, bytes).unwrap();
    let res = pmss(&["eval", "--checkpoint", arg(&bad)]);
    assert_eq!(res.status.code(), Some(4));
    assert_eq!(stderr_error(&res)["error"], "checkpoint");

    let res = pmss(&["eval", "--checkpoint", arg(&tmp.path().join("missing.pmss"))]);
    assert_eq!(res.status.code(), Some(4));
}

#[test]
fn diverging_run_exits_non_finite_and_leaves_error_json() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny();
    cfg.strategy = Strategy::Full;
    cfg.train.lr = 1e300;
    cfg.train.clip_norm = None;
    cfg.train.steps = 20;
    let run = tmp.path().join("run");
    let res = train(&write_config(tmp.path(), "hot.json", &cfg), &run, &[]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(stderr_error(&res)["error"], "non_finite");
    let saved = read_json(&run.join("error.json"));
    assert_valid("error", &saved);
    assert_eq!(saved["exit_code"], 3);
}

#[test]
fn broken_gradient_fixture_fails_and_names_the_op() {
    let res = pmss(&["gradcheck", "--scope", "broken", "--seeds", "2", "--json"]);
    assert_eq!(res.status.code(), Some(1));
    let report: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_valid("gradcheck", &report);
    assert_eq!(report["passed"], false);
    let err = stderr_error(&res);
    assert!(err["message"].as_str().unwrap().contains("square_missing_factor_two"), "{err}");
}

#[test]
fn layer_gradcheck_passes_with_json_report() {
    let res = pmss(&["gradcheck", "--scope", "layers", "--seeds", "2", "--json"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_valid("gradcheck", &report);
    assert_eq!(report["failures"].as_array().unwrap().len(), 0);
}

#[test]
fn count_reports_frozen_backbones_and_a_monotone_stage_sweep() {
    let res = pmss(&["count", "--sweep", "--json", "--config", arg(&crate_dir().join("configs/default.json"))]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let v: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_valid("count", &v);
    for row in v["rows"].as_array().unwrap() {
        let frozen = ["head", "side", "adapter", "prompt_matched"].contains(&row["strategy"].as_str().unwrap());
        assert_eq!(row["backbone"] == 0, frozen, "{row}");
    }
    let stages: Vec<u64> = v["stage_sweep"].as_array().unwrap().iter().map(|r| r["prompt"].as_u64().unwrap()).collect();
    assert_eq!(stages.len(), 5);
    assert!(stages.windows(2).all(|w| w[0] < w[1]), "{stages:?}");
    let rec: Vec<&Value> = v["recurrent_sweep"].as_array().unwrap().iter().map(|r| &r["prompt"]).collect();
    assert!(rec.iter().all(|p| *p == rec[0]));
}

#[test]
fn ablation_and_one_shot_outputs_match_their_schemas() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", &tiny());
    let res = pmss(&["ablate", "--config", arg(&cfg), "--axis", "spl", "--seeds", "1", "--json", "--out", arg(tmp.path())]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let table: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_valid("ablation", &table);
    assert_eq!(table, read_json(&tmp.path().join("ablation_spl.json")));

    let mut one = tiny();
    one.data = SynthSpec { size: 16, train: 2, val: 4, ..SynthSpec::vessels() };
    one.train.batch = 1;
    let cfg = write_config(tmp.path(), "one.json", &one);
    let res = pmss(&["oneshot", "--config", arg(&cfg), "--repetitions", "2", "--json"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_valid("oneshot", &report);
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);

    // Dice needs a two-class task
    let res = pmss(&["oneshot", "--config", arg(&write_config(tmp.path(), "five.json", &tiny()))]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(stderr_error(&res)["field"], "data.classes");
}

#[test]
fn unknown_axis_and_scope_are_config_errors() {
    let res = pmss(&["gradcheck", "--scope", "everything"]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(stderr_error(&res)["field"], "scope");
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", &tiny());
    let res = pmss(&["ablate", "--config", arg(&cfg), "--axis", "width"]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(stderr_error(&res)["field"], "axis");
}

#[test]
fn data_export_round_trips_through_eval() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", &tiny());
    let run = tmp.path().join("run");
    assert!(train(&cfg, &run, &[]).status.success());
    let data = tmp.path().join("data");
    let res = pmss(&["data", "--config", arg(&cfg), "--out", arg(&data)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let from_disk = pmss(&["eval", "--checkpoint", arg(&run.join("model.pmss")), "--data", arg(&data), "--json"]);
    let generated = pmss(&["eval", "--checkpoint", arg(&run.join("model.pmss")), "--json"]);
    let a: Value = serde_json::from_slice(&from_disk.stdout).unwrap();
    let b: Value = serde_json::from_slice(&generated.stdout).unwrap();
    assert_eq!(a["miou"], b["miou"]);
}
