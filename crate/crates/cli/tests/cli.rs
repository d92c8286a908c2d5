use std::fs;
use std::path::{Path, PathBuf};

use multits_cli::main_with_args;
use multits_cli::rundir::{sha256_hex, Manifest, MANIFEST};
use serde_json::Value;

const TINY: &str = r#"{
  "data": {"synthetic": {"n": 3, "t": 260, "period": 24, "seed": 5}},
  "model": {"w": 6, "nu": 3, "d": 4, "m": 4, "kappa": 2, "groups": 1, "heads": 2, "k_cheb": 2},
  "optimizer": {"epochs": 2, "batch": 16, "shards": 2, "lr": 0.003},
  "lm": {"d_lm": 8, "layers": 1, "max_len": 32, "groups": 1, "heads": 2, "ffn": 8, "rank": 4, "experts": 3, "k_top": 2, "epochs": 1, "batch": 8},
  "lm_pairs": 16,
  "horizons": [1, 3],
  "missing": {"block_len": [3, 6]}
}"#;

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    fs::write(&path, config).unwrap();
    (dir, path)
}

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("multits").chain(args.iter().copied()))
}

/// The single run directory created under `root`.
fn only_run(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn check_manifest(dir: &Path) {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST)).unwrap()).unwrap();
    let mut listed: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
    listed.sort_unstable();
    let mut present: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != MANIFEST)
        .collect();
    present.sort_unstable();
    assert_eq!(listed, present);
    for f in &m.files {
        assert_eq!(sha256_hex(&fs::read(dir.join(&f.path)).unwrap()), f.sha256);
    }
    assert!(listed.contains(&"config.json"));
}

#[test]
fn train_evaluate_forecast_round_trip() {
    let (tmp, cfg) = setup(TINY);
    let cfg_s = cfg.to_str().unwrap();
    let out = tmp.path().join("train");
    assert_eq!(run(&["train", "--config", cfg_s, "--out", out.to_str().unwrap(), "--seed", "3"]), 0);
    let train_dir = only_run(&out);
    check_manifest(&train_dir);
    let metrics = json(&train_dir.join("metrics.json"));
    let logged = metrics["runs"][0]["best_val_mae"].as_f64().unwrap();
    let ckpt = train_dir.join("model.ckpt");

    let eval_out = tmp.path().join("eval");
    assert_eq!(run(&["evaluate", "--config", cfg_s, "--out", eval_out.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]), 0);
    let eval_dir = only_run(&eval_out);
    check_manifest(&eval_dir);
    let em = json(&eval_dir.join("metrics.json"));
    assert!((em["reproduced_val_mae"].as_f64().unwrap() - logged).abs() < 1e-9);
    assert_eq!(em["test"]["horizons"].as_array().unwrap().len(), 2);
    let csv = fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("split,horizon,MAE,RMSE,MAPE\n"));
    assert!(csv.contains("test,all,"));

    let fc_out = tmp.path().join("forecast");
    assert_eq!(run(&["forecast", "--config", cfg_s, "--out", fc_out.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]), 0);
    let preds = fs::read_to_string(only_run(&fc_out).join("predictions.csv")).unwrap();
    let mut lines = preds.lines();
    assert_eq!(lines.next().unwrap(), "sensor_id,anchor_t,horizon_step,y_true,y_pred");
    assert_eq!(lines.count(), (260 - 6 + 1) * 3 * 3);

    // resolved config fed back in reproduces the checkpoint bytes
    let echo_out = tmp.path().join("echo");
    let echoed = train_dir.join("config.json");
    assert_eq!(run(&["train", "--config", echoed.to_str().unwrap(), "--out", echo_out.to_str().unwrap()]), 0);
    let again = only_run(&echo_out);
    assert_eq!(fs::read(again.join("model.ckpt")).unwrap(), fs::read(&ckpt).unwrap());
}

#[test]
fn gaussian_forecast_has_interval_columns() {
    let config = TINY.replace(r#""k_cheb": 2}"#, r#""k_cheb": 2, "uncertainty": true, "use_text": false}"#);
    let (tmp, cfg) = setup(&config);
    let out = tmp.path().join("train");
    assert_eq!(run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--runs", "2"]), 0);
    let dir = only_run(&out);
    assert!(dir.join("model-run1.ckpt").is_file());
    assert!(!dir.join("lm_adapters.ckpt").exists());
    let metrics = json(&dir.join("metrics.json"));
    assert_eq!(metrics["runs"].as_array().unwrap().len(), 2);
    assert!(metrics["std"]["aggregate"]["MAE"].as_f64().unwrap() >= 0.0);
    let fc = tmp.path().join("fc");
    let ckpt = dir.join("model.ckpt");
    assert_eq!(run(&["forecast", "--config", cfg.to_str().unwrap(), "--out", fc.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]), 0);
    let preds = fs::read_to_string(only_run(&fc).join("predictions.csv")).unwrap();
    assert!(preds.starts_with("sensor_id,anchor_t,horizon_step,y_true,y_pred,mu,sigma,lo90,hi90\n"));
}

#[test]
fn prepare_and_train_lm_write_their_artifacts() {
    let (tmp, cfg) = setup(TINY);
    let cfg_s = cfg.to_str().unwrap();
    let out = tmp.path().join("prep");
    assert_eq!(run(&["prepare", "--config", cfg_s, "--out", out.to_str().unwrap(), "--scheme", "mcar", "--rates", "0.2"]), 0);
    let dir = only_run(&out);
    check_manifest(&dir);
    let prep = json(&dir.join("prepared.json"));
    let realized = prep["realized_missing"].as_f64().unwrap();
    assert!((realized - 0.2).abs() < 0.05);
    assert_eq!(json(&dir.join("norm.json"))["computed_on"], "train");
    assert_eq!(fs::read_to_string(dir.join("mask.csv")).unwrap().lines().count(), 261);

    let lm_out = tmp.path().join("lm");
    assert_eq!(run(&["train-lm", "--config", cfg_s, "--out", lm_out.to_str().unwrap()]), 0);
    let lm_dir = only_run(&lm_out);
    check_manifest(&lm_dir);
    assert_eq!(fs::read_to_string(lm_dir.join("instructions.jsonl")).unwrap().lines().count(), 16);
    assert!(json(&lm_dir.join("text_bank.json"))["texts"].as_array().unwrap().len() > 1);

    // the tuned adapters can be reused for training
    let tr = tmp.path().join("train");
    let adapters = lm_dir.join("lm_adapters.ckpt");
    assert_eq!(run(&["train", "--config", cfg_s, "--out", tr.to_str().unwrap(), "--checkpoint", adapters.to_str().unwrap()]), 0);
    assert!(!only_run(&tr).join("lm_adapters.ckpt").exists());
}

#[test]
fn ablate_and_missing_grids_have_table_shape() {
    let config = TINY.replace(r#""epochs": 2, "batch""#, r#""epochs": 1, "batch""#);
    let (tmp, cfg) = setup(&config);
    let cfg_s = cfg.to_str().unwrap();
    let out = tmp.path().join("ablate");
    assert_eq!(run(&["ablate", "--config", cfg_s, "--out", out.to_str().unwrap(), "--variants", "no-text,w/o DP"]), 0);
    let cells = json(&only_run(&out).join("ablation.json"));
    let names: Vec<&str> = cells.as_array().unwrap().iter().map(|c| c["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "w/o LLMs", "w/o DP"]);

    let out = tmp.path().join("missing");
    assert_eq!(run(&["simulate-missing", "--config", cfg_s, "--out", out.to_str().unwrap(), "--scheme", "block", "--rates", "0.1,0.3"]), 0);
    let dir = only_run(&out);
    let grid = json(&dir.join("missing_grid.json"));
    let rates: Vec<f64> = grid.as_array().unwrap().iter().map(|c| c["rate"].as_f64().unwrap()).collect();
    assert_eq!(rates, [0.0, 0.1, 0.3]);
    let csv = fs::read_to_string(dir.join("missing_grid.csv")).unwrap();
    assert!(csv.starts_with("scheme,rate,realized_rate,horizon,MAE,RMSE,MAPE,MAE_std,RMSE_std,MAPE_std\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 3);
}

#[test]
fn exit_codes() {
    let (tmp, cfg) = setup(TINY);
    let cfg_s = cfg.to_str().unwrap();
    let out = tmp.path().join("x");
    let out_s = out.to_str().unwrap();
    assert_eq!(run(&["gradcheck", "--config", cfg_s, "--out", out_s]), 0);
    assert_eq!(run(&["gradcheck"]), 1);
    assert_eq!(run(&["evaluate", "--config", cfg_s, "--out", out_s]), 1);
    assert_eq!(run(&["evaluate", "--config", cfg_s, "--out", out_s, "--checkpoint", "/nonexistent.ckpt"]), 1);
    assert_eq!(run(&["ablate", "--config", cfg_s, "--out", out_s, "--variants", "no-head"]), 1);
    assert_eq!(run(&["train", "--config", cfg_s, "--scheme", "sometimes"]), 1);
    assert_eq!(run(&["train", "--config", cfg_s, "--rates", "0.99"]), 1);
    assert_eq!(run(&["--help"]), 0);
    let (_t2, bad) = setup(r#"{"optimizer": {"epochs": -1}}"#);
    assert_eq!(run(&["train", "--config", bad.to_str().unwrap(), "--out", out_s]), 1);
    let (_t3, unknown) = setup(r#"{"modle": {}}"#);
    assert_eq!(run(&["train", "--config", unknown.to_str().unwrap(), "--out", out_s]), 1);
    // a corrupt checkpoint fails at run time
    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(run(&["evaluate", "--config", cfg_s, "--out", out_s, "--checkpoint", junk.to_str().unwrap()]), 2);
}
