use std::fs;
use std::path::Path;
use std::process::Command;
use std::rc::Rc;

use nestedmorph::gradcheck::{CaseFn, GradcheckCase};
use nestedmorph::io::load_volume;
use nestedmorph::{count_params, ModelConfig, Tensor};
use nestedmorph_cli::{run, run_gradcheck, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
use serde_json::Value;
use tempfile::TempDir;

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cli(args: &[&str]) -> Outcome {
    let mut argv = vec!["nestedmorph"];
    argv.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_train_register_pipeline() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let run_dir = tmp.path().join("run");

    let o = cli(&["--json", "synth", "--out", p(&data), "--count", "3", "--seed", "5"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let summary: Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(summary["pairs"].as_array().unwrap().len(), 3);
    let pair = data.join("pair_000");
    for f in ["moving.nmv", "fixed.nmv", "field.nmv"] {
        assert!(pair.join(f).is_file(), "{f}");
    }
    assert_eq!(load_volume(&pair.join("field.nmv")).unwrap().shape(), &[3, 32, 32, 32]);

    let o = cli(&["--json", "train", "--data", p(&data), "--out", p(&run_dir), "--epochs", "2"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let summary: Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(summary["epochs"], 2);
    assert_eq!(summary["train_pairs"], 2);
    assert_eq!(summary["val_pairs"], 1);
    let curve = fs::read_to_string(run_dir.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    let field = tmp.path().join("field.nmv");
    let report = tmp.path().join("report.json");
    let warped = tmp.path().join("warped.nmv");
    let o = cli(&[
        "register",
        "--checkpoint",
        p(&run_dir.join("checkpoint.json")),
        "--moving",
        p(&pair.join("moving.nmv")),
        "--fixed",
        p(&pair.join("fixed.nmv")),
        "--out-field",
        p(&field),
        "--report",
        p(&report),
        "--out-warped",
        p(&warped),
    ]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    assert!(o.stdout.contains("SSIM"));
    assert_eq!(load_volume(&field).unwrap().shape(), &[3, 32, 32, 32]);
    assert_eq!(load_volume(&warped).unwrap().shape(), &[1, 32, 32, 32]);
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["ssim", "hd95", "sdlogj", "ncc", "loss_total", "config_hash", "engine_version"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    let mut trained = ModelConfig::default();
    trained.optimizer.epochs = 2;
    assert_eq!(r["config_hash"], trained.hash());
}

#[test]
fn metrics_of_a_volume_with_itself() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    assert_eq!(cli(&["synth", "--out", p(&data), "--shape", "12", "--amplitude", "1"]).code, EXIT_OK);
    let x = data.join("pair_000").join("fixed.nmv");
    let o = cli(&["--json", "metrics", "--a", p(&x), "--b", p(&x)]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let m: Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(m["ssim"].as_f64().unwrap(), 1.0);
    assert_eq!(m["hd95"].as_f64().unwrap(), 0.0);
    assert!(m["sdlogj"].is_null());

    let o = cli(&["metrics", "--a", p(&x), "--b", p(&x)]);
    assert!(o.stdout.contains("SSIM    1.000000"), "{}", o.stdout);
}

#[test]
fn params_json_matches_the_library() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = tmp.path().join("tiny.json");
    fs::write(&cfg_path, ModelConfig::tiny().to_json()).unwrap();
    let o = cli(&["--json", "params", "--config", p(&cfg_path)]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let t: Value = serde_json::from_str(&o.stdout).unwrap();
    let expect = count_params(&ModelConfig::tiny()).unwrap();
    assert_eq!(t["total"].as_u64().unwrap() as usize, expect.total);

    let o = cli(&["params"]);
    assert!(o.stdout.starts_with("Module"));
    assert!(o.stdout.contains("DAE-Former 1"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cli(&["--bogus"]).code, EXIT_USAGE);
    assert_eq!(cli(&["synth"]).code, EXIT_USAGE);
    assert_eq!(cli(&[]).code, EXIT_USAGE);
    let o = cli(&["--help"]);
    assert_eq!(o.code, EXIT_OK);
    assert!(o.stdout.contains("gradcheck"));
    let tmp = TempDir::new().unwrap();
    assert_eq!(cli(&["synth", "--out", p(tmp.path()), "--precision", "16"]).code, EXIT_USAGE);
}

#[test]
fn data_errors_exit_two() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.nmv");
    fs::write(&bad, b"NIFTI-ish bytes").unwrap();
    let o = cli(&["metrics", "--a", p(&bad), "--b", p(&bad)]);
    assert_eq!(o.code, EXIT_DATA);
    assert!(o.stderr.contains("NIFT"), "{}", o.stderr);

    let o = cli(&["metrics", "--a", p(&tmp.path().join("missing.nmv")), "--b", p(&bad)]);
    assert_eq!(o.code, EXIT_DATA);

    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"attention": {"efficient": false, "channel": false}, "optimizer": {"batch_size": 0}}"#).unwrap();
    let o = cli(&["params", "--config", p(&cfg)]);
    assert_eq!(o.code, EXIT_DATA);
    assert!(o.stderr.contains("efficient/channel") && o.stderr.contains("batch_size"), "{}", o.stderr);

    let o = cli(&["train", "--data", p(tmp.path()), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(o.code, EXIT_DATA);
    assert!(o.stderr.contains("no moving.nmv"), "{}", o.stderr);
}

#[test]
fn divergence_exits_three() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    assert_eq!(cli(&["synth", "--out", p(&data)]).code, EXIT_OK);
    let mut cfg = ModelConfig::default();
    cfg.optimizer.kind = nestedmorph::optim::OptimizerKind::Sgd;
    cfg.optimizer.learning_rate = 1e12;
    let cfg_path = tmp.path().join("hot.json");
    fs::write(&cfg_path, cfg.to_json()).unwrap();
    let o = cli(&[
        "train",
        "--config",
        p(&cfg_path),
        "--data",
        p(&data),
        "--out",
        p(&tmp.path().join("o")),
        "--epochs",
        "3",
    ]);
    assert_eq!(o.code, EXIT_NUMERIC, "{}", o.stderr);
    assert!(o.stderr.contains("diverged"), "{}", o.stderr);
}

fn square_case(factor: f64) -> GradcheckCase {
    // Backward multiplies by `factor · x`; only 2 is correct for x².
    let f: CaseFn = Rc::new(move |t, x| {
        let v = t.value(x).map(|a| a * a);
        let y = t.record(v, &[x], move |g, vals, _| {
            vec![Some(g.zip_map(vals[0], |g, a| factor * g * a).unwrap())]
        });
        Ok(t.sum(y))
    });
    GradcheckCase::new("square", Tensor::from_fn(vec![4], |i| i as f64 - 1.3), f)
}

#[test]
fn gradcheck_flags_a_sabotaged_rule() {
    let mut out = Vec::new();
    assert!(run_gradcheck(&[square_case(2.0)], false, &mut out).is_ok());
    let err = run_gradcheck(&[square_case(2.0), square_case(1.0)], true, &mut out).unwrap_err();
    assert_eq!(err.code, EXIT_NUMERIC);
}

#[test]
fn binary_runs_the_standard_gradcheck() {
    let o = Command::new(env!("CARGO_BIN_EXE_nestedmorph"))
        .args(["gradcheck", "--seed", "0"])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{stdout}\n{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout.contains("model_loss/moving"));

    let o = Command::new(env!("CARGO_BIN_EXE_nestedmorph")).arg("--nope").output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
}
