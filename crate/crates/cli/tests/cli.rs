use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gmic3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmic3d")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", o.status, String::from_utf8_lossy(&o.stdout), stderr(&o));
    o
}

const SPEC: &str = r#"
height = [32, 32]
width = [32, 32]
depth = [3, 4]
lesions_per_class = [1, 1]
radius = [4.0, 6.0]
benign_contrast = 0.4
malignant_contrast = 0.5
seed = 11
"#;

const CONFIG: &str = r#"
global_widths = [4, 8]
global_strides = [2, 2]
norm_groups = 2
local_widths = [4, 8]
local_strides = [2, 2]
attention_hidden = 4
patch_size = 8
num_patches = 2
pool_percent = 20.0
zeta = 1
max_epochs = 2
patience = 1
tta = 2
max_shift = 2
max_resize = 2
seed = 4
"#;

fn tiny_data(dir: &Path) -> String {
    let spec = dir.join("spec.toml");
    std::fs::write(&spec, SPEC).unwrap();
    let data = dir.join("data");
    ok(gmic3d(&["generate-data", "--spec", spec.to_str().unwrap(), "--groups", "20", "--out", data.to_str().unwrap()]));
    data.to_str().unwrap().to_string()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, CONFIG).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn help_and_usage_errors() {
    let o = ok(gmic3d(&["--help"]));
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["generate-data", "train", "eval", "bench", "ablate"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
    assert_eq!(gmic3d(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(gmic3d(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one_with_a_category() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let o = gmic3d(&["eval", "--checkpoint", missing.to_str().unwrap(), "--data", missing.to_str().unwrap(), "--report", "r.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).lines().any(|l| l.starts_with("error[")), "{}", stderr(&o));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 1").unwrap();
    let data = tiny_data(dir.path());
    let out = dir.path().join("run");
    let o = gmic3d(&["train", "--config", bad.to_str().unwrap(), "--data", &data, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error[config]"), "{}", stderr(&o));
    assert!(!out.exists(), "failed run left an output directory");
}

#[test]
fn generate_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    assert!(Path::new(&data).join("manifest.json").exists());
    let again = dir.path().join("data");
    let o = gmic3d(&["generate-data", "--spec", dir.path().join("spec.toml").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "existing output must not be overwritten");

    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    ok(gmic3d(&["train", "--config", &cfg, "--data", &data, "--out", run.to_str().unwrap()]));
    for f in ["checkpoint.g3d", "history.json", "manifest.json", "config.toml"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let history: Value = serde_json::from_str(&std::fs::read_to_string(run.join("history.json")).unwrap()).unwrap();
    assert!(!history.as_array().unwrap().is_empty());

    let report = dir.path().join("report.json");
    let patches = dir.path().join("patches.json");
    let ck = run.join("checkpoint.g3d");
    ok(gmic3d(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        &data,
        "--report",
        report.to_str().unwrap(),
        "--bootstrap",
        "50",
        "--dump-patches",
        patches.to_str().unwrap(),
    ]));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in gmic3d::report::report_keys() {
        assert!(r.get(&key).is_some(), "report lacks {key}");
    }
    let auc = r["image_auc_malignant"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(&patches).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 40);
}

#[test]
fn ablation_writes_one_row_per_zeta() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("ablate");
    ok(gmic3d(&["ablate", "--config", &cfg, "--data", &data, "--out", out.to_str().unwrap(), "--bootstrap", "20", "--tta", "1"]));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("zeta,"));
    let zetas: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(zetas, ["0", "5", "10", "inf"]);
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
}

#[test]
fn bench_prints_counts_and_extrapolations() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("bench.json");
    let o = ok(gmic3d(&["bench", "--profile", "paper", "--slices", "96", "--extrapolate", "4,8,16", "--json", json.to_str().unwrap()]));
    let text = String::from_utf8_lossy(&o.stdout);
    for m in ["gmic3d", "dense2d", "dense3d"] {
        assert!(text.contains(m));
    }
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let (direct, ex) = (row["gmacs"].as_f64().unwrap(), row["extrapolated"]["gmacs"].as_f64().unwrap());
        if row["model"] != "dense3d" {
            assert!((direct - ex).abs() <= 1e-9 * direct, "{row}");
        }
    }
    let o = gmic3d(&["bench", "--profile", "enormous"]);
    assert_eq!(o.status.code(), Some(1));
}
