use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
latent_dim = 4
hidden_dim = 6
num_lstm_layers = 1
attention_dim = 4
head_dim = 6
history = 8
horizon = 5

[train]
lr = 1e-3
batch_size = 16
max_epochs = 2
early_stop_patience = 2

[data]
logs = 4
min_rows = 60
max_rows = 80
stride = 6
"#;

fn slungload(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slungload"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
    manifest: PathBuf,
    root: PathBuf,
}

fn dataset() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    let out = slungload(&["generate", "--config", s(&config), "--seed", "3", "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = data.join("dataset.toml");
    assert!(manifest.exists());
    Fixture {
        _dir: dir,
        config,
        data,
        manifest,
        root,
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&slungload(&[])), 1);
    assert_eq!(code(&slungload(&["train", "--profile", "huge", "--data", "x", "--out", "y"])), 1);
    assert_eq!(code(&slungload(&["frobnicate"])), 1);
    assert_eq!(code(&slungload(&["--help"])), 0);
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 3\n").unwrap();
    let out = slungload(&["generate", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = slungload(&[
        "train",
        "--data",
        s(&dir.path().join("nope.toml")),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_eval_predict_round_trip() {
    let f = dataset();
    let run = f.root.join("run");
    let out = slungload(&["train", "--config", s(&f.config), "--data", s(&f.manifest), "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["model.json", "final.json", "training_log.csv", "run.json", "config.toml"] {
        assert!(run.join(file).exists(), "{file}");
    }
    let log = std::fs::read_to_string(run.join("training_log.csv")).unwrap();
    assert!(log.starts_with("epoch,split,fit,physics,projection,slack,total\n"));
    assert_eq!(log.lines().count(), 1 + 3 * 2);

    let report = f.root.join("report");
    let out = slungload(&[
        "eval", "--config", s(&f.config), "--data", s(&f.manifest), "--model", s(&run.join("model.json")),
        "--horizon", "10", "--out", s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rmse: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report.join("rmse.json")).unwrap()).unwrap();
    for model in ["physics", "model"] {
        for key in ["position", "velocity", "quaternion", "payload", "combined"] {
            assert!(rmse[model][key].as_f64().unwrap() >= 0.0);
        }
    }
    let summary = std::fs::read_to_string(report.join("summary.json")).unwrap();
    assert!(summary.contains("run.json"));

    let log_file = std::fs::read_dir(&f.data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "csv"))
        .unwrap();
    let model = run.join("model.json");
    for physics in [false, true] {
        let mut args = vec!["predict", "--model", s(&model), "--log", s(&log_file), "--start", "3", "--horizon", "7"];
        if physics {
            args.push("--physics");
        }
        let out = slungload(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8(out.stdout).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 7);
        assert_eq!(lines[0].split(',').count(), 14);
        assert!(lines[7].starts_with("7,"));
    }

    let out = slungload(&["predict", "--model", s(&model), "--log", s(&log_file), "--start", "1000"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_without_test_split_exits_2() {
    let f = dataset();
    let text = std::fs::read_to_string(&f.manifest).unwrap();
    std::fs::write(&f.manifest, text.replace("split = \"test\"", "split = \"train\"")).unwrap();
    let run = f.root.join("run");
    assert_eq!(
        code(&slungload(&["train", "--config", s(&f.config), "--data", s(&f.manifest), "--out", s(&run)])),
        0
    );
    let out = slungload(&[
        "eval", "--config", s(&f.config), "--data", s(&f.manifest), "--model", s(&run.join("model.json")),
        "--out", s(&f.root.join("report")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no test windows"));
}

#[test]
fn compare_writes_the_baseline_matrix() {
    let f = dataset();
    let out_dir = f.root.join("cmp");
    let out = slungload(&[
        "compare", "--config", s(&f.config), "--data", s(&f.manifest), "--horizon", "10", "--out", s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    for name in ["physics", "full_s0", "no_physics_s0", "no_slack_s0"] {
        assert!(stdout.contains(name), "{stdout}");
        if name != "physics" {
            assert!(out_dir.join(name).join("model.json").exists());
        }
        assert!(out_dir.join("report").join(format!("mae_{name}.csv")).exists());
    }
    let means: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report/mean_combined_rmse.json")).unwrap()).unwrap();
    assert!(means["full"].as_f64().is_some());
}

#[test]
fn diverging_controller_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("unstable.toml");
    std::fs::write(&cfg, "[data]\nlogs = 3\nmin_rows = 2000\nmax_rows = 2000\n[gains]\nposition = 400.0\nvelocity = -50.0\ndivergence_bound = 50.0\n").unwrap();
    let out = slungload(&["generate", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
