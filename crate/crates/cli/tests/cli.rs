use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_blursplat"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_dataset(dir: &Path) {
    let spec = serde_json::json!({
        "recipe": { "seed": 3, "count": 80, "layout": "cluster-field" },
        "width": 32, "height": 24, "frames": 30, "views": 3, "dense_samples": 12
    });
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    let out = dir.join("data");
    let o = run(&[
        "blur-dataset",
        "--spec",
        spec_path.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("seed: 5"));
}

#[test]
fn gen_scene_prints_seed_and_writes_recipe() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scene.json");
    let o = run(&["gen-scene", "--count", "40", "--seed", "9", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("seed: 9"));
    let scene = blursplat::scene::GaussianScene::load(&out).unwrap();
    assert_eq!(scene.len(), 40);
    let recipe: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("scene.recipe.json")).unwrap())
            .unwrap();
    assert_eq!(recipe["recipe"]["seed"], 9);
    assert!(recipe["config_hash"].is_string());
}

#[test]
fn render_and_fft_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.json");
    assert!(run(&["gen-scene", "--count", "60", "--out", scene.to_str().unwrap()]).status.success());
    let sharp = dir.path().join("sharp.png");
    let blurry = dir.path().join("blurry.png");
    let s = scene.to_str().unwrap();
    let o = run(&["render", "--scene", s, "--width", "40", "--height", "30", "--out", sharp.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[
        "render", "--scene", s, "--width", "40", "--height", "30", "--exposure", "0.25", "--samples",
        "16", "--out", blurry.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let hf = |img: &Path| -> f64 {
        let json = dir.path().join("p.json");
        let o = run(&[
            "fft",
            "--image",
            img.to_str().unwrap(),
            "--out",
            dir.path().join("mag.png").to_str().unwrap(),
            "--json",
            json.to_str().unwrap(),
        ]);
        assert!(o.status.success());
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
        v["hf_ratio"].as_f64().unwrap()
    };
    assert!(hf(&blurry) < hf(&sharp));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // unknown flag and malformed config are configuration errors
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"total_iters": 10, "no_such_field": 1}"#).unwrap();
    let o = run(&[
        "train", "--config", bad.to_str().unwrap(), "--dataset", "nowhere", "--out", "x",
    ]);
    assert_eq!(o.status.code(), Some(2));
    // missing dataset is a data error
    let o = run(&["train", "--dataset", dir.path().join("missing").to_str().unwrap(), "--out", "x"]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&["fft", "--image", "missing.png", "--out", "x.png"]);
    assert_eq!(o.status.code(), Some(3));
    // unreachable remote provider is a transport error
    small_dataset(dir.path());
    let data = dir.path().join("data");
    let o = run(&[
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--provider",
        "remote:http://127.0.0.1:9",
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["train", "--dataset", data.to_str().unwrap(), "--provider", "magic", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_explore_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let data = dir.path().join("data");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "total_iters": 40, "warmup_iters": 10, "gen_interval": 10, "eval_interval": 20,
            "n_virtual": 4
        })
        .to_string(),
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--seed",
        "2",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("seed: 2"));
    for f in ["scene.json", "poses.json", "metrics.csv", "config.json", "explore_trace.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), blursplat::train::METRICS_HEADER);

    let o = run(&["eval", "--dataset", data.to_str().unwrap(), "--run", run_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mean"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("eval.json")).unwrap()).unwrap();
    assert!(report["config_hash"].is_string());

    let trace = dir.path().join("trace.json");
    let o = run(&[
        "explore",
        "--dataset",
        data.to_str().unwrap(),
        "--run",
        run_dir.to_str().unwrap(),
        "--provider",
        "noisy:0.05",
        "--s-min",
        "-100",
        "--s-max",
        "100",
        "--out",
        trace.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(trace).unwrap()).unwrap();
    let c = t["trace"]["candidates"].as_array().unwrap();
    assert!(!c.is_empty());
    assert!(c.iter().all(|e| e["accepted"] == true && e["s_tilde"].is_number()));
}
