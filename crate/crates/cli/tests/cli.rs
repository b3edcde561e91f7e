use std::path::Path;
use std::process::{Command, Output};

fn brds(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brds"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn brds")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TRAIN: &str = "seed = 2\n[task]\nkind = \"adding_problem\"\ntrain = 200\nval = 40\ntest = 40\nseq_len = 10\n[model]\nhidden = 6\n[train]\nepochs = 2\n";

fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("train.toml"), TRAIN).unwrap();
    let o = brds(dir.path(), &["train", "--config", "train.toml", "--out", "ck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn missing_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = brds(dir.path(), &["train", "--config", "nope.toml", "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("x").exists());
}

#[test]
fn bad_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&brds(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&brds(dir.path(), &["prune", "--spar-x", "10"])), 2);
    assert_eq!(code(&brds(dir.path(), &["--help"])), 0);
}

#[test]
fn unknown_config_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.toml"), format!("{TRAIN}bogus = 1\n")).unwrap();
    let o = brds(dir.path(), &["train", "--config", "t.toml", "--out", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn invalid_sparsity_is_config_error() {
    let dir = trained();
    let o = brds(dir.path(), &["prune", "--checkpoint", "ck", "--spar-x", "120", "--spar-h", "0", "--out", "p"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_writes_manifest_and_checkpoint() {
    let dir = trained();
    let m = json(dir.path().join("ck/manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["seed"], 2);
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    for f in ["model.json", "model.sidecar.json", "task.json"] {
        assert!(outputs.contains(&f), "{f} missing from {outputs:?}");
        assert!(dir.path().join("ck").join(f).exists());
    }
    assert_eq!(m["diagnostics"][0], "train_log.csv");
    let log = std::fs::read_to_string(dir.path().join("ck/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
}

#[test]
fn search_with_zero_overall_sparsity_is_a_no_op() {
    let dir = trained();
    std::fs::write(
        dir.path().join("s.toml"),
        "[sparsity]\nOS = 0\nalpha = 10\ndelta_x = 5\ndelta_h = 5\n",
    )
    .unwrap();
    let o = brds(dir.path(), &["search", "--config", "s.toml", "--checkpoint", "ck", "--out", "s"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(dir.path().join("s/result.json"));
    assert_eq!(r["Spar_x_MA"], 0.0);
    assert_eq!(r["Spar_h_MA"], 0.0);
    assert_eq!(r["candidates"], 1);
    assert_eq!(
        std::fs::read(dir.path().join("s/model.json")).unwrap(),
        std::fs::read(dir.path().join("ck/model.json")).unwrap()
    );
}

#[test]
fn search_trace_has_one_row_per_candidate() {
    let dir = trained();
    std::fs::write(
        dir.path().join("s.toml"),
        "[sparsity]\nOS = 60\nalpha = 30\ndelta_x = 10\ndelta_h = 15\n[retrain]\nepochs = 1\n",
    )
    .unwrap();
    let o = brds(dir.path(), &["search", "--config", "s.toml", "--checkpoint", "ck", "--out", "s"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // 1 + floor(min(40/10, 60/15)) + floor(min(40/15, 60/10))
    let expected = 1 + 4 + 2;
    let trace = std::fs::read_to_string(dir.path().join("s/trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next().unwrap(), "iteration,phase,spar_x,spar_h,accuracy,n_re,wall_time_s");
    assert_eq!(lines.count(), expected);
    let r = json(dir.path().join("s/result.json"));
    assert_eq!(r["candidates"], expected);
    for key in ["MA", "Spar_x_MA", "Spar_h_MA", "uniform_accuracy"] {
        assert!(r[key].is_number(), "{key}");
    }
    assert!(r["MA"].as_f64().unwrap() >= r["uniform_accuracy"].as_f64().unwrap());
    let masks = json(dir.path().join("s/masks.json"));
    assert_eq!(masks["Spar_x"], r["Spar_x_MA"]);
}

#[test]
fn sweep_single_point_grid_adds_uniform() {
    let dir = trained();
    std::fs::write(
        dir.path().join("w.toml"),
        "[sweep]\nOS = 50\ngrid = [[0.0, 100.0]]\n[retrain]\nepochs = 1\n",
    )
    .unwrap();
    let o = brds(dir.path(), &["sweep", "--config", "w.toml", "--checkpoint", "ck", "--out", "w"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("w/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "spar_x,spar_h,overall_sparsity,accuracy,uniform");
    assert_eq!(lines.len(), 3);
    assert!(lines[1..].iter().any(|l| l.starts_with("50,50,") && l.ends_with(",1")));
}

#[test]
fn dense_model_simulates_like_the_reference() {
    let dir = trained();
    let p = dir.path();
    std::fs::write(p.join("a.toml"), "R = 8\nQ = 2\n").unwrap();
    std::fs::write(p.join("in.json"), r#"{"inputs": [[0.5, 1.0], [0.25, 0.0], [0.75, 1.0]]}"#).unwrap();
    assert_eq!(code(&brds(p, &["quantize", "--model", "ck/model.json", "--out", "q"])), 0);
    let o = brds(p, &["build-image", "--model", "q/model.json", "--config", "a.toml", "--out", "img"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = brds(p, &["simulate", "--image", "img/image.brds", "--input", "in.json", "--config", "a.toml", "--out", "sim"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = json(p.join("sim/outputs.json"));
    assert_eq!(out["reference_match"], true);
    assert_eq!(out["timesteps"], 3);
    let info = json(p.join("img/image.json"));
    assert_eq!(info["geometry"]["hidden"], 6);
    assert_eq!(info["geometry"]["x_sp"], 2);
    assert_eq!(info["n"], 16);
    let report = json(p.join("sim/report.json"));
    assert_eq!(
        report["total_cycles"].as_u64().unwrap(),
        3 * report["cycles"]["cycles_per_timestep"].as_u64().unwrap()
    );
}

#[test]
fn corrupt_image_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("bad.brds"), b"NOPE\x01\x00garbage").unwrap();
    std::fs::write(p.join("a.toml"), "R = 4\nQ = 1\n").unwrap();
    std::fs::write(p.join("in.json"), r#"{"inputs": [[0.0]]}"#).unwrap();
    let o = brds(p, &["simulate", "--image", "bad.brds", "--input", "in.json", "--config", "a.toml", "--out", "s"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn pruned_model_images_need_masks() {
    let dir = trained();
    let p = dir.path();
    std::fs::write(p.join("a.toml"), "R = 4\nQ = 1\n").unwrap();
    let o = brds(p, &["prune", "--checkpoint", "ck", "--spar-x", "50", "--spar-h", "50", "--out", "pr"]);
    assert_eq!(code(&o), 0);
    // masks recover the layout even where retained weights quantize to zero
    let o = brds(p, &["build-image", "--model", "pr/model.json", "--masks", "pr/masks.json", "--config", "a.toml", "--out", "img"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let info = json(p.join("img/image.json"));
    assert_eq!(info["geometry"]["x_sp"], 1);
    assert_eq!(info["geometry"]["h_sp"], 3);
}

#[test]
fn report_effective_throughput_relation() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(
        p.join("r.toml"),
        "R_S = 80\nR_L = 256\nQ = 4\nH = 1024\nX = 153\nX_SP = 20\nH_SP = 64\nsparsity = 0.875\n",
    )
    .unwrap();
    std::fs::write(p.join("ref.json"), r#"{"effective_gops": 1600.0}"#).unwrap();
    let o = brds(p, &["report", "--config", "r.toml", "--out", "rep", "--compare", "ref.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(p.join("rep/report.json"));
    let gops = r["throughput"]["gops"].as_f64().unwrap();
    assert_eq!(r["throughput"]["effective_gops"].as_f64().unwrap(), gops / 0.125);
    assert_eq!(r["throughput"]["power_w"], "n/a");
    assert_eq!(r["cycles"]["cycles_per_timestep"], 1035);
    let cmp = json(p.join("rep/comparison.json"));
    assert_eq!(cmp.as_array().unwrap().len(), 1);
    let text = std::fs::read_to_string(p.join("rep/report.txt")).unwrap();
    assert!(text.contains("effective GOPS"));
}
