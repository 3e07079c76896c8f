use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn noda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noda"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = noda(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_CONFIG: &str = r#"{
  "lr": 1e-3, "epochs": 2, "batch": 2, "t_h_train": 2, "bptt_window": 3,
  "width": 4, "modes": 3, "hidden": 8, "segment_len": 5, "seed": 1
}"#;

/// Generate a small KS dataset and train a tiny model on it.
fn setup(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data");
    ok(&["generate", "--equation", "ks", "--n-traj", "3", "--tf", "3", "--resolution", "32", "--seed", "5", "--out", p(&data)]);
    let cfg = dir.join("train.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let model = dir.join("model.nodm");
    ok(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&model)]);
    (data, model)
}

#[test]
fn generate_writes_one_file_per_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ns");
    ok(&["generate", "--equation", "ns", "--n-traj", "2", "--tf", "2", "--resolution", "16,16", "--re", "40", "--seed", "1", "--out", p(&out)]);
    let mut names: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names, ["traj_00000.noda", "traj_00001.noda"]);
    let t = noda::dataset::read_trajectory(out.join("traj_00000.noda")).unwrap();
    assert_eq!(t.n_frames(), 3);
    assert_eq!(t.frame_size(), 256);
}

#[test]
fn train_rollout_eval_bench_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = setup(dir.path());
    let traj = data.join("traj_00002.noda");
    let est = dir.path().join("est.noda");
    ok(&["rollout", "--model", p(&model), "--traj", p(&traj), "--alpha", "0.3", "--snr", "30", "--th", "1", "--c", "random", "--seed", "3", "--out", p(&est)]);
    let e = noda::dataset::read_trajectory(&est).unwrap();
    let t = noda::dataset::read_trajectory(&traj).unwrap();
    assert_eq!(e.n_frames(), t.n_frames());
    assert_eq!(e.frames[0], t.frames[0]);

    let csv = dir.path().join("eval.csv");
    let stdout = ok(&["eval", "--est", p(&est), "--gt", p(&traj), "--th", "1", "--csv", p(&csv)]);
    let r: f64 = stdout.trim().parse().unwrap();
    assert!(r.is_finite() && r >= 0.0);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("method,equation,t_f,snr_db,alpha,t_h,mean_relmse,std_relmse,time_per_step"));

    // Same truth as estimate scores zero.
    let stdout = ok(&["eval", "--est", p(&traj), "--gt", p(&traj), "--th", "0", "--csv", p(&csv)]);
    assert_eq!(stdout.trim().parse::<f64>().unwrap(), 0.0);

    let stdout = ok(&["bench", "--model", p(&model), "--traj", p(&traj)]);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(v["ratio"].as_f64().unwrap() > 0.0);
}

#[test]
fn rollout_is_reproducible_and_noise_free_at_infinite_snr() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = setup(dir.path());
    let traj = data.join("traj_00000.noda");
    let run = |name: &str, snr: &str| {
        let out = dir.path().join(name);
        ok(&["rollout", "--model", p(&model), "--traj", p(&traj), "--alpha", "0.2", "--snr", snr, "--th", "0.5", "--seed", "9", "--out", p(&out)]);
        fs::read(out).unwrap()
    };
    assert_eq!(run("a.noda", "20"), run("b.noda", "20"));
    assert_eq!(run("c.noda", "inf"), run("d.noda", "inf"));
}

#[test]
fn experiment_writes_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = setup(dir.path());
    let spec = serde_json::json!({
        "equation": "ks",
        "model": model,
        "data": data,
        "n_train": 2,
        "t_f": 3.0,
        "t_h": 1.0,
        "snr": [20.0, 30.0],
        "alpha": [0.0, 0.2],
        "warmup_t_h": [0.25, 1.0],
        "seeds": [0, 1]
    });
    let spec_path = dir.path().join("spec.json");
    fs::write(&spec_path, spec.to_string()).unwrap();
    let out = dir.path().join("results");
    ok(&["experiment", "--spec", p(&spec_path), "--out", p(&out)]);
    let rows = noda::evaluation::read_csv(out.join("assimilation.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.mean_relmse >= 0.0));
    let rows = noda::evaluation::read_csv(out.join("prediction.csv")).unwrap();
    assert!(rows.iter().any(|r| r.method == "persistence"));
    assert!(out.join("warmup.csv").exists());
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&["gradcheck", "--seed", "7"]);
    assert!(stdout.contains("fno_block"));
    assert!(stdout.contains("noda_rollout_3"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // Usage errors.
    assert_eq!(noda(&[]).status.code(), Some(2));
    assert_eq!(noda(&["generate", "--equation", "heat", "--tf", "1", "--out", "x"]).status.code(), Some(2));
    assert_eq!(noda(&["rollout", "--model", "m", "--traj", "t", "--snr", "loud", "--th", "1", "--out", "o"]).status.code(), Some(2));
    let out = p(dir.path());
    assert_eq!(noda(&["generate", "--equation", "ks", "--tf", "1", "--resolution", "100", "--out", out]).status.code(), Some(2));
    assert_eq!(noda(&["generate", "--equation", "ks", "--tf", "-1", "--out", out]).status.code(), Some(2));
    // Data-format errors.
    let junk = dir.path().join("junk.noda");
    fs::write(&junk, b"not a trajectory").unwrap();
    assert_eq!(noda(&["eval", "--est", p(&junk), "--gt", p(&junk), "--th", "0", "--csv", "x.csv"]).status.code(), Some(3));
    assert_eq!(noda(&["bench", "--model", p(&junk), "--traj", p(&junk)]).status.code(), Some(3));
}

#[test]
fn numerical_failure_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("blow");
    // A KS step far too large for the resolution still runs; an absurd Reynolds
    // number with a coarse grid and long step drives NS to non-finite values.
    let status = noda(&["generate", "--equation", "ns", "--tf", "200", "--dt", "50", "--resolution", "8", "--re", "1e12", "--out", p(&out)]).status;
    assert_eq!(status.code(), Some(4));
}
