use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "env": {"grid_size": 5, "n_agents": 3, "n_scouts": 1, "n_prey": 1,
          "scout_radius": 2, "episode_limit": 10},
  "model": {"encoder_hidden": 8, "d_h": 8, "d_k": 4, "agent_hidden": 8, "mixer_embed": 4},
  "group": {"m": 2, "k": 2},
  "train": {"batch_episodes": 2, "buffer_capacity": 20, "total_steps": 120,
            "eval_interval": 40, "eval_episodes": 2, "checkpoint_interval": 60},
  "run_id": "tiny"
}"#;

fn gacg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gacg"))
        .args(args)
        .env("GACG_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(text.trim_end().lines().count(), 1, "stderr: {text}");
    text.trim_end().to_string()
}

fn write_tiny(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_config_key_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let out = gacg(&["train", "--config", &cfg, "--set", "train.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    let line = stderr_line(&out);
    assert!(line.starts_with("error kind=config key=train.bogus"), "{line}");
}

#[test]
fn train_eval_and_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let run_dir = dir.path().join("run");
    let run = run_dir.to_string_lossy().into_owned();
    let out = gacg(&["train", "--config", &cfg, "--out", &run]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["env_steps"].as_u64().unwrap() >= 120);

    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,episode,mean_return,capture_rate,epsilon,"));
    assert_eq!(metrics.lines().count(), 4);
    let effective: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(effective["train"]["lambda"], 0.1);

    let ckpt = fs::read_dir(run_dir.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .max()
        .unwrap();
    let ckpt = ckpt.to_string_lossy().into_owned();
    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--checkpoint", &ckpt, "--episodes", "5", "--seed", "3"];
        args.extend_from_slice(extra);
        let out = gacg(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let greedy = eval(&[]);
    assert_eq!(greedy, eval(&[]));
    let random: serde_json::Value = serde_json::from_str(&eval(&["--random-policy"])).unwrap();
    assert_eq!(random["episodes"], 5);

    let out = gacg(&["eval", "--checkpoint", &ckpt, "--episodes", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error kind=parameter"));

    let svg = dir.path().join("curve.svg");
    let out = gacg(&[
        "plot",
        "--out",
        svg.to_str().unwrap(),
        run_dir.join("metrics.csv").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<polyline").count(), 1);
    assert!(text.contains(">step<") && text.contains(">capture_rate<"));
}

#[test]
fn empty_csv_plot_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("empty.csv");
    fs::write(&csv, "").unwrap();
    let svg = dir.path().join("out.svg");
    let out = gacg(&["plot", "--out", svg.to_str().unwrap(), csv.to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
    stderr_line(&out);
    assert!(!svg.exists());
}

#[test]
fn exploding_learning_rate_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let run = dir.path().join("run");
    let out = gacg(&[
        "train",
        "--config",
        &cfg,
        "--out",
        run.to_str().unwrap(),
        "--set",
        "train.lr=1e300",
        "--set",
        "train.grad_clip=1e300",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stderr_line(&out).starts_with("error kind=numerical"));
}

#[test]
fn unknown_ablation_axis_exits_2() {
    let out = gacg(&["ablate", "--axis", "width", "--seeds", "0..1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).contains("key=axis"));
}

#[test]
fn ablation_suite_writes_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let out_dir = dir.path().join("abl");
    let out = gacg(&[
        "ablate",
        "--axis",
        "window_length",
        "--seeds",
        "0,1",
        "--config",
        &cfg,
        "--set",
        "train.total_steps=40",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(out_dir.join("window_length/comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4 * 2);
    assert!(table.starts_with("axis,variant,seed,effective_m,env_steps,final_capture_rate"));
    assert!(out_dir.join("window_length/k20/seed_1/metrics.csv").is_file());
}
