use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn clgait(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_clgait"));
    cmd.args(args).env_remove("CLGAIT_SEED");
    if let Some(s) = env_seed {
        cmd.env("CLGAIT_SEED", s);
    }
    cmd.output().unwrap()
}

fn run_json(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("run.json")).unwrap()).unwrap()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.json" {
                out.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn exit_codes_distinguish_usage_and_runtime_errors() {
    assert_eq!(clgait(&["--help"], None).status.code(), Some(0));
    assert_eq!(clgait(&["--version"], None).status.code(), Some(0));
    assert_eq!(clgait(&[], None).status.code(), Some(1));
    assert_eq!(clgait(&["synth"], None).status.code(), Some(1));
    assert_eq!(clgait(&["synth", "--out", "x", "--ids", "many"], None).status.code(), Some(1));
    assert_eq!(clgait(&["project", "--ply", "a", "--out", "b", "--fx", "3"], None).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = clgait(&["eval", "--data", missing.to_str().unwrap(), "--weights", "w", "--out", "o"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));
}

#[test]
fn flags_override_file_which_overrides_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("plan.json");
    fs::write(&cfg, r#"{"seed": 5, "ids": 3, "frames": 9}"#).unwrap();
    let out = dir.path().join("a");
    let o = clgait(&["synth", "--out", out.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--ids", "2", "--seqs-per-id", "1"], Some("9"));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run = run_json(&out);
    assert_eq!(run["verb"], "synth");
    assert_eq!(run["config"]["ids"], 2);
    assert_eq!(run["config"]["frames"], 9);
    assert_eq!(run["seed"], 5);
    assert_eq!(run["sources"]["ids"], "flag");
    assert_eq!(run["sources"]["seed"], "file");
    assert_eq!(run["sources"]["frames"], "file");
    assert!(run["version"].is_string());
    assert!(run["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert_eq!(run["argv"][1], "synth");

    let env_only = dir.path().join("b");
    let o = clgait(&["synth", "--out", env_only.to_str().unwrap(), "--ids", "2", "--seqs-per-id", "1", "--frames", "8"], Some("9"));
    assert_eq!(o.status.code(), Some(0));
    let run = run_json(&env_only);
    assert_eq!(run["seed"], 9);
    assert_eq!(run["sources"]["seed"], "env");
    assert_eq!(run["config"]["views"], serde_json::json!([0, 90]));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("plan.json");
    fs::write(&cfg, r#"{"idz": 3}"#).unwrap();
    let o = clgait(&["synth", "--out", dir.path().join("o").to_str().unwrap(), "--config", cfg.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("idz"));
}

#[test]
fn bad_environment_seed_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = clgait(&["synth", "--out", dir.path().to_str().unwrap()], Some("abc"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn jobs_do_not_change_synthesis_output() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one");
    let four = dir.path().join("four");
    for (out, jobs) in [(&one, "1"), (&four, "4")] {
        let o = clgait(&["synth", "--out", out.to_str().unwrap(), "--ids", "3", "--seqs-per-id", "2", "--frames", "8", "--jobs", jobs], None);
        assert_eq!(o.status.code(), Some(0));
    }
    assert_eq!(tree(&one), tree(&four));
}

#[test]
fn project_and_backproject_round_trip_a_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let ply = dir.path().join("in.ply");
    fs::write(&ply, "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 2\n0.5 0.25 4\n").unwrap();
    let pgm = dir.path().join("d.pgm");
    let k = ["--fx", "250", "--fy", "250", "--cx", "160", "--cy", "120"];
    let mut args = vec!["project", "--ply", ply.to_str().unwrap(), "--out", pgm.to_str().unwrap(), "--radius", "1"];
    args.extend(k);
    assert_eq!(clgait(&args, None).status.code(), Some(0));
    let back = dir.path().join("b.ply");
    let mut args = vec!["backproject", "--depth", pgm.to_str().unwrap(), "--out", back.to_str().unwrap()];
    args.extend(k);
    assert_eq!(clgait(&args, None).status.code(), Some(0));
    let cloud = clgait::formats::read_ply(&back).unwrap();
    // each point fills its own pixel plus a 3x3 neighborhood at the same depth
    assert_eq!(cloud.len(), 18);
    assert!(cloud.points.iter().any(|p| p == &[0.0, 0.0, 2.0]));
    // (0.5, 0.25, 4) lands on pixel (191, 136)
    assert!(cloud.points.iter().any(|p| p[2] == 4.0 && (p[0] - 0.496).abs() < 1e-6 && (p[1] - 0.256).abs() < 1e-6));
}

#[test]
fn gradcheck_passes_and_records_its_result() {
    let dir = tempfile::tempdir().unwrap();
    let o = clgait(&["gradcheck", "--seed", "3", "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
    assert!(run_json(dir.path())["config"]["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn small_pipeline_runs_through_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let ok = |args: &[&str]| {
        let o = clgait(args, None);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    let (ds, pt, ft, ft2, ev) = (p("ds"), p("pt"), p("ft"), p("ft2"), p("ev"));
    let (pt_weights, pt_ckpt, ft_weights) = (p("pt/weights.clgw"), p("pt/checkpoints/pretrain-000002.clgw"), p("ft/weights.clgw"));
    ok(&["synth", "--out", &ds, "--ids", "3", "--seqs-per-id", "8", "--frames", "8", "--split-mode", "sequence"]);
    let small = ["--channels", "4,8,8", "--parts", "2", "--embed-dim", "8", "--iterations", "4", "--checkpoint-every", "2"];
    let mut args = vec!["pretrain", "--data", &ds, "--out", &pt, "--pairs", "4"];
    args.extend(small);
    ok(&args);
    assert!(dir.path().join("pt/checkpoints/pretrain-000002.clgw").exists());
    let summary: Value = serde_json::from_slice(&fs::read(dir.path().join("pt/pretrain.json")).unwrap()).unwrap();
    assert!(summary["alignment_after"].is_number());
    let mut args = vec!["finetune", "--data", &ds, "--out", &ft, "--init", &pt_weights, "--batch-p", "2", "--frames-per-sample", "2"];
    args.extend(small);
    ok(&args);
    let loss = fs::read_to_string(dir.path().join("ft/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 5);
    let o = ok(&["eval", "--data", &ds, "--weights", &ft_weights, "--out", &ev, "--exclude-same-view"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("direction,k,accuracy"));
    for f in ["report.json", "summary.csv", "cmc.dat", "run.json"] {
        assert!(dir.path().join("ev").join(f).exists(), "{f}");
    }
    // a wrong-stage resume fails at runtime
    let mut args = vec!["finetune", "--data", &ds, "--out", &ft2, "--resume", &pt_ckpt];
    args.extend(small);
    assert_eq!(clgait(&args, None).status.code(), Some(2));
}
