use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dc3(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dc3"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("dc3 runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = dc3(args, cwd);
    assert!(
        out.status.success(),
        "dc3 {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn synth(cwd: &Path) {
    ok(&["synth", "--out", "ds", "--classes", "2", "--per-class", "9", "--width", "10", "--height", "8"], cwd);
}

#[test]
fn stage_chain_matches_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    synth(cwd);
    let flags = ["--ipc", "4", "--bins", "3", "--seed", "11", "--stitch", "pixels:0.5", "--variants", "4"];
    let mut run = vec!["run", "--dataset", "ds", "--out", "whole"];
    run.extend(flags);
    ok(&run, cwd);

    let mut quantize = vec!["quantize", "--dataset", "ds", "--out", "chain"];
    quantize.extend(flags);
    ok(&quantize, cwd);
    for stage in ["sample", "compensate", "stitch", "metrics"] {
        ok(&[stage, "--dataset", "ds", "--out", "chain"], cwd);
    }
    let whole = tree(&cwd.join("whole"));
    let chain = tree(&cwd.join("chain"));
    assert_eq!(whole.keys().collect::<Vec<_>>(), chain.keys().collect::<Vec<_>>());
    for (path, bytes) in &whole {
        assert!(chain[path] == *bytes, "{} differs", path.display());
    }
    assert_eq!(whole.keys().filter(|p| p.starts_with("images")).count(), 8);
}

#[test]
fn sample_without_quantize_reports_stage() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let out = dc3(&["sample", "--dataset", "ds", "--out", "nothing"], tmp.path());
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error[sample]"), "{stderr}");
    assert!(stderr.contains("missing its input"), "{stderr}");
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    synth(cwd);
    fs::write(cwd.join("cfg.json"), r#"{"ipc": 2, "bins": 2, "seed": 5, "mode": "greedy"}"#).unwrap();
    ok(&["run", "--dataset", "ds", "--out", "o", "--config", "cfg.json", "--ipc", "3"], cwd);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(cwd.join("o/manifest.json")).unwrap()).unwrap();
    let cfg = &manifest["config"];
    assert_eq!(cfg["ipc"], 3);
    assert_eq!(cfg["bins"], 2);
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["mode"], "greedy");
    assert_eq!(cfg["guidance_scale"], 4.0);
    assert_eq!(manifest["images"].as_array().unwrap().len(), 6);
}

#[test]
fn invalid_config_fails_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    synth(cwd);
    let out = dc3(&["run", "--dataset", "ds", "--out", "o", "--ipc", "2", "--variants", "3"], cwd);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config]"));
    assert!(!cwd.join("o").exists());

    let out = dc3(&["run", "--dataset", "ds", "--out", "o"], cwd);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ipc is required"));
}

#[test]
fn unreachable_backend_leaves_no_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    synth(cwd);
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let out = dc3(
        &["run", "--dataset", "ds", "--out", "o", "--ipc", "2", "--backend", "http", "--endpoint", &url],
        cwd,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[compensate]"));
    assert!(!cwd.join("o").exists());
    let names: Vec<_> = fs::read_dir(cwd).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 1, "{names:?}");
}

#[test]
fn refuses_nonempty_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    synth(cwd);
    fs::create_dir(cwd.join("o")).unwrap();
    fs::write(cwd.join("o/keep.txt"), "x").unwrap();
    let out = dc3(&["run", "--dataset", "ds", "--out", "o", "--ipc", "2"], cwd);
    assert!(!out.status.success());
    assert_eq!(fs::read_to_string(cwd.join("o/keep.txt")).unwrap(), "x");
}

#[test]
fn metrics_subcommand_prints_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    synth(cwd);
    ok(&["run", "--dataset", "ds", "--out", "o", "--ipc", "3"], cwd);
    let out = ok(&["metrics", "--dataset", "ds", "--out", "o"], cwd);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("density L1"), "{stdout}");
    let csv = fs::read_to_string(cwd.join("o/kde.csv")).unwrap();
    assert_eq!(csv.lines().count(), 257);
    assert!(csv.starts_with("grid,original_r,original_g,original_b,selected_r"));
}
