use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SHIPPED: &str = include_str!("../../../config/default.toml");

/// The shipped configuration on a coarse solver grid and a 40 x 40 window,
/// so that a full run takes seconds.
fn small_config() -> toml::Table {
    let mut cfg: toml::Table = SHIPPED.parse().unwrap();
    let set = |cfg: &mut toml::Table, section: &str, key: &str, v: toml::Value| {
        cfg[section].as_table_mut().unwrap().insert(key.into(), v);
    };
    set(&mut cfg, "solver", "dx", 20.0.into());
    set(&mut cfg, "solver", "dy", 20.0.into());
    set(&mut cfg, "solver", "tol", 1e-7.into());
    set(&mut cfg, "solver", "extrapolate", false.into());
    for (k, v) in [
        ("nx", 40.0),
        ("ny", 40.0),
        ("dx", 60.0),
        ("dy", 60.0),
        ("x0", -1170.0),
        ("y0", 830.0),
    ] {
        let v = if k.starts_with('n') {
            toml::Value::Integer(v as i64)
        } else {
            v.into()
        };
        set(&mut cfg, "grid", k, v);
    }
    let circle: toml::Table = "circle = { x = 0.0, y = 2000.0, radius = 1000.0, sides = 32 }"
        .parse()
        .unwrap();
    cfg.insert("beam".into(), circle.into());
    set(&mut cfg, "reconstruction", "iters", toml::Value::Integer(400));
    cfg
}

fn write_config(dir: &Path, cfg: &toml::Table) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, toml::to_string(cfg).unwrap()).unwrap();
    path
}

fn run(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stark-tomo"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(config: &Path, out: &Path, args: &[&str]) -> Value {
    let o = run(config, out, args);
    assert!(
        o.status.success(),
        "{args:?} exited {:?}: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).unwrap()
}

fn stderr_report(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&o.stderr)))
}

const PIPELINE: [&str; 7] = [
    "solve-basis",
    "synth-campaign",
    "fit-spectra",
    "reconstruct-stray",
    "fit-charges",
    "compensate",
    "mw-map",
];

/// Every file under `dir`, keyed by its relative path.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

#[test]
fn pipeline_output_does_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_config());
    // same output path for both runs, since input paths are recorded
    let out = tmp.path().join("out");
    let mut trees = Vec::new();
    for threads in ["1", "2"] {
        for cmd in PIPELINE {
            run_ok(&config, &out, &[cmd, "--threads", threads]);
        }
        trees.push(tree(&out));
        fs::remove_dir_all(&out).unwrap();
    }
    assert!(trees[0].len() > 20, "only {} files written", trees[0].len());
    assert_eq!(trees[0].keys().collect::<Vec<_>>(), trees[1].keys().collect::<Vec<_>>());
    for (path, bytes) in &trees[0] {
        assert!(
            bytes == &trees[1][path],
            "{} differs between thread counts",
            path.display()
        );
    }
}

#[test]
fn outputs_carry_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let out = tmp.path().join("out");
    run_ok(&config, &out, &["solve-basis"]);
    run_ok(&config, &out, &["synth-campaign"]);
    let manifest: Value = serde_json::from_slice(&fs::read(out.join("campaign/manifest.json")).unwrap()).unwrap();
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert!(manifest["constants"].is_object());
    let stray = fs::read_to_string(out.join("campaign/truth_stray.csv")).unwrap();
    assert!(
        stray.lines().take(20).any(|l| l.contains(&hash)),
        "grid header lacks the hash"
    );

    // a different seed is a different configuration
    let other = tmp.path().join("other");
    run_ok(&config, &other, &["solve-basis"]);
    run_ok(&config, &other, &["synth-campaign", "--seed", "7"]);
    let m2: Value = serde_json::from_slice(&fs::read(other.join("campaign/manifest.json")).unwrap()).unwrap();
    assert_ne!(m2["config_hash"], manifest["config_hash"]);
    assert_ne!(
        fs::read(other.join("campaign/a_stack.csv")).unwrap(),
        fs::read(out.join("campaign/a_stack.csv")).unwrap()
    );
}

#[test]
fn unknown_config_key_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["solver"].as_table_mut().unwrap().insert("omgea".into(), 1.5.into());
    let config = write_config(tmp.path(), &cfg);
    let o = run(&config, &tmp.path().join("out"), &["solve-basis"]);
    assert_eq!(o.status.code(), Some(2));
    let report = stderr_report(&o);
    assert_eq!(report["error"], "config");
    assert_eq!(report["command"], "solve-basis");
}

#[test]
fn missing_input_exits_with_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_config());
    let o = run(
        &config,
        &tmp.path().join("out"),
        &["mw-map", "--input", tmp.path().join("nope.csv").to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(stderr_report(&o)["error"], "io");
}

#[test]
fn stack_from_another_window_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let config = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("out");
    run_ok(&config, &out, &["solve-basis"]);
    run_ok(&config, &out, &["synth-campaign"]);

    let mut shifted = cfg.clone();
    shifted["grid"]
        .as_table_mut()
        .unwrap()
        .insert("x0".into(), (-1110.0).into());
    let dir = tmp.path().join("shifted");
    fs::create_dir(&dir).unwrap();
    let config2 = write_config(&dir, &shifted);
    let stack = out.join("campaign/a_stack.csv");
    let o = run(
        &config2,
        &dir.join("out"),
        &["fit-spectra", "--input", stack.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stderr_report(&o)["error"], "config");
}
