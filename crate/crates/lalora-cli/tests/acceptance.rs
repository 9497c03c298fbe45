//! Acceptance gate for the CLI: rerunning a command with an identical
//! config must reproduce every CSV and checkpoint byte for byte (the
//! checkpoint trailer is a CRC over the payload, so byte equality implies
//! CRC equality). Criteria 1 through 9 live in the core crate's
//! acceptance test; this file prints the matching `criterion 10` line.
//!
//! The config is the committed trend fixture narrowed to its smallest
//! cell: one lambda, one seed.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_lalora"))
        .args(args)
        .output()
        .expect("binary launches");
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

// Every file under `dir`, keyed by path relative to it.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("directory listing") {
            let path = entry.expect("directory entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .expect("path is under the snapshot root")
                    .to_string_lossy()
                    .into_owned();
                files.insert(rel, std::fs::read(&path).expect("file reads"));
            }
        }
    }
    files
}

#[test]
fn criterion_10_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let text = include_str!("../../lalora-core/tests/fixtures/trend_config.json");
    let mut cfg: serde_json::Value = serde_json::from_str(text).expect("fixture parses");
    cfg["train"]["lambda_grid"] = serde_json::json!([1000.0]);
    cfg["train"]["seeds"] = serde_json::json!([101]);
    let config_path = tmp.path().join("cell.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let config = config_path.to_str().unwrap();

    for run_dir in ["a", "b"] {
        let d = tmp.path().join(run_dir);
        std::fs::create_dir(&d).unwrap();
        let base = d.join("base.ckpt");
        let fit = d.join("fit.ckpt");
        run(&["pretrain", "--config", config, "--out", base.to_str().unwrap()]);
        run(&[
            "fit-laplace",
            "--config",
            config,
            "--base",
            base.to_str().unwrap(),
            "--kind",
            "diag",
            "--out",
            fit.to_str().unwrap(),
        ]);
        run(&[
            "sweep",
            "--config",
            config,
            "--base",
            base.to_str().unwrap(),
            "--out-dir",
            d.join("sweep").to_str().unwrap(),
        ]);
    }

    let first = snapshot(&tmp.path().join("a"));
    let second = snapshot(&tmp.path().join("b"));
    let mut checked = 0usize;
    let fail = |msg: String| {
        println!("criterion 10: FAIL - identical configs reproduce identical bytes: {msg}");
        panic!("criterion 10 failed: {msg}");
    };
    if first.keys().collect::<Vec<_>>() != second.keys().collect::<Vec<_>>() {
        fail(format!(
            "file sets differ: {:?} vs {:?}",
            first.keys().collect::<Vec<_>>(),
            second.keys().collect::<Vec<_>>()
        ));
    }
    for (name, bytes) in &first {
        if second[name] != *bytes {
            fail(format!("{name} differs between reruns"));
        }
        checked += 1;
    }
    for expected in ["base.ckpt", "fit.ckpt", "sweep/records.csv", "sweep/records.json"] {
        if !first.contains_key(expected) {
            fail(format!("expected output {expected} is missing"));
        }
    }
    if !first.keys().any(|k| k.starts_with("sweep/run_")) {
        fail("no per-run history CSV was written".into());
    }
    println!(
        "criterion 10: PASS - identical configs reproduce identical bytes \
         ({checked} files compared across two full pipeline runs)"
    );
}
