// SPDX-License-Identifier: MIT OR Apache-2.0
//! End-to-end runs of the `residforge` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_TOY: &str = r#"
instances = 120
pairs = 8
per_cell = 6
min_samples = 4
[train]
n_train = 1000
n_heldout = 50
[train.model]
n_layers = 2
d_model = 32
n_heads = 2
d_ff = 64
[train.hyper]
steps = 20
"#;

fn residforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_residforge"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("error line");
    serde_json::from_str(line).expect("error output is JSON")
}

#[test]
fn synth_verify_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = residforge(dir.path(), &["synth-verify", "--out", "sv"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().count() >= 10);
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")), "{stdout}");
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("sv/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth-verify");
    assert!(manifest["outputs"]["synth_verify.csv"].is_string());
}

#[test]
fn patch_sweep_with_zero_pairs_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("zero.toml"), "pairs = 0\n").unwrap();
    let out = residforge(dir.path(), &["patch-sweep", "--config", "zero.toml"]);
    assert!(!out.status.success());
    let err = error_json(&out);
    assert_eq!(err["error"]["command"], "patch-sweep");
    assert_eq!(err["error"]["kind"], "invalid_argument");
}

#[test]
fn bad_configs_fail_with_error_json() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("typo.toml"), "[train.hyper]\nstesp = 3\n").unwrap();
    let out = residforge(dir.path(), &["gen", "--config", "typo.toml"]);
    assert!(!out.status.success());
    assert_eq!(error_json(&out)["error"]["kind"], "config");
    let out = residforge(dir.path(), &["baseline"]);
    assert_eq!(error_json(&out)["error"]["kind"], "config");
    let out = residforge(dir.path(), &["ablate", "--backend", "synth"]);
    assert_eq!(error_json(&out)["error"]["kind"], "config");
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["align", "edit", "learn-dict"] {
        for out in ["a", "b"] {
            let o = residforge(
                dir.path(),
                &[
                    cmd,
                    "--backend",
                    "synth",
                    "--seed",
                    "3",
                    "--out",
                    &format!("{cmd}-{out}"),
                ],
            );
            assert!(
                o.status.success(),
                "{cmd}: {}",
                String::from_utf8_lossy(&o.stderr)
            );
        }
        let a = files(&dir.path().join(format!("{cmd}-a")));
        let b = files(&dir.path().join(format!("{cmd}-b")));
        assert!(a.iter().any(|(n, _)| n.ends_with(".csv")));
        assert_eq!(a, b, "{cmd}");
    }
    let table = fs::read_to_string(dir.path().join("align-a/alignment.csv")).unwrap();
    assert!(table.starts_with(
        "layer,setting,unaligned_mean,unaligned_std,procrustes_mean,procrustes_std,relfro_mean,relfro_std,n_pairs\n"
    ));
}

#[test]
fn toy_pipeline_runs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL_TOY).unwrap();
    for out in ["t1", "t2"] {
        let o = residforge(
            dir.path(),
            &["train-toy", "--config", "small.toml", "--out", out],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(files(&dir.path().join("t1")), files(&dir.path().join("t2")));
    let ckpt = ["--config", "small.toml", "--checkpoint", "t1/toy.rsaf"];
    for cmd in ["gen", "baseline", "collect", "align"] {
        for out in ["a", "b"] {
            let mut args = vec![cmd, "--out"];
            let name = format!("{cmd}-{out}");
            args.push(&name);
            args.extend(ckpt);
            let o = residforge(dir.path(), &args);
            assert!(
                o.status.success(),
                "{cmd}: {}",
                String::from_utf8_lossy(&o.stderr)
            );
        }
        assert_eq!(
            files(&dir.path().join(format!("{cmd}-a"))),
            files(&dir.path().join(format!("{cmd}-b"))),
            "{cmd}"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("align-a/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(
        manifest["inputs"]["t1/toy.rsaf"].as_str().unwrap().len(),
        64
    );
    let layers = fs::read_to_string(dir.path().join("align-a/alignment.csv")).unwrap();
    assert_eq!(layers.lines().count(), 3);
    let o = residforge(
        dir.path(),
        &["align", "--layers", "2..5", "--out", "x"]
            .iter()
            .chain(&ckpt)
            .copied()
            .collect::<Vec<_>>(),
    );
    assert_eq!(error_json(&o)["error"]["kind"], "out_of_range");
}
