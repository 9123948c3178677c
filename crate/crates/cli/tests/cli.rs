//! Drives the `anl` binary end to end on a tiny 8×8 corpus.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn anl(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anl"))
        .args(args)
        .current_dir(cwd)
        .env("ANL_CACHE_DIR", cwd.join("cache"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let o = anl(cwd, args);
    assert!(
        o.status.success(),
        "{args:?} failed ({:?}):\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn record(dir: &Path, command: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(format!("{command}.run.json"))).unwrap()).unwrap()
}

const TINY_NET: &[&str] = &[
    "--size",
    "8",
    "--steps",
    "10",
    "--epochs",
    "1",
    "--batch-size",
    "16",
    "--base-width",
    "4",
    "--groups",
    "2",
    "--time-embed-dim",
    "8",
];
const TINY_DET: &[&str] = &["--size", "8", "--epochs", "2", "--lr", "1e-3", "--batch-size", "16"];

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = anl(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let help = String::from_utf8_lossy(&o.stdout);
    for sub in [
        "gen-corpus",
        "train-diffusion",
        "sample-fakes",
        "probe",
        "train-detector",
        "infer",
        "eval",
        "sweep-timestep",
        "analyze-psd",
        "analyze-lem",
        "report",
    ] {
        assert!(help.contains(sub), "{sub} missing from help");
    }
    let probe_help = String::from_utf8_lossy(&anl(dir.path(), &["probe", "--help"]).stdout).into_owned();
    assert!(probe_help.contains("[default: 1]"), "{probe_help}");

    let o = anl(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(anl(dir.path(), &["gen-corpus", "--n", "many"]).status.code(), Some(1));
    assert_eq!(anl(dir.path(), &["gen-corpus"]).status.code(), Some(1), "missing --out");
    assert_eq!(
        anl(dir.path(), &["probe", "--out", "p"]).status.code(),
        Some(1),
        "missing --manifest"
    );
    assert_eq!(
        anl(
            dir.path(),
            &["probe", "--out", "p", "--manifest", "nope.jsonl", "--checkpoint", "x"]
        )
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn config_file_precedence_and_record_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.toml"), "seed = 3\n[gen-corpus]\nn = 5\nsize = 8\n").unwrap();
    ok(d, &["--config", "c.toml", "gen-corpus", "--out", "a", "--n", "7"]);
    let rec = record(&d.join("a"), "gen-corpus");
    assert_eq!(rec["config"]["n"], 7);
    assert_eq!(rec["config"]["seed"], 3);
    assert_eq!(rec["config"]["size"], 8);
    assert_eq!(rec["config"]["channels"], 1, "defaults are materialized");
    assert_eq!(rec["status"], "complete");

    // A second identical run is skipped; the record is untouched.
    let before = fs::read(d.join("a/gen-corpus.run.json")).unwrap();
    let out = ok(d, &["--config", "c.toml", "gen-corpus", "--out", "a", "--n", "7"]);
    assert!(out.contains("up to date"), "{out}");
    assert_eq!(fs::read(d.join("a/gen-corpus.run.json")).unwrap(), before);

    // Tampering with an artifact forces a rebuild.
    fs::write(d.join("a/real_00000.png"), b"junk").unwrap();
    let out = ok(d, &["--config", "c.toml", "gen-corpus", "--out", "a", "--n", "7"]);
    assert!(!out.contains("up to date"));

    // The record alone reproduces the run bit for bit.
    ok(d, &["--config", "a/gen-corpus.run.json", "gen-corpus", "--out", "b"]);
    for name in ["manifest.jsonl", "real_00000.png", "real_00006.png"] {
        assert_eq!(
            fs::read(d.join("a").join(name)).unwrap(),
            fs::read(d.join("b").join(name)).unwrap()
        );
    }

    fs::write(d.join("bad.toml"), "[gen-corpus]\nnn = 5\n").unwrap();
    assert_eq!(
        anl(d, &["--config", "bad.toml", "gen-corpus", "--out", "c"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn failed_runs_are_marked_and_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-corpus", "--out", "corpus", "--n", "20", "--size", "8"]);
    let mut args = vec![
        "train-diffusion",
        "--manifest",
        "corpus/manifest.jsonl",
        "--out",
        "net",
        "--lr",
        "1e300",
    ];
    args.extend_from_slice(TINY_NET);
    let o = anl(d, &args);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = record(&d.join("net"), "train-diffusion");
    assert_eq!(rec["status"], "failed");
    assert!(rec["error"].as_str().unwrap().contains("non-finite"));
}

/// gen-corpus → train-diffusion → sample-fakes → probe → train-detector →
/// infer → eval (ablation) → sweep-timestep → analyze-psd/lem → report.
#[test]
fn full_recipe_on_a_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-corpus",
            "--out",
            "corpus",
            "--n",
            "80",
            "--size",
            "8",
            "--seed",
            "1",
        ],
    );
    let mut train = vec!["train-diffusion", "--manifest", "corpus/manifest.jsonl", "--out", "net"];
    train.extend_from_slice(TINY_NET);
    ok(d, &train);
    ok(
        d,
        &[
            "sample-fakes",
            "--checkpoint",
            "net/epsilon.ckpt",
            "--out",
            "fakes",
            "--n",
            "40",
            "--batch",
            "16",
        ],
    );
    let manifests = [
        "--manifest",
        "corpus/manifest.jsonl",
        "--manifest",
        "fakes/manifest.jsonl",
    ];
    let ckpt = ["--checkpoint", "net/epsilon.ckpt"];

    let missing = anl(
        d,
        &[&["train-detector", "--out", "det2"][..], &manifests, &ckpt, TINY_DET].concat(),
    );
    assert_eq!(missing.status.code(), Some(2), "noise cache not yet filled");
    assert!(String::from_utf8_lossy(&missing.stderr).contains("noise cache"));

    ok(d, &[&["probe", "--out", "probe"][..], &manifests, &ckpt].concat());
    let det = ok(
        d,
        &[&["train-detector", "--out", "det"][..], &manifests, &ckpt, TINY_DET].concat(),
    );
    assert!(det.contains("test ACC"), "{det}");
    let infer = ok(
        d,
        &[
            "infer",
            "--detector",
            "det/detector.ckpt",
            "--checkpoint",
            "net/epsilon.ckpt",
            "--image",
            "corpus/real_00000.png",
            "--image",
            "fakes/fake_00000.png",
            "--out",
            "infer",
            "--save-attention",
            "true",
        ],
    );
    assert_eq!(infer.lines().count(), 2);
    assert!(d.join("infer/attention_0001.png").exists());

    ok(
        d,
        &[
            &["eval", "--out", "eval", "--ablation", "true"][..],
            &manifests,
            &ckpt,
            TINY_DET,
        ]
        .concat(),
    );
    let ablation: Value = serde_json::from_str(&fs::read_to_string(d.join("eval/ablation.json")).unwrap()).unwrap();
    assert_eq!(ablation[0]["variant"], "anl-without-attention");
    assert_eq!(ablation[1]["variant"], "anl");
    assert!(fs::read_to_string(d.join("eval/report.md"))
        .unwrap()
        .contains("| anl |"));
    for f in [
        "matrix.json",
        "acc.csv",
        "ap.csv",
        "acc_heatmap.png",
        "detectors/all.ckpt",
    ] {
        assert!(d.join("eval/anl").join(f).exists(), "{f}");
    }

    ok(
        d,
        &[
            &["sweep-timestep", "--out", "sweep", "--t-values", "1,3"][..],
            &manifests,
            &ckpt,
            TINY_DET,
        ]
        .concat(),
    );
    let sweep = fs::read_to_string(d.join("sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3, "{sweep}");
    assert!(record(&d.join("sweep"), "sweep-timestep")["summary"]["best_t"].is_u64());

    ok(d, &[&["analyze-psd", "--out", "psd"][..], &manifests, &ckpt].concat());
    let psd: Value = serde_json::from_str(&fs::read_to_string(d.join("psd/psd_summary.json")).unwrap()).unwrap();
    assert_eq!(psd["n_real"], 80);
    assert_eq!(psd["n_fake"], 40);
    ok(
        d,
        &[
            &[
                "analyze-lem",
                "--out",
                "lem",
                "--window",
                "4",
                "--stride",
                "2",
                "--examples",
                "1",
            ][..],
            &manifests,
            &ckpt,
        ]
        .concat(),
    );
    assert!(d.join("lem/lem_fake_00.png").exists());

    let report = ok(
        d,
        &[
            "report", "--out", "report", "--input", "eval", "--input", "sweep", "--input", "psd", "--input", "lem",
        ],
    );
    for needle in [
        "## Ablation",
        "## Timestep sweep",
        "## Noise power spectrum",
        "## Local entropy",
    ] {
        assert!(report.contains(needle), "{needle} missing:\n{report}");
    }

    // Every stage left a complete record with a git description and artifacts.
    for (out, cmd) in [
        ("corpus", "gen-corpus"),
        ("net", "train-diffusion"),
        ("eval", "eval"),
        ("report", "report"),
    ] {
        let rec = record(&d.join(out), cmd);
        assert_eq!(rec["status"], "complete");
        assert!(!rec["git_describe"].as_str().unwrap().is_empty());
        assert!(!rec["artifacts"].as_array().unwrap().is_empty());
        assert!(rec["wall_time_s"].as_f64().unwrap() >= 0.0);
    }
}
