use std::fs;
use std::path::Path;
use std::process::Command as Process;

use clap::Parser;
use stenograph::cli::{run, Cli, StageManifest};
use stenograph::report::EvalReport;

const STAGES: [&str; 6] = ["synth", "split", "train", "eval", "stratify", "explain"];

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.json");
    let cfg = serde_json::json!({
        "seed": 5,
        "out": "out",
        "synth": { "n_patients": 40, "fs": 100.0, "duration_s": 3.0 },
        "folds": 3,
        "net": { "stem_channels": 4, "stem_stride": 4, "n_blocks": 2, "kernel_size": 5 },
        "train": { "epochs": 2 },
        "eval": { "n_boot": 50, "bins": 5 }
    });
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn stage(name: &str, config: &Path, extra: &[&str]) -> StageManifest {
    let mut args = vec!["stenograph", name, "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&Cli::parse_from(args)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn pipeline(config: &Path, extra: &[&str]) -> Vec<StageManifest> {
    STAGES.iter().map(|s| stage(s, config, extra)).collect()
}

fn svg_files(dir: &Path) -> Vec<std::path::PathBuf> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "svg"))
        .collect()
}

#[test]
fn full_pipeline_is_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let first = pipeline(&config, &[]);
    let run_dir = dir
        .path()
        .join("out")
        .join(format!("run-{}", first[0].run_stamp));

    let report: EvalReport =
        serde_json::from_slice(&fs::read(run_dir.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report.overall().vessels.len(), 4);
    assert!(report.group("normal_ecg").is_some());
    assert_eq!(
        first[2]
            .outputs
            .keys()
            .filter(|k| k.ends_with(".ckpt"))
            .count(),
        3
    );

    for s in ["eval", "stratify", "explain"] {
        let svgs = svg_files(&run_dir.join(s));
        assert!(!svgs.is_empty(), "{s} wrote no plots");
        for p in svgs {
            let text = fs::read_to_string(&p).unwrap();
            roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        }
    }
    for m in &first {
        let on_disk: StageManifest = serde_json::from_slice(
            &fs::read(run_dir.join(&m.stage).join("manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(&on_disk, m);
    }

    // A fresh output root and one worker thread must reproduce every file.
    let other = tempfile::tempdir().unwrap();
    let out = other.path().to_str().unwrap();
    let second = pipeline(&config, &["--out", out, "--threads", "1"]);
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.outputs, b.outputs, "stage {}", a.stage);
    }

    // Scoring with a single checkpoint writes beside the fold-based outputs.
    let ckpt = run_dir.join("train/fold0.ckpt");
    let m = stage("eval", &config, &["--checkpoint", ckpt.to_str().unwrap()]);
    assert!(m.outputs.contains_key("report.json"));
    assert!(fs::read_dir(&run_dir).unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .starts_with("eval-ckpt-")));
}

fn exit_code(args: &[&str]) -> (i32, String) {
    let out = Process::new(env!("CARGO_BIN_EXE_stenograph"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn binary_reports_errors_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let (code, stderr) = exit_code(&["split", "--config", missing.to_str().unwrap()]);
    assert_eq!(code, 2);
    let diag: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(diag["error"], "config");

    // valid config, but no dataset has been generated yet
    let config = write_config(dir.path());
    assert_eq!(
        exit_code(&["train", "--config", config.to_str().unwrap()]).0,
        2
    );

    let broken = dir.path().join("broken");
    fs::create_dir(&broken).unwrap();
    fs::write(broken.join("cohort.json"), b"{ not json").unwrap();
    let cfg = dir.path().join("broken.json");
    fs::write(&cfg, br#"{"seed": 1, "dataset": "broken", "out": "o"}"#).unwrap();
    assert_eq!(
        exit_code(&["split", "--config", cfg.to_str().unwrap()]).0,
        3
    );
}
