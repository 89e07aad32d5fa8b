use std::path::Path;
use std::process::{Command, Output};

use flearn::checkpoint::load_checkpoint;
use flearn::cli::RunManifest;
use flearn::eval::EditReport;
use flearn::experiments::{from_csv, CompareTable, SweepResult};

fn flearn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flearn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = flearn(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A tiny corpus and model so that every stage runs in well under a second.
fn tiny_lab(dir: &Path) {
    ok(dir, &["gen-data", "--pairs", "12", "--background", "12", "--control", "6", "--out", "corpus"]);
    ok(
        dir,
        &[
            "pretrain", "--corpus", "corpus", "--out", "base.flrn", "--d-model", "16", "--d-ff", "32",
            "--heads", "2", "--epochs", "4", "--seed", "5",
        ],
    );
    ok(dir, &["train-original", "--corpus", "corpus", "--model", "base.flrn", "--out", "orig.flrn", "--epochs", "1"]);
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        ok(d, &["gen-data", "--pairs", "30", "--seed", "7", "--out", out]);
    }
    for f in ["old.jsonl", "new.jsonl", "eval.jsonl", "background.jsonl", "control.jsonl"] {
        assert_eq!(read(d, &format!("a/{f}")), read(d, &format!("b/{f}")), "{f}");
    }
    let manifest: RunManifest = serde_json::from_slice(&read(d, "a/manifest.json")).unwrap();
    assert_eq!(manifest.command, "gen-data");
    assert_eq!(manifest.seeds["corpus"], 7);
    assert_eq!(manifest.outputs.len(), 5);
}

#[test]
fn stage_pipeline_round_trips_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_lab(d);

    // forgetting at rate zero reproduces the input checkpoint byte for byte
    ok(
        d,
        &[
            "forget", "--corpus", "corpus", "--model", "orig.flrn", "--method", "full_ft", "--lambda", "0",
            "--epochs", "1", "--out", "same.flrn",
        ],
    );
    assert_eq!(read(d, "orig.flrn"), read(d, "same.flrn"));

    let edit = |out: &str| {
        ok(
            d,
            &[
                "edit", "--corpus", "corpus", "--model", "orig.flrn", "--strategy", "f_ft", "--lambda", "0.3",
                "--epochs", "2", "--out", out,
            ],
        )
    };
    edit("e1.flrn");
    edit("e2.flrn");
    assert_eq!(read(d, "e1.flrn"), read(d, "e2.flrn"));

    ok(d, &["eval", "--corpus", "corpus", "--pre", "orig.flrn", "--post", "e1.flrn", "--out", "report.csv"]);
    let text = String::from_utf8(read(d, "report.csv")).unwrap();
    let reports: Vec<EditReport> = from_csv(&text).unwrap();
    let r = reports[0];
    for v in [r.reliability, r.generality, r.locality, r.control_accuracy_pre, r.control_accuracy_post] {
        assert!((0.0..=100.0).contains(&v));
    }
    assert_eq!(r.n_records, 12);

    ok(d, &["replay", "--manifest", "e1.flrn.manifest.json"]);
}

#[test]
fn stage_commands_compose_like_the_full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_lab(d);
    fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
        [extra, &["--corpus", "corpus", "--epochs", "2", "--seed", "4"]].concat()
    }
    ok(d, &with(&["forget", "--model", "orig.flrn", "--lambda", "0.5", "--out", "mid.flrn"]));
    ok(d, &with(&["learn", "--model", "mid.flrn", "--out", "staged.flrn"]));
    ok(
        d,
        &with(&["edit", "--model", "orig.flrn", "--strategy", "f_ft", "--lambda", "0.5", "--out", "whole.flrn"]),
    );
    assert_eq!(read(d, "staged.flrn"), read(d, "whole.flrn"));
}

#[test]
fn sweep_and_compare_emit_their_schemas() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_lab(d);
    ok(
        d,
        &[
            "sweep", "--corpus", "corpus", "--model", "orig.flrn", "--lambda", "0,0.5", "--epochs", "1", "--out",
            "sweep.csv",
        ],
    );
    let sweep = SweepResult::from_csv(&String::from_utf8(read(d, "sweep.csv")).unwrap()).unwrap();
    assert_eq!(sweep.rows.len(), 4);
    assert!(sweep.rows.iter().filter(|r| r.lambda == 0.0).all(|r| r.locality == 100.0));

    let compare = |out: &str| {
        ok(
            d,
            &[
                "compare", "--corpus", "corpus", "--model", "orig.flrn", "--strategy", "full_ft,f_ft,ft_c",
                "--epochs", "1", "--out", out,
            ],
        )
    };
    compare("c1.csv");
    compare("c2.csv");
    assert_eq!(read(d, "c1.csv"), read(d, "c2.csv"));
    let table = CompareTable::from_csv(&String::from_utf8(read(d, "c1.csv")).unwrap()).unwrap();
    let names: Vec<_> = table.rows.iter().map(|r| r.strategy.as_str()).collect();
    assert_eq!(names, ["original", "full_ft", "f_ft", "ft_c"]);
    assert_eq!(table.row("original").unwrap().locality, 100.0);

    ok(d, &["analyze-params", "--model", "orig.flrn", "--other", "base.flrn", "--out", "dist.csv"]);
    let dist = String::from_utf8(read(d, "dist.csv")).unwrap();
    assert!(dist.starts_with("tensor,layer,family,distance\n"));
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(flearn(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(flearn(d, &["edit", "--strategy", "rome"]).status.code(), Some(1));
    tiny_lab(d);

    // never overwrite an input
    let out = flearn(
        d,
        &["edit", "--corpus", "corpus", "--model", "orig.flrn", "--strategy", "full_ft", "--out", "orig.flrn"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(load_checkpoint(&d.join("orig.flrn")).is_ok());

    // truncated checkpoint
    let bytes = read(d, "orig.flrn");
    std::fs::write(d.join("cut.flrn"), &bytes[..bytes.len() / 2]).unwrap();
    let out = flearn(
        d,
        &["edit", "--corpus", "corpus", "--model", "cut.flrn", "--strategy", "full_ft", "--out", "x.flrn"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));

    // a learning rate this large overflows
    let out = flearn(
        d,
        &[
            "edit", "--corpus", "corpus", "--model", "orig.flrn", "--strategy", "full_ft", "--lr", "1e30",
            "--out", "boom.flrn",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // --lambda on a strategy that does not forget
    let out = flearn(
        d,
        &[
            "edit", "--corpus", "corpus", "--model", "orig.flrn", "--strategy", "lora", "--lambda", "0.3", "--out",
            "y.flrn",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}
