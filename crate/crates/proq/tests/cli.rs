use std::path::Path;
use std::process::{Command, Output};

use proq::artifacts::{read_report, Axis};

fn proq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proq")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn exit_codes() {
    assert_eq!(proq(&["--help"]).status.code(), Some(0));
    assert_eq!(proq(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(proq(&["synth", "--seed", "x"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "synth.n_patient=10\n").unwrap();
    let o = proq(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown key"), "{}", stderr(&o));

    let o = proq(&["ingest", "--data-dir", dir.path().join("absent").to_str().unwrap(), "--work-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: ingest:"), "{}", stderr(&o));

    let o = proq(&["grid", "--followup", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn small_grid_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.conf");
    std::fs::write(&cfg, "synth.n_patients=300\npretrain.epochs=1\nfinetune.epochs=2\n").unwrap();
    let data = dir.path().join("data");
    let work = dir.path().join("work");
    let common = [
        "--config",
        cfg.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--work-dir",
        work.to_str().unwrap(),
        "--followup",
        "180,365",
        "--assessment",
        "180",
        "--deterministic",
        "--audit-leakage",
        "-q",
    ];
    let run = |stage: &str| {
        let mut args = vec![stage];
        args.extend_from_slice(&common);
        let o = proq(&args);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
    };
    run("all");
    assert!(read(&work.join("dataset_summary.csv")).starts_with(b"table,rows\n"));

    // Tokenizing again from the same inputs rewrites identical files.
    let files = ["vocab.txt", "sequences/pretrain_train.tsv", "sequences/F180_A180_test.tsv", "sequences/F365_A180_val.tsv"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| read(&work.join(f))).collect();
    run("tokenize");
    for (f, b) in files.iter().zip(&before) {
        assert_eq!(&read(&work.join(f)), b, "{f} changed");
    }

    let rows = read_report(&work.join("report.csv")).unwrap();
    let keys: Vec<(Axis, Axis)> = rows.iter().map(|r| (r.followup, r.assessment)).collect();
    use Axis::{Mean, Value as V};
    assert_eq!(keys, [(V(180), V(180)), (V(365), V(180)), (V(180), Mean), (V(365), Mean), (Mean, V(180)), (Mean, Mean)]);
    // Summary rows recomputed from the per-cell metric files.
    let cell = |f: u32| read_report(&work.join(format!("metrics/F{f}_A180.csv"))).unwrap()[0].report;
    let (a, b) = (cell(180), cell(365));
    assert_eq!(rows[0].report, a);
    assert_eq!(rows[1].report, b);
    assert_eq!(rows[2].report.roc_auc, a.roc_auc);
    assert!((rows[4].report.roc_auc - (a.roc_auc + b.roc_auc) / 2.0).abs() < 1e-12);
    assert!((rows[5].report.pr_auc - (a.pr_auc + b.pr_auc) / 2.0).abs() < 1e-12);

    // The report stage alone reproduces report.csv.
    let report = read(&work.join("report.csv"));
    run("report");
    assert_eq!(read(&work.join("report.csv")), report);
}
