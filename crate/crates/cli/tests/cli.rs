use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn capsattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capsattn")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 16] = [
    "--d-model", "16", "--d-ff", "32", "--capsule-ffn", "16", "--vocab", "12", "--max-len", "10",
    "--task-max-len", "6", "--batch-size", "4", "--eval-size", "8",
];

fn train_small(out: &Path, routing: &str) -> Output {
    let mut args = vec!["train", "--routing", routing, "--steps", "6", "--eval-every", "3", "--seed", "5"];
    args.extend(SMALL);
    let out = out.to_str().unwrap();
    args.extend(["--out", out]);
    capsattn(&args)
}

#[test]
fn gradcheck_passes_and_rejects_unknown_scopes() {
    let o = capsattn(&["gradcheck", "--scope", "squash", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("scope,block,checked,max_rel_err,status\n"));
    assert!(text.lines().skip(1).all(|l| l.ends_with(",ok")), "{text}");

    let o = capsattn(&["gradcheck", "--scope", "everything"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown scope"));
}

#[test]
fn train_then_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_small(dir.path(), "em");
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics, stdout(&o));
    let steps: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "3", "6"]);
    assert!(fs::read_to_string(dir.path().join("config.txt")).unwrap().contains("routing=em\n"));
    let ckpt = dir.path().join("final.caps");
    assert_eq!(&fs::read(&ckpt).unwrap()[..4], b"CAPS");

    let trace = dir.path().join("trace.jsonl");
    let o = capsattn(&[
        "trace", "--ckpt", ckpt.to_str().unwrap(), "--site", "ED_2", "--input", "5 7 3", "--target", "5 7",
        "--out", trace.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&trace).unwrap();
    // Three iterations over the three decoder-input positions.
    assert_eq!(text.lines().count(), 9);
    for line in text.lines() {
        assert!(line.starts_with("{\"site\":\"ed2\",\"routing\":\"em\""), "{line}");
        assert!(line.contains("\"sigma2\"") && line.contains("\"alpha\""));
    }

    let o = capsattn(&["trace", "--ckpt", ckpt.to_str().unwrap(), "--site", "enc1", "--input", "5 7 3"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("available: dec2,ed2"), "{}", stderr(&o));
}

#[test]
fn identical_runs_write_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(train_small(a.path(), "dynamic").status.success());
    assert!(train_small(b.path(), "dynamic").status.success());
    for f in ["metrics.csv", "final.caps", "config.txt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn invalid_configurations_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = capsattn(&["train", "--placement", "enc1,enc9", "--steps", "1", "--out", out]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("enc9"), "{}", stderr(&o));
    let o = capsattn(&["train", "--capsules", "3", "--steps", "1", "--out", out]);
    assert!(!o.status.success());
    let o = capsattn(&["train", "--routing", "fancy", "--steps", "1", "--out", out]);
    assert!(!o.status.success());
    let o = capsattn(&["sweep", "--kind", "heads"]);
    assert!(!o.status.success());
}

#[test]
fn capsule_count_sweep_dedupes_and_skips() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "sweep", "--kind", "capsule_count", "--variants", "2;4;2;3", "--seeds", "1,2", "--steps", "2",
        "--eval-every", "2",
    ];
    args.extend(SMALL);
    args.extend(["--out", dir.path().to_str().unwrap()]);
    let o = capsattn(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning: skipping variant '3'"));
    let table = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{table}");
    assert!(rows[0].starts_with("3,skipped"));
    assert!(rows[1].starts_with("l=2,ok,8,"));
    assert!(rows[2].starts_with("l=4,ok,4,"));
}
