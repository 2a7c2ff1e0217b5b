use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rld(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rld"))
        .args(args)
        .env("RLD_OUT_DIR", out_root)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn ingest_prints_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rld(&["ingest", "--synthetic", "n=60,seed=2"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("60 ASes,"), "{}", stdout(&o));
}

#[test]
fn ingest_reads_as_rel_file() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("g.txt");
    fs::write(&path, "# comment\n1|4|-1\n2|4|-1\n1|2|0\n2|3|-1\n2|5|0\n").unwrap();
    let o = rld(&["ingest", "--topology", path.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("5 ASes, 5 links (3 p2c, 2 p2p), 1 connected components"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(rld(&["frobnicate"], tmp.path()).status.code(), Some(1));
    assert_eq!(rld(&["train", "--mode", "bogus"], tmp.path()).status.code(), Some(1));
    assert_eq!(rld(&["deploy", "--rates", "1.5"], tmp.path()).status.code(), Some(1));
    assert_eq!(rld(&["ingest", "--synthetic", "seed=1"], tmp.path()).status.code(), Some(1));
    assert_eq!(rld(&["ingest", "--topology", "/nonexistent/as-rel"], tmp.path()).status.code(), Some(2));
    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "1|2|7\n").unwrap();
    assert_eq!(rld(&["ingest", "--topology", bad.to_str().unwrap()], tmp.path()).status.code(), Some(2));
}

#[test]
fn cost_literal_and_per_round() {
    let tmp = tempfile::tempdir().unwrap();
    let params = tmp.path().join("cost.json");
    fs::write(
        &params,
        r#"{"global_epochs":2,"local_epochs":3,"dataset_sizes":[100,100,100,100,100],
            "local_epoch":{"fixed":1},"aggregation":2,"broadcast":1,
            "consensus":{"fixed":4},"storage":{"fixed":10}}"#,
    )
    .unwrap();
    let p = params.to_str().unwrap();
    let o = rld(&["cost", "--params", p], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("total             230"), "{}", stdout(&o));
    let o = rld(&["cost", "--params", p, "--per-round"], tmp.path());
    assert!(stdout(&o).contains("total             118"), "{}", stdout(&o));
}

#[test]
fn deploy_writes_coverage_under_out_root() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rld(&["deploy", "--synthetic", "n=80,seed=4", "--rates", "0.1,1.0"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let runs: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].file_name().unwrap().to_str().unwrap().starts_with("deploy-"));
    let csv = fs::read_to_string(runs[0].join("coverage.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    for line in csv.lines().filter(|l| l.ends_with(",1,") || l.contains(",1,80,")) {
        assert!(line.ends_with("1.000000"), "{line}");
    }
    for f in ["config.json", "inputs.json", "summary.txt"] {
        assert!(runs[0].join(f).exists(), "{f}");
    }
}

#[test]
fn train_audit_and_tamper() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let r = run.to_str().unwrap();
    let o = rld(
        &["train", "--synthetic", "n=400,seed=1", "--mode", "fl", "--ge", "2", "--ce", "1", "--out", r],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 2 * 5);
    assert!(fs::read_to_string(run.join("comparison.csv")).unwrap().contains("\nfl,"));

    let o = rld(&["audit", "--run", r], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("replay matches"));

    let payload = fs::read_dir(run.join("store")).unwrap().next().unwrap().unwrap().path();
    let mut bytes = fs::read(&payload).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&payload, bytes).unwrap();
    assert_eq!(rld(&["audit", "--run", r], tmp.path()).status.code(), Some(3));
}

#[test]
fn train_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let o = rld(
            &[
                "train", "--synthetic", "n=400,seed=1", "--mode", "central", "--ge", "1", "--ce", "1", "--sequential",
                "--out", dir.to_str().unwrap(),
            ],
            tmp.path(),
        );
        assert_eq!(o.status.code(), Some(0));
        fs::read(dir.join("model_central.bin")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}
