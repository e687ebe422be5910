//! Command-line contract: exit codes, determinism and report formats.

use std::path::Path;
use std::process::{Command, Output};

fn logmilp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logmilp")).args(args).output().expect("spawn logmilp")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.log");
    let b = dir.path().join("b.log");
    for p in [&a, &b] {
        let o = logmilp(&["synth", "--seed", "5", "--lines", "3000", "--out", s(p)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let labels = std::fs::read_to_string(dir.path().join("a.log.labels")).unwrap();
    assert_eq!(labels.lines().count(), 3000);
}

#[test]
fn synth_without_out_is_a_usage_error() {
    let o = logmilp(&["synth", "--seed", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 3\nbogus_knob = 1\n").unwrap();
    let o = logmilp(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("x.log"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus_knob"), "{}", stderr(&o));
}

#[test]
fn invalid_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = logmilp(&["synth", "--set", "anomaly_rate=1.5", "--out", s(&dir.path().join("x.log"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("c.log");
    assert!(logmilp(&["synth", "--lines", "2000", "--out", s(&log)]).status.success());
    let o = logmilp(&["eval", "--input", s(&log), "--checkpoint", s(&dir.path().join("none.lmckpt"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = logmilp(&["bag", "--input", s(&dir.path().join("absent.log")), "--out", s(&dir.path().join("b.bin"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_eval_localize_summary() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("c.log");
    let run = dir.path().join("run");
    assert!(logmilp(&["synth", "--seed", "2", "--lines", "4000", "--out", s(&log)]).status.success());
    let o = logmilp(&["train", "--seed", "2", "--input", s(&log), "--epochs", "2", "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model.lmckpt", "train.log", "effective.cfg"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let train_log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(train_log.lines().next().unwrap(), "epoch\tL_cls\tL_proto\tL_attn\tL_con\tL_total\tval_f1");
    assert_eq!(train_log.lines().count(), 3);

    // eval twice from the effective config: identical rows
    let cfg = run.join("effective.cfg");
    let e1 = logmilp(&["eval", "--config", s(&cfg)]);
    let e2 = logmilp(&["eval", "--config", s(&cfg)]);
    assert!(e1.status.success(), "{}", stderr(&e1));
    assert_eq!(e1.stdout, e2.stdout);
    let text = String::from_utf8(e1.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "dataset,seed,auc,precision,recall,f1,loc_at_k,sr,tau,k,delta_sr");
    assert_eq!(lines.next().unwrap().split(',').count(), 11);

    // appended CSV feeds the summary
    let csv = dir.path().join("metrics.csv");
    for _ in 0..2 {
        assert!(logmilp(&["eval", "--config", s(&cfg), "--out", s(&csv)]).status.success());
    }
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 3);
    let sum = logmilp(&["summary", "--input", s(&csv)]);
    assert!(sum.status.success(), "{}", stderr(&sum));
    let sum = String::from_utf8(sum.stdout).unwrap();
    assert!(sum.contains("f1"), "{sum}");

    // localization report: header, k positions per row, sorted by drop
    let rep = logmilp(&["localize", "--config", s(&cfg), "--k", "2"]);
    assert!(rep.status.success(), "{}", stderr(&rep));
    let rep = String::from_utf8(rep.stdout).unwrap();
    let mut rows = rep.lines();
    assert_eq!(rows.next().unwrap(), "bag\thead\ts_top\tp_orig\tp_pert\tdrop");
    let mut last = f64::INFINITY;
    let mut n = 0;
    for row in rows {
        let f: Vec<&str> = row.split('\t').collect();
        assert_eq!(f.len(), 6);
        assert_eq!(f[2].split(',').count(), 2);
        let (o, p, d): (f64, f64, f64) = (f[3].parse().unwrap(), f[4].parse().unwrap(), f[5].parse().unwrap());
        assert!((o - p - d).abs() < 2e-6);
        assert!(d <= last);
        last = d;
        n += 1;
    }
    assert!(n > 0);
}
