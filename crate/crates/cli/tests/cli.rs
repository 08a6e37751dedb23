use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "[env]\nname = pistonline\nagents = 3\nmax_cycles = 20\n[algo]\nname = infopg\n[train]\nepochs = 4\n";

fn klevel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_klevel")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_is_deterministic_and_guards_its_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "small.cfg", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = klevel(&["train", "--config", &cfg, "--seed", "4", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.jsonl", "metrics.csv", "checkpoint.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let o = klevel(&["train", "--config", &cfg, "--seed", "4", "--out", s(&a)]);
    assert_eq!(o.status.code(), Some(1));
    let o = klevel(&["train", "--config", &cfg, "--seed", "5", "--out", s(&a), "--force"]);
    assert!(o.status.success());
    assert_ne!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
}

#[test]
fn eval_reads_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "small.cfg", SMALL);
    let out = dir.path().join("run");
    assert!(klevel(&["train", "--config", &cfg, "--seed", "0", "--out", s(&out)]).status.success());
    let ck = out.join("checkpoint.bin");
    let o = klevel(&["eval", "--checkpoint", s(&ck), "--config", &cfg, "--episodes", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("episodes 7"));
    assert!(text.contains("solve rate"));

    let o = klevel(&["eval", "--checkpoint", s(&ck), "--config", &cfg, "--mode", "greedy"]);
    assert_eq!(o.status.code(), Some(1));
    let other = write_cfg(dir.path(), "other.cfg", &SMALL.replace("agents = 3", "agents = 4"));
    let o = klevel(&["eval", "--checkpoint", s(&ck), "--config", &other]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_configs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "bad.cfg", "[env]\nname = pistonline\n[algo]\nname = infopg\nlr = fast\n");
    let o = klevel(&["train", "--config", &cfg, "--seed", "0", "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("line 5"), "{err}");
    let o = klevel(&["train", "--config", s(&dir.path().join("missing.cfg")), "--seed", "0", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn audits_report_pass_lines() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("mi.csv");
    let o = klevel(&["mi-audit", "--trials", "300", "--csv", s(&csv)]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 2, "{text}");
    assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 301);

    let o = klevel(&["grad-check", "--trials", "5", "--coords", "10", "--seed", "2"]);
    assert!(o.status.success());
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("PASS grad_check"));
}

#[test]
fn sweep_runs_every_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs = dir.path().join("cfgs");
    fs::create_dir(&cfgs).unwrap();
    write_cfg(&cfgs, "one.cfg", SMALL);
    write_cfg(&cfgs, "two.cfg", &SMALL.replace("infopg", "nc_a2c"));
    write_cfg(&cfgs, "notes.txt", "ignored");
    let out = dir.path().join("out");
    let o = klevel(&["sweep", "--configs", s(&cfgs), "--seeds", "0..2", "--out", s(&out), "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for stem in ["one", "two"] {
        for seed in 0..2 {
            assert!(out.join(stem).join(format!("seed_{seed}")).join("metrics.jsonl").exists());
        }
    }
    let o = klevel(&["sweep", "--configs", s(&cfgs), "--seeds", "3..3", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}
