//! The `geco` binary: outputs, determinism, exit codes and the output lock.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn geco(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geco"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const MINIMAL: [&str; 4] = ["--set", "bc.demos=20", "--set", "bc.steps=500"];

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn train_base_is_fast_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let mut args = vec!["train-base", "--task", "cuboid-reach"];
    args.extend(MINIMAL);
    let started = Instant::now();
    let o = geco(&a, &args);
    let took = started.elapsed();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(took < Duration::from_secs(60), "took {took:?}");
    assert!(geco(&b, &args).status.success());
    let (fa, fb) = (files(&a), files(&b));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["base_cuboid-reach.ckpt", "bc_loss_cuboid-reach.csv", "config.toml", "demos_cuboid-reach.jsonl"]);
    assert_eq!(fa, fb, "reruns differ");
    assert!(!a.join(".geco.lock").exists());

    // the checkpoint feeds evaluation on both domains
    let ckpt = a.join("base_cuboid-reach.ckpt");
    let eval_dir = tmp.path().join("eval");
    let mut eval = vec!["eval", "--task", "cuboid-reach", "--base", ckpt.to_str().unwrap(), "--set", "experiment.eval_trials=5"];
    eval.extend(MINIMAL);
    let o = geco(&eval_dir, &eval);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(eval_dir.join("eval_cuboid-reach_real.csv")).unwrap();
    assert!(csv.starts_with("task,domain,method,trials,success_rate\ncuboid-reach,real,"), "{csv}");
    eval.push("--sim");
    assert!(geco(&eval_dir, &eval).status.success());
    assert!(eval_dir.join("eval_cuboid-reach_sim.csv").exists());
}

#[test]
fn unknown_task_ids_are_config_errors_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let o = geco(tmp.path(), &["continual", "--set", "experiment.tasks=[\"cuboid-reach\", \"cylinder\"]"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("experiment.tasks"), "{}", stderr(&o));

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[transfer]\nsource = \"sphere\"\n").unwrap();
    let o = geco(tmp.path(), &["cross-transfer", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("transfer.source"), "{}", stderr(&o));

    let o = geco(tmp.path(), &["train-base", "--task", "sphere"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--task"), "{}", stderr(&o));
}

#[test]
fn malformed_config_and_unknown_keys_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("broken.toml");
    fs::write(&cfg, "[bc\nsteps = ").unwrap();
    assert_eq!(geco(tmp.path(), &["continual", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(geco(tmp.path(), &["continual", "--set", "bc.stepz=3"]).status.code(), Some(2));
    assert_eq!(geco(tmp.path(), &["continual", "--method", "magic"]).status.code(), Some(2));
}

#[test]
fn missing_input_and_held_lock_are_io_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let o = geco(tmp.path(), &["feat", "--input", tmp.path().join("absent.xyz").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));

    fs::write(tmp.path().join(".geco.lock"), "1").unwrap();
    let o = geco(tmp.path(), &["feat", "--task", "cuboid-reach"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
}

#[test]
fn feat_writes_one_row_per_group() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = String::from("# a flat square and a rod\n");
    for i in 0..8 {
        for j in 0..8 {
            text.push_str(&format!("{} {} 0.0\n", 0.01 * i as f64, 0.01 * j as f64));
        }
    }
    for i in 0..64 {
        text.push_str(&format!("0.5 0.5 {}\n", 0.005 * i as f64));
    }
    let input = tmp.path().join("cloud.xyz");
    fs::write(&input, text).unwrap();
    let out = tmp.path().join("out");
    let o = geco(&out, &["feat", "--input", input.to_str().unwrap(), "--set", "moe.groups=4", "--set", "moe.group_size=16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("features.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "group_index,cx,cy,cz,linearity,planarity,saliency,lambda1,lambda2,lambda3");
    assert_eq!(lines.count(), 4);
}

#[test]
fn two_task_continual_completes_and_repeats_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let args = ["continual", "--seed", "3", "--set", "experiment.tasks=[\"cuboid-reach\", \"curved-reach\"]"];
    let started = Instant::now();
    let o = geco(&a, &args);
    let took = started.elapsed();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(took < Duration::from_secs(600), "took {took:?}");
    for f in [
        "eval_matrix.csv",
        "report.csv",
        "report.txt",
        "phases.log",
        "buffer.jsonl",
        "config.toml",
        "base_cuboid-reach.ckpt",
        "adapter_after_curved-reach.ckpt",
        "gates_curved-reach.csv",
    ] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    let matrix = fs::read_to_string(a.join("eval_matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 3, "{matrix}");

    // a cheaper rerun pair checks byte identity of every artifact
    let quick = [
        "continual", "--seed", "3", "--set", "experiment.tasks=[\"cuboid-reach\", \"curved-reach\"]",
        "--set", "bc.steps=300", "--set", "bc.demos=10", "--set", "adapt.steps=40", "--set", "experiment.eval_trials=10",
    ];
    let (c, d) = (tmp.path().join("c"), tmp.path().join("d"));
    assert!(geco(&c, &quick).status.success());
    assert!(geco(&d, &quick).status.success());
    assert_eq!(files(&c), files(&d));
}
