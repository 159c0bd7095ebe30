use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use waferssl::{load_dataset, save_dataset, ClassLabel, Dataset, WaferMap};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_waferssl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, name: &str, counts: &str, size: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    ok(&[
        "generate",
        "--counts",
        counts,
        "--size",
        &size.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&path),
    ]);
    path
}

#[test]
fn generate_writes_requested_counts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.txt");
    let stdout = ok(&["generate", "--per-class", "200", "--out", s(&path)]);
    let ds = load_dataset(&path).unwrap();
    assert_eq!(ds.len(), 1800);
    assert_eq!(ds.counts_per_class(), &[200; 9]);
    assert!(stdout.contains("total      1800"), "{stdout}");

    let empty = dir.path().join("e.txt");
    ok(&["generate", "--per-class", "0", "--out", s(&empty)]);
    assert!(load_dataset(&empty).unwrap().is_empty());

    let unl = dir.path().join("u.txt");
    ok(&["generate", "--per-class", "2", "--unlabeled", "--out", s(&unl)]);
    let ds = load_dataset(&unl).unwrap();
    assert_eq!(ds.len(), 18);
    assert!(ds.records().iter().all(|r| r.label().is_none()));
}

#[test]
fn generate_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.txt", "1,2,3,4,5,6,7,8,9", 16, 3);
    let b = generate(dir.path(), "b.txt", "1,2,3,4,5,6,7,8,9", 16, 3);
    let c = generate(dir.path(), "c.txt", "1,2,3,4,5,6,7,8,9", 16, 4);
    let read = |p: &Path| std::fs::read_to_string(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["generate", "--per-class", "3"]).status.code(), Some(2));
    assert_eq!(run(&["generate", "--counts", "1,2", "--out", "x"]).status.code(), Some(2));
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn resample_hits_target_without_touching_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), "in.txt", "300,20,150,8,500,12,40,5,900", 16, 1);
    let before = std::fs::read(&input).unwrap();
    let out = dir.path().join("out.txt");
    let stdout = ok(&["resample", "--input", s(&input), "--target", "100", "--k", "3", "--out", s(&out)]);
    assert!(stdout.contains("before:") && stdout.contains("after:"));
    assert_eq!(load_dataset(&out).unwrap().counts_per_class(), &[100; 9]);
    assert_eq!(std::fs::read(&input).unwrap(), before);
}

#[test]
fn resample_names_the_class_that_is_too_small() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), "in.txt", "5,5,5,1,5,5,5,5,5", 16, 1);
    let out = run(&["resample", "--input", s(&input), "--target", "10", "--k", "1", "--out", "x.txt"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(ClassLabel::EdgeRing.name()), "{err}");
}

#[test]
fn resample_at_target_keeps_the_records() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), "in.txt", "6,6,6,6,6,6,6,6,6", 16, 2);
    let out = dir.path().join("out.txt");
    ok(&["resample", "--input", s(&input), "--target", "6", "--k", "2", "--out", s(&out)]);
    let key = |d: &Dataset| {
        let mut v: Vec<String> = d.records().iter().map(|r| format!("{r:?}")).collect();
        v.sort();
        v
    };
    assert_eq!(key(&load_dataset(&input).unwrap()), key(&load_dataset(&out).unwrap()));
}

fn write_config(dir: &Path) -> PathBuf {
    generate(dir, "train.txt", "8,8,8,8,8,8,8,8,8", 16, 1);
    generate(dir, "val.txt", "2,2,2,2,2,2,2,2,2", 16, 2);
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        "# tiny run\nvariant = mean_teacher_supcon\nlabeled = train.txt\nval = val.txt\n\
         labeled_fraction = 0.5\ninput_height = 16\ninput_width = 16\nstem_channels = 4\nblocks = 1\n\
         embed_dim = 8\nproj_dim = 4\nepochs = 2\nbatch_labeled = 8\nbatch_unlabeled = 8\n",
    )
    .unwrap();
    path
}

#[test]
fn train_is_reproducible_and_eval_reads_its_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out_a = ok(&["train", s(&cfg), "--out-dir", s(&a), "--seed", "5"]);
    ok(&["--config", s(&cfg), "--out-dir", s(&b), "--seed", "5", "train"]);
    assert!(out_a.starts_with("mean_teacher_supcon: "), "{out_a}");
    for f in ["history.csv", "checkpoint.ckpt", "report.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    let c = dir.path().join("c");
    ok(&["train", s(&cfg), "--out-dir", s(&c), "--seed", "6"]);
    assert_ne!(std::fs::read(a.join("checkpoint.ckpt")).unwrap(), std::fs::read(c.join("checkpoint.ckpt")).unwrap());

    let report = dir.path().join("eval.txt");
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        s(&a.join("checkpoint.ckpt")),
        "--data",
        s(&dir.path().join("val.txt")),
        "--report",
        s(&report),
    ]);
    for c in ClassLabel::ALL {
        assert_eq!(stdout.lines().filter(|l| l.starts_with(c.name())).count(), 1, "{stdout}");
    }
    // the training run's final validation used the same teacher on the same data
    assert_eq!(std::fs::read_to_string(&report).unwrap(), std::fs::read_to_string(a.join("report.txt")).unwrap());
}

#[test]
fn eval_of_an_empty_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run_dir = dir.path().join("r");
    ok(&["train", s(&cfg), "--out-dir", s(&run_dir)]);
    let empty = dir.path().join("empty.txt");
    ok(&["generate", "--per-class", "0", "--size", "16", "--out", s(&empty)]);
    let out = run(&["eval", "--checkpoint", s(&run_dir.join("checkpoint.ckpt")), "--data", s(&empty)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn train_without_output_dir_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert_eq!(run(&["train", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn verify_runs_selected_suites() {
    let stdout = ok(&["verify", "--suite", "supcon"]);
    assert!(stdout.contains("all suites passed"));
    assert!(stdout.contains("suite supcon"));
    assert!(!stdout.contains("suite ema"), "{stdout}");

    let out = run(&["verify", "--suite", "ema", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAILED"));
}

#[test]
fn labels_survive_a_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::from_records(vec![
        WaferMap::new(2, 2, vec![0, 1, 2, 1], Some(ClassLabel::Scratch)).unwrap(),
        WaferMap::new(2, 2, vec![1, 1, 0, 0], None).unwrap(),
    ])
    .unwrap();
    let path = dir.path().join("x.txt");
    save_dataset(&ds, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);
}
