use std::cell::RefCell;
use std::path::{Path, PathBuf};

use waferssl::experiment::{epoch_checkpoint_name, prepare_data, FINAL_CHECKPOINT, HISTORY_FILE, REPORT_FILE};
use waferssl::{
    evaluate_checkpoint, generate_synthetic_dataset, load_dataset, run_experiment, save_dataset, Checkpoint,
    Dataset, MethodVariant, RunConfig,
};

struct Files {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn write_files() -> Files {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let train = generate_synthetic_dataset(&[10; 9], 16, 16, 1, 0.02).unwrap();
    let val = generate_synthetic_dataset(&[2; 9], 16, 16, 2, 0.02).unwrap();
    let extra = generate_synthetic_dataset(&[3; 9], 16, 16, 3, 0.02).unwrap();
    save_dataset(&train, root.join("train.txt")).unwrap();
    save_dataset(&val, root.join("val.txt")).unwrap();
    save_dataset(&extra, root.join("extra.txt")).unwrap();
    Files { _dir: dir, root }
}

fn config_text(variant: MethodVariant, extra: &str) -> String {
    format!(
        "variant = {variant}\nlabeled = train.txt\nunlabeled = extra.txt\nval = val.txt\n\
         labeled_fraction = 0.3\ninput_height = 16\ninput_width = 16\nstem_channels = 4\nblocks = 1\n\
         embed_dim = 8\nproj_dim = 4\nbatch_labeled = 8\nbatch_unlabeled = 8\n{extra}"
    )
}

fn tracked_run(files: &Files, variant: MethodVariant) -> (Vec<PathBuf>, waferssl::ExperimentOutcome) {
    let cfg = RunConfig::parse(&config_text(variant, "epochs = 2\n"), &files.root).unwrap();
    let seen = RefCell::new(Vec::new());
    let mut loader = |p: &Path| {
        seen.borrow_mut().push(p.to_path_buf());
        load_dataset(p)
    };
    let out = run_experiment(&cfg, &mut loader).unwrap();
    (seen.into_inner(), out)
}

#[test]
fn only_semi_supervised_variants_read_unlabeled_data() {
    let files = write_files();
    let extra = files.root.join("extra.txt");
    for variant in MethodVariant::ALL {
        let (seen, out) = tracked_run(&files, variant);
        assert_eq!(seen.contains(&extra), variant.uses_unlabeled(), "{variant}");
        assert!(seen.contains(&files.root.join("train.txt")));
        if variant.uses_unlabeled() {
            // held-back 70% of the split plus the extra file
            assert_eq!(out.unlabeled_count, 9 * 7 + 27);
        } else {
            assert_eq!(out.unlabeled_count, 0);
        }
        assert_eq!(out.labeled_count, 9 * 3);
    }
}

#[test]
fn variants_zero_their_disabled_terms() {
    let files = write_files();
    for variant in MethodVariant::ALL {
        let (_, out) = tracked_run(&files, variant);
        for r in &out.train.history.epochs {
            assert_eq!(r.losses.consistency == 0.0, !variant.uses_unlabeled(), "{variant}");
            assert_eq!(r.losses.supcontrast == 0.0, !variant.uses_supcon(), "{variant}");
        }
    }
}

#[test]
fn outputs_are_written_and_consistent() {
    let files = write_files();
    let out_dir = files.root.join("run");
    let text = config_text(MethodVariant::MeanTeacherSupCon, "epochs = 3\neval_every = 2\nout_dir = run\n");
    let cfg = RunConfig::parse(&text, &files.root).unwrap();
    let out = run_experiment(&cfg, &mut |p: &Path| load_dataset(p)).unwrap();

    let history = std::fs::read_to_string(out_dir.join(HISTORY_FILE)).unwrap();
    assert_eq!(history.lines().count(), 4);
    assert!(out_dir.join(epoch_checkpoint_name(2)).exists());
    assert!(out_dir.join(epoch_checkpoint_name(3)).exists());
    assert!(!out_dir.join(epoch_checkpoint_name(1)).exists());

    let ck = Checkpoint::load(out_dir.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(ck.teacher, out.train.teacher);
    assert_eq!(ck.step, out.train.step);
    let val = load_dataset(files.root.join("val.txt")).unwrap();
    let report = evaluate_checkpoint(&ck.teacher, &val).unwrap();
    let last = out.final_report.as_ref().unwrap();
    assert!((report.overall.macro_f1 - last.overall.macro_f1).abs() < 1e-12);
    assert!((report.overall.accuracy - last.overall.accuracy).abs() < 1e-12);

    let kv = std::fs::read_to_string(out_dir.join(REPORT_FILE)).unwrap();
    assert!(kv.lines().any(|l| l.starts_with("macro_f1=")));
}

#[test]
fn missing_input_fails_before_writing_anything() {
    let files = write_files();
    let text = config_text(MethodVariant::Baseline, "epochs = 2\nout_dir = run\n").replace("train.txt", "nope.txt");
    let cfg = RunConfig::parse(&text, &files.root).unwrap();
    let err = run_experiment(&cfg, &mut |p: &Path| load_dataset(p)).unwrap_err();
    assert!(err.to_string().contains("nope.txt"), "{err}");
    assert!(!files.root.join("run").exists());
}

#[test]
fn resampling_balances_the_labeled_split() {
    let files = write_files();
    let text = config_text(MethodVariant::Baseline, "epochs = 1\nresample_target = 4\nsmote_k = 2\n");
    let cfg = RunConfig::parse(&text, &files.root).unwrap();
    let data = prepare_data(&cfg, &mut |p: &Path| load_dataset(p)).unwrap();
    assert_eq!(data.labeled.counts_per_class(), &[4; 9]);
    assert_eq!(data.unlabeled, Dataset::new());
}
