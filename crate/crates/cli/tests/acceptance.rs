//! One PASS/FAIL line per acceptance criterion; exits nonzero if any fail.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use waferssl::eval::ReportStyle;
use waferssl::verify::{run_suite, Suite, SuiteReport, VerifyOptions};
use waferssl::{
    compute_metrics, confusion, generate_synthetic_dataset, render_report, run_experiment, Dataset, MethodVariant,
    RunConfig,
};

const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    passed: bool,
    detail: String,
}

fn criterion(name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let took = start.elapsed();
    let passed = out.passed && took < budget;
    println!(
        "{} {name}: {} [{:.1}s of {}s]",
        if passed { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64(),
        budget.as_secs()
    );
    passed
}

fn suite(s: Suite) -> Outcome {
    match run_suite(s, &VerifyOptions::default()) {
        Ok(r) => Outcome {
            passed: r.passed(),
            detail: summarize(&r),
        },
        Err(e) => Outcome {
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn summarize(r: &SuiteReport) -> String {
    r.checks
        .iter()
        .map(|c| format!("{} {:.1e}<{:.0e}", c.name, c.worst, c.tolerance))
        .collect::<Vec<_>>()
        .join("; ")
}

fn metrics_hand_case() -> Outcome {
    let r = compute_metrics(&confusion(&[0, 1, 1, 2], &[0, 0, 1, 2]).unwrap()).unwrap();
    let c = r.per_class[0];
    let hand = c.precision == Some(1.0) && c.recall == Some(0.5) && c.f1 == Some(2.0 / 3.0) && r.overall.accuracy == 0.75;

    let mut table = r.clone();
    table.overall.accuracy = 0.8463;
    table.overall.macro_precision = 0.8624;
    table.overall.macro_recall = 0.8441;
    table.overall.macro_f1 = 0.8340;
    let row = render_report(&table, ReportStyle::Overall);
    Outcome {
        passed: hand && row == "84.63%, 86.24%, 84.41%, 83.40%",
        detail: format!("P0={:?} R0={:?} F1_0={:?} acc={} row \"{row}\"", c.precision, c.recall, c.f1, r.overall.accuracy),
    }
}

fn ablation() -> Outcome {
    let train = generate_synthetic_dataset(&[200; 9], 24, 24, 1, 0.02).unwrap();
    let val = generate_synthetic_dataset(&[50; 9], 24, 24, 2, 0.02).unwrap();
    let mut loader = |p: &Path| -> waferssl::Result<Dataset> {
        Ok(if p.ends_with("train.txt") { train.clone() } else { val.clone() })
    };

    let mut means = Vec::new();
    for variant in MethodVariant::ALL {
        let text = format!(
            "variant = {variant}\nlabeled = train.txt\nval = val.txt\nlabeled_fraction = 0.1\n\
             input_height = 24\ninput_width = 24\nepochs = 30\neval_every = 30\n"
        );
        let mut scores = Vec::new();
        for seed in ABLATION_SEEDS {
            let mut cfg = RunConfig::parse(&text, Path::new(".")).unwrap();
            cfg.reseed(seed);
            let out = run_experiment(&cfg, &mut loader).unwrap();
            scores.push(out.final_report.unwrap().overall.macro_f1);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        means.push((variant, mean, scores));
    }
    let f1 = |v: MethodVariant| means.iter().find(|m| m.0 == v).unwrap().1;
    let base = f1(MethodVariant::Baseline);
    let passed = f1(MethodVariant::MeanTeacherSupCon) >= base + 0.01
        && f1(MethodVariant::MeanTeacher) >= base - 0.005
        && f1(MethodVariant::SupCon) >= base - 0.005;
    let detail = means
        .iter()
        .map(|(v, m, s)| format!("{v} {m:.4} {s:.3?}"))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome { passed, detail }
}

fn train_twice() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let bin = env!("CARGO_BIN_EXE_waferssl");
    let ok = |args: &[&str]| Command::new(bin).args(args).env("RUST_LOG", "warn").stdout(Stdio::null()).status().unwrap().success();
    let s = |p: &PathBuf| p.to_str().unwrap().to_string();

    let (train, val) = (root.join("train.txt"), root.join("val.txt"));
    let mut passed = ok(&["generate", "--per-class", "20", "--size", "16", "--seed", "1", "--out", &s(&train)])
        && ok(&["generate", "--per-class", "4", "--size", "16", "--seed", "2", "--out", &s(&val)]);
    let cfg = root.join("run.cfg");
    std::fs::write(
        &cfg,
        "variant = mean_teacher_supcon\nlabeled = train.txt\nval = val.txt\nlabeled_fraction = 0.3\n\
         input_height = 16\ninput_width = 16\nepochs = 3\neval_every = 1\n",
    )
    .unwrap();
    let runs = [root.join("a"), root.join("b")];
    for dir in &runs {
        passed &= ok(&["train", &s(&cfg), "--seed", "7", "--out-dir", &s(dir)]);
    }
    let mut files: Vec<String> = std::fs::read_dir(&runs[0])
        .map(|d| d.map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    files.sort();
    for f in &files {
        passed &= std::fs::read(runs[0].join(f)).ok() == std::fs::read(runs[1].join(f)).ok();
    }
    passed &= files.iter().any(|f| f == "history.csv") && files.iter().any(|f| f.ends_with(".ckpt"));
    Outcome {
        passed,
        detail: format!("compared {} output files byte for byte", files.len()),
    }
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let results = [
        criterion("gradient fidelity", secs(60), || suite(Suite::Gradients)),
        criterion("supcon oracle", secs(10), || suite(Suite::SupCon)),
        criterion("ema law", secs(5), || suite(Suite::Ema)),
        criterion("smote properties", secs(30), || suite(Suite::Smote)),
        criterion("metrics hand case", secs(1), metrics_hand_case),
        criterion("ablation direction", secs(15 * 60), ablation),
        criterion("determinism", secs(120), train_twice),
    ];
    let failed = results.iter().filter(|&&p| !p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
