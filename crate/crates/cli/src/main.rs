use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use waferssl::eval::report_to_kv;
use waferssl::verify::{run_all, Suite, VerifyOptions};
use waferssl::{
    balance_dataset, evaluate_checkpoint, generate_synthetic_dataset, load_dataset, render_report,
    run_experiment_from_files, save_dataset, Checkpoint, Dataset, ReportStyle, ResamplePlan, RunConfig,
    NUM_CLASSES,
};

/// Semi-supervised wafer-map defect classification.
#[derive(Parser, Debug)]
#[command(name = "waferssl", version)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for run outputs.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// More log output; repeat for debug level.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset.
    Generate(GenerateArgs),
    /// Rebalance a dataset to a fixed count per class.
    Resample(ResampleArgs),
    /// Train one method variant as described by a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Run the numerical self-checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Records per class.
    #[arg(long, conflicts_with = "counts", required_unless_present = "counts")]
    per_class: Option<usize>,
    /// Nine comma-separated per-class counts, in class order.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    /// Side length of square maps.
    #[arg(long, default_value_t = 24)]
    size: usize,
    /// Probability of flipping a die's pass/fail state.
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    /// Drop labels from the written records.
    #[arg(long)]
    unlabeled: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ResampleArgs {
    #[arg(long)]
    input: PathBuf,
    /// Records per class in the output.
    #[arg(long)]
    target: usize,
    /// SMOTE neighborhood size.
    #[arg(long, default_value_t = waferssl::resample::DEFAULT_SMOTE_K)]
    k: usize,
    /// Shrink k for classes too small for it instead of failing.
    #[arg(long)]
    allow_k_clamp: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run config; alternative to the global `--config`.
    config_file: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Network {
    Teacher,
    Student,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Network::Teacher)]
    network: Network,
    /// Where to write the key=value report; defaults to `eval-report.txt`
    /// under `--out-dir` when that is given.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Suite to run; repeatable. All suites run when omitted.
    #[arg(long, value_parser = parse_suite)]
    suite: Vec<Suite>,
    /// Negate implementation outputs before comparing (tests the checks).
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: waferssl::Error| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(waferssl::Error),
    ChecksFailed,
}

impl From<waferssl::Error> for Failure {
    fn from(e: waferssl::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_target(false)
        .format_timestamp(None)
        .init();

    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(&cli, a),
        Command::Resample(a) => cmd_resample(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::Verify(a) => cmd_verify(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::ChecksFailed) => ExitCode::from(1),
    }
}

fn cmd_generate(cli: &Cli, a: &GenerateArgs) -> CmdResult {
    let counts: [usize; NUM_CLASSES] = match (&a.counts, a.per_class) {
        (Some(c), _) => c
            .as_slice()
            .try_into()
            .map_err(|_| Failure::Usage(format!("--counts needs {NUM_CLASSES} values")))?,
        (None, Some(n)) => [n; NUM_CLASSES],
        (None, None) => unreachable!("clap requires one of the two"),
    };
    let mut ds = generate_synthetic_dataset(&counts, a.size, a.size, cli.seed.unwrap_or(0), a.noise)?;
    if a.unlabeled {
        let records = ds.into_records().into_iter().map(|r| r.with_label(None)).collect();
        ds = Dataset::from_records(records)?;
        if ds.is_empty() {
            ds = Dataset::with_dims(a.size, a.size);
        }
    }
    save_dataset(&ds, &a.out)?;
    print!("{}", ds.count_table());
    println!("wrote {} records to {}", ds.len(), a.out.display());
    Ok(())
}

fn cmd_resample(cli: &Cli, a: &ResampleArgs) -> CmdResult {
    let input = load_dataset(&a.input)?;
    let plan = ResamplePlan {
        smote_k: a.k,
        allow_k_clamp: a.allow_k_clamp,
        ..ResamplePlan::new(a.target, cli.seed.unwrap_or(0))
    };
    let out = balance_dataset(&input, &plan)?;
    save_dataset(&out, &a.out)?;
    println!("before:");
    print!("{}", input.count_table());
    println!("after:");
    print!("{}", out.count_table());
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let path = a
        .config_file
        .as_ref()
        .or(cli.config.as_ref())
        .ok_or_else(|| Failure::Usage("train needs a run config (`train <file>` or `--config <file>`)".into()))?;
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.reseed(seed);
    }
    if let Some(dir) = &cli.out_dir {
        config.out_dir = Some(dir.clone());
    }
    if config.out_dir.is_none() {
        return Err(Failure::Usage("no output directory (`--out-dir` or `out_dir` in the config)".into()));
    }
    let outcome = run_experiment_from_files(&config)?;
    match &outcome.final_report {
        Some(r) => println!("{}: {}", config.variant, render_report(r, ReportStyle::Overall)),
        None => println!("{}: no validation records", config.variant),
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let params = match a.network {
        Network::Teacher => &ck.teacher,
        Network::Student => &ck.student,
    };
    let report = evaluate_checkpoint(params, &data)?;
    println!("{}", render_report(&report, ReportStyle::Overall));
    println!();
    print!("{}", render_report(&report, ReportStyle::PerClass));

    let target = a
        .report
        .clone()
        .or_else(|| cli.out_dir.as_ref().map(|d| d.join("eval-report.txt")));
    if let Some(path) = target {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        std::fs::write(&path, report_to_kv(&report)).map_err(|e| waferssl::Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), waferssl::Error> {
    std::fs::create_dir_all(dir).map_err(|e| waferssl::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn cmd_verify(cli: &Cli, a: &VerifyArgs) -> CmdResult {
    let suites = if a.suite.is_empty() {
        Suite::ALL.to_vec()
    } else {
        a.suite.clone()
    };
    let opts = VerifyOptions {
        seed: cli.seed.unwrap_or(0),
        inject_sign_flip: a.inject_fault,
    };
    let reports = run_all(&suites, &opts)?;
    let mut ok = true;
    for r in &reports {
        print!("{}", r.render());
        ok &= r.passed();
    }
    println!("{}", if ok { "all suites passed" } else { "verification FAILED" });
    if ok {
        Ok(())
    } else {
        Err(Failure::ChecksFailed)
    }
}
