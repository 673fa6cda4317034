use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfno_bench::launch::{rank_main, ConfigSpec, Launcher, RankJob, RankOutput};
use dfno_bench::opts::{CommonOpts, CountList};
use dfno_bench::report::{csv_string, write_csv};
use dfno_bench::scale::{scale, ScaleMode};
use dfno_bench::suites::{Suite, SuiteJob};
use dfno_bench::taskpool_cmd::{self, TaskpoolOptions, DEFAULT_SWEEP};
use dfno_bench::train::TrainJob;
use dfno_bench::{check_feasible, CliError, Result};
use dfno_taskpool::WorkerCommand;

#[derive(Parser)]
#[command(name = "dfno", version, about = "Tensor-parallel FNO: parity checks, scaling benchmarks, training demo, task pool")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Oracle parity, adjoint, gradient and communication-volume suites.
    Parity(ParityArgs),
    /// Weak and strong scaling timings.
    Scale(ScaleArgs),
    /// Train on synthetic teacher-generated data.
    Train(TrainArgs),
    /// Task submission sweep and sleep-task efficiency demo.
    Taskpool(TaskpoolArgs),
    #[command(hide = true)]
    Rank(RankArgs),
    #[command(hide = true, disable_help_flag = true)]
    TaskWorker {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

#[derive(Args)]
struct ParityArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Suites to run (repeatable); all four by default.
    #[arg(long = "suite", value_enum)]
    suites: Vec<Suite>,
}

#[derive(Args)]
struct ScaleArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long, value_enum, default_value_t = ScaleMode::Both)]
    mode: ScaleMode,
    /// Rank counts to measure; P = 1 is always included.
    #[arg(long, default_value = "1,2,4")]
    worker_counts: CountList,
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Gain on the teacher's spectral weights.
    #[arg(long, default_value_t = 8.0)]
    teacher_gain: f64,
    /// Modes per spatial axis kept when smoothing input noise.
    #[arg(long, default_value_t = 3)]
    input_modes: usize,
    #[arg(long, default_value_t = 200)]
    train_samples: usize,
    #[arg(long, default_value_t = 50)]
    test_samples: usize,
    /// Checkpoint directory written after the last epoch.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Exit 1 unless the final held-out R² exceeds this.
    #[arg(long)]
    require_r2: Option<f64>,
}

#[derive(Args)]
struct TaskpoolArgs {
    #[arg(long, default_value_t = 8)]
    workers: usize,
    /// Task counts of the submission sweep.
    #[arg(long)]
    tasks: Option<CountList>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Sleep tasks in the efficiency demo; 0 skips it.
    #[arg(long, default_value_t = 8)]
    sleep_tasks: usize,
    #[arg(long, default_value_t = 2000)]
    sleep_ms: u64,
    #[arg(long)]
    store: Option<PathBuf>,
    /// Sweep CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sleep-demo CSV.
    #[arg(long)]
    demo_out: Option<PathBuf>,
    /// Exit 1 when a timing check fails.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    rank: usize,
    #[arg(long)]
    world_size: usize,
    #[arg(long)]
    rendezvous: String,
    #[arg(long)]
    job: PathBuf,
    #[arg(long)]
    result: PathBuf,
}

fn emit<R: serde::Serialize>(out: Option<&PathBuf>, header: &[&str], rows: &[R]) -> Result<()> {
    match out {
        Some(p) => write_csv(p, header, rows),
        None => {
            use std::io::Write;
            // a closed pipe (e.g. `| head`) is not an error worth reporting
            let _ = std::io::stdout().lock().write_all(csv_string(header, rows)?.as_bytes());
            Ok(())
        }
    }
}

fn parity(a: ParityArgs) -> Result<ExitCode> {
    let cfg = a.common.config(a.batch);
    check_feasible(&cfg)?;
    let suites = if a.suites.is_empty() { Suite::ALL.to_vec() } else { a.suites.clone() };
    let job = SuiteJob { config: ConfigSpec::from(&cfg), dtype: a.common.dtype, seed: a.common.seed, suites: suites.clone() };
    let RankOutput::Suites(records) = Launcher::new(a.common.transport)?.run(cfg.num_ranks, &RankJob::Suites(job))? else {
        return Err(CliError::Rank("unexpected output kind".into()));
    };
    println!("config: grid {:?}, channels {}, modes {:?}, blocks {}, P={}, {:?}", cfg.grid, cfg.width, cfg.modes, cfg.num_blocks, cfg.num_ranks, a.common.dtype);
    for s in &suites {
        let rs: Vec<_> = records.iter().filter(|r| r.suite == s.name()).collect();
        let ok = rs.iter().all(|r| r.pass);
        println!("suite {:<9} {} ({} checks)", s.name(), if ok { "PASS" } else { "FAIL" }, rs.len());
        for r in rs {
            println!("  {} {:<22} {:<40} {} {}", if r.pass { "ok  " } else { "FAIL" }, r.case, r.metric, r.value, r.tolerance);
        }
    }
    emit(a.common.out.as_ref(), &dfno_bench::suites::CSV_HEADER, &records)?;
    let failing: Vec<_> = records.iter().filter(|r| !r.pass).collect();
    if failing.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for r in failing {
            eprintln!("failing case: {r:?}");
        }
        Ok(ExitCode::from(1))
    }
}

fn scale_cmd(a: ScaleArgs) -> Result<ExitCode> {
    let cfg = a.common.config(a.batch);
    let launcher = Launcher::new(a.common.transport)?;
    let rows = scale(&launcher, &cfg, a.common.dtype, a.common.seed, a.mode, &a.worker_counts.0, a.iterations)?;
    emit(a.common.out.as_ref(), &dfno_bench::scale::CSV_HEADER, &rows)?;
    let bad: Vec<_> = rows
        .iter()
        .filter(|r| {
            let e: f64 = r.efficiency.parse().unwrap_or(f64::NAN);
            !(e > 0.0 && e <= 1.5) || r.repartition_elements != r.predicted_elements
        })
        .collect();
    for r in &bad {
        eprintln!("invariant violated: {r:?}");
    }
    Ok(if bad.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = a.common.config(a.batch);
    check_feasible(&cfg)?;
    if a.batch > a.train_samples || a.test_samples == 0 {
        return Err(CliError::Usage("need batch <= train samples and at least one test sample".into()));
    }
    let job = TrainJob {
        config: ConfigSpec::from(&cfg),
        dtype: a.common.dtype,
        seed: a.common.seed,
        epochs: a.epochs,
        lr: a.lr,
        teacher_gain: a.teacher_gain,
        input_modes: a.input_modes,
        train_samples: a.train_samples,
        test_samples: a.test_samples,
        checkpoint: a.checkpoint.clone(),
    };
    let RankOutput::Train(outcome) = Launcher::new(a.common.transport)?.run(cfg.num_ranks, &RankJob::Train(job))? else {
        return Err(CliError::Rank("unexpected output kind".into()));
    };
    emit(a.common.out.as_ref(), &dfno_bench::train::CSV_HEADER, &outcome.rows)?;
    let last = *outcome.r2.last().expect("epoch 0 is always evaluated");
    if !last.is_finite() {
        eprintln!("held-out R² is not finite");
        return Ok(ExitCode::from(1));
    }
    match a.require_r2 {
        Some(min) if last <= min => {
            eprintln!("held-out R² {last} does not exceed {min}");
            Ok(ExitCode::from(1))
        }
        _ => Ok(ExitCode::SUCCESS),
    }
}

fn taskpool(a: TaskpoolArgs) -> Result<ExitCode> {
    let opts = TaskpoolOptions {
        workers: a.workers,
        tasks: a.tasks.map_or_else(|| DEFAULT_SWEEP.to_vec(), |l| l.0),
        repeats: a.repeats,
        sleep_tasks: a.sleep_tasks,
        sleep_ms: a.sleep_ms,
        store: a.store,
        worker: WorkerCommand::new(std::env::current_exe()?).arg("task-worker"),
    };
    let report = taskpool_cmd::run(&opts)?;
    emit(a.out.as_ref(), &taskpool_cmd::SWEEP_HEADER, &report.sweep)?;
    if let (Some(p), Some(d)) = (&a.demo_out, &report.demo) {
        write_csv(p, &taskpool_cmd::DEMO_HEADER, std::slice::from_ref(d))?;
    }
    for c in &report.checks {
        println!("check {:<40} {:.4} {}", c.name, c.value, if c.pass { "PASS" } else { "FAIL" });
    }
    Ok(if a.strict && report.checks.iter().any(|c| !c.pass) { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Cmd::Parity(a) => parity(a),
        Cmd::Scale(a) => scale_cmd(a),
        Cmd::Train(a) => train(a),
        Cmd::Taskpool(a) => taskpool(a),
        Cmd::Rank(a) => {
            rank_main(a.rank, a.world_size, &a.rendezvous, &a.job, &a.result)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::TaskWorker { args } => {
            dfno_taskpool::worker::main_with_args(args).map_err(CliError::Usage)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, matching the contract below
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
