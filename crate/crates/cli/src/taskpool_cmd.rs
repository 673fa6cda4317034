//! Submission-time sweep and sleep-task efficiency demo on a process pool.

use std::path::PathBuf;
use std::time::Duration;

use dfno_taskpool::{weak_scaling_efficiency, Arg, ObjectStore, WorkerCommand, WorkerPool};
use serde::{Deserialize, Serialize};

use crate::report::{fmt_f64, median, print_flush};
use crate::{CliError, Result};

pub const DEFAULT_SWEEP: [usize; 8] = [16, 32, 64, 128, 256, 512, 1024, 2048];
const JOB_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone)]
pub struct TaskpoolOptions {
    pub workers: usize,
    pub tasks: Vec<usize>,
    /// Submissions per sweep point; the median is reported.
    pub repeats: usize,
    pub sleep_tasks: usize,
    pub sleep_ms: u64,
    /// Store directory; when absent, a temporary one (memory-backed where
    /// `/dev/shm` exists).
    pub store: Option<PathBuf>,
    /// Worker executable and the arguments selecting its worker mode.
    pub worker: WorkerCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tasks: usize,
    pub workers: usize,
    pub submit_s: String,
    pub makespan_s: String,
}

pub const SWEEP_HEADER: [&str; 4] = ["tasks", "workers", "submit_s", "makespan_s"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRow {
    pub tasks: usize,
    pub workers: usize,
    pub task_ms: u64,
    pub makespan_s: String,
    pub efficiency: String,
}

pub const DEMO_HEADER: [&str; 5] = ["tasks", "workers", "task_ms", "makespan_s", "efficiency"];

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct TaskpoolReport {
    pub sweep: Vec<SweepRow>,
    pub demo: Option<DemoRow>,
    pub checks: Vec<Check>,
}

/// Coefficient of determination of the least-squares line through `points`.
pub fn linear_fit_r2(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return f64::NAN;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy * sxy / (sxx * syy)
}

pub fn run(opts: &TaskpoolOptions) -> Result<TaskpoolReport> {
    if opts.workers == 0 || opts.repeats == 0 || opts.tasks.contains(&0) {
        return Err(CliError::Usage("workers, repeats and task counts must be positive".into()));
    }
    let tmp;
    let root = match &opts.store {
        Some(p) => p.clone(),
        None => {
            // a memory-backed directory keeps disk write-back jitter out of
            // the submission timings
            let shm = std::path::Path::new("/dev/shm");
            tmp = if shm.is_dir() { tempfile::tempdir_in(shm).or_else(|_| tempfile::tempdir())? } else { tempfile::tempdir()? };
            tmp.path().to_path_buf()
        }
    };
    let store = ObjectStore::open(&root)?;
    let pool = WorkerPool::start(opts.workers, &opts.worker, store)?;

    // discarded warm-up submission
    pool.submit_job("noop", &[], opts.tasks[0])?.wait(JOB_TIMEOUT)?;

    // repeats are interleaved across sizes so slow drift affects all alike
    let mut submits = vec![Vec::with_capacity(opts.repeats); opts.tasks.len()];
    let mut spans = vec![Vec::with_capacity(opts.repeats); opts.tasks.len()];
    for _ in 0..opts.repeats {
        for (k, &n) in opts.tasks.iter().enumerate() {
            let h = pool.submit_job("noop", &[], n)?;
            let report = h.wait(JOB_TIMEOUT)?;
            if !report.failed.is_empty() {
                return Err(CliError::Failed(format!("{} no-op tasks failed", report.failed.len())));
            }
            submits[k].push(h.submit_time.as_secs_f64());
            spans[k].push(report.makespan.as_secs_f64());
        }
    }
    let mut sweep = Vec::new();
    let mut points = Vec::new();
    for (k, &n) in opts.tasks.iter().enumerate() {
        let (s, m) = (median(&submits[k]), median(&spans[k]));
        print_flush(&format!("submit n={n:>5}: {:.4} s (makespan {:.3} s)", s, m));
        points.push((n as f64, s));
        sweep.push(SweepRow { tasks: n, workers: opts.workers, submit_s: fmt_f64(s), makespan_s: fmt_f64(m) });
    }

    let mut demo = None;
    let mut checks = Vec::new();
    if opts.sleep_tasks > 0 {
        let arg = Arg::Value(opts.sleep_ms.to_string().into_bytes());
        let h = pool.submit_job("sleep", &[arg], opts.sleep_tasks)?;
        let report = h.wait(JOB_TIMEOUT + Duration::from_millis(opts.sleep_ms * opts.sleep_tasks as u64))?;
        let eff = weak_scaling_efficiency(&report.durations, opts.workers, report.makespan);
        print_flush(&format!(
            "sleep demo: {} x {} ms on {} workers, makespan {:.3} s, efficiency {:.4}",
            opts.sleep_tasks,
            opts.sleep_ms,
            opts.workers,
            report.makespan.as_secs_f64(),
            eff
        ));
        demo = Some(DemoRow {
            tasks: opts.sleep_tasks,
            workers: opts.workers,
            task_ms: opts.sleep_ms,
            makespan_s: fmt_f64(report.makespan.as_secs_f64()),
            efficiency: fmt_f64(eff),
        });
        if opts.sleep_tasks == opts.workers {
            checks.push(Check { name: "sleep_efficiency > 0.9".into(), value: eff, pass: eff > 0.9 });
        }
    }

    let linear: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.0 >= 64.0).collect();
    if linear.len() >= 3 {
        let r2 = linear_fit_r2(&linear);
        checks.push(Check { name: "submit_linear_fit_r2(n>=64) > 0.9".into(), value: r2, pass: r2 > 0.9 });
        let drops = linear.windows(2).filter(|w| w[1].1 < w[0].1).count();
        checks.push(Check { name: "submit_decreases_beyond_64 = 0".into(), value: drops as f64, pass: drops == 0 });
    }
    let at = |n: f64| points.iter().find(|p| p.0 == n).map(|p| p.1);
    if let (Some(a), Some(b)) = (at(1024.0), at(2048.0)) {
        let ratio = b / a;
        checks.push(Check { name: "submit_ratio_2048/1024 in [1.5,2.5]".into(), value: ratio, pass: (1.5..=2.5).contains(&ratio) });
    }
    Ok(TaskpoolReport { sweep, demo, checks })
}
