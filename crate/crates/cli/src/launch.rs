//! Running one collective job on P ranks, in-process or as child processes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use dfno_core::comm::{run_inproc_with_timeout, Communicator, Rendezvous, SocketTransport};
use dfno_core::fno::FnoConfig;
use serde::{Deserialize, Serialize};

use crate::opts::TransportKind;
use crate::scale::{ScaleJob, ScaleSample};
use crate::suites::{CaseRecord, SuiteJob};
use crate::train::{TrainJob, TrainOutcome};
use crate::{CliError, Result};

/// Receive timeout for rank-to-rank messages. Generous because some ranks do
/// serial work (oracles, data generation) between collectives.
pub const RANK_TIMEOUT: Duration = Duration::from_secs(900);

/// Serializable mirror of [`FnoConfig`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigSpec {
    pub batch: usize,
    pub grid: [usize; 4],
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub num_blocks: usize,
    pub modes: [usize; 4],
    pub activation: String,
    pub num_ranks: usize,
}

impl From<&FnoConfig> for ConfigSpec {
    fn from(c: &FnoConfig) -> Self {
        ConfigSpec {
            batch: c.batch,
            grid: c.grid,
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            width: c.width,
            num_blocks: c.num_blocks,
            modes: c.modes,
            activation: c.activation.name().to_string(),
            num_ranks: c.num_ranks,
        }
    }
}

impl ConfigSpec {
    pub fn config(&self) -> Result<FnoConfig> {
        Ok(FnoConfig {
            batch: self.batch,
            grid: self.grid,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            width: self.width,
            num_blocks: self.num_blocks,
            modes: self.modes,
            activation: self.activation.parse().map_err(CliError::Usage)?,
            num_ranks: self.num_ranks,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum RankJob {
    Suites(SuiteJob),
    Scale(ScaleJob),
    Train(TrainJob),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum RankOutput {
    Suites(Vec<CaseRecord>),
    Scale(ScaleSample),
    Train(TrainOutcome),
}

/// What a rank process leaves behind for the launcher.
#[derive(Debug, Serialize, Deserialize)]
enum RankFile {
    Ok(RankOutput),
    Err { code: i32, message: String },
}

pub fn execute(comm: &mut Communicator, job: &RankJob) -> Result<RankOutput> {
    match job {
        RankJob::Suites(j) => crate::suites::run(comm, j).map(RankOutput::Suites),
        RankJob::Scale(j) => crate::scale::run(comm, j).map(RankOutput::Scale),
        RankJob::Train(j) => crate::train::run(comm, j).map(RankOutput::Train),
    }
}

/// How multi-rank jobs are started.
#[derive(Debug, Clone)]
pub struct Launcher {
    pub transport: TransportKind,
    /// Executable providing the hidden `rank` subcommand (process transport).
    pub program: PathBuf,
}

impl Launcher {
    pub fn new(transport: TransportKind) -> Result<Self> {
        Ok(Launcher { transport, program: std::env::current_exe()? })
    }

    /// Runs `job` on `world` ranks and returns rank 0's output.
    pub fn run(&self, world: usize, job: &RankJob) -> Result<RankOutput> {
        match self.transport {
            TransportKind::Inproc => {
                let mut results = run_inproc_with_timeout(world, RANK_TIMEOUT, |comm| execute(comm, job))?;
                // report the lowest failing rank; a peer's failure usually
                // surfaces on the others as a disconnect or timeout
                if let Some(pos) = results.iter().position(Result::is_err) {
                    return Err(results.swap_remove(pos).err().expect("checked"));
                }
                Ok(results.swap_remove(0).expect("checked"))
            }
            TransportKind::Proc => self.run_processes(world, job),
        }
    }

    fn run_processes(&self, world: usize, job: &RankJob) -> Result<RankOutput> {
        let dir = tempfile::tempdir()?;
        let job_path = dir.path().join("job.json");
        fs::write(&job_path, serde_json::to_vec(job).map_err(|e| CliError::Rank(e.to_string()))?)?;
        let rendezvous = Rendezvous::bind()?;
        let addr = rendezvous.addr()?;
        let server = std::thread::spawn(move || rendezvous.serve(world, RANK_TIMEOUT));
        let mut children = Vec::with_capacity(world);
        for r in 0..world {
            let child = Command::new(&self.program)
                .arg("rank")
                .args(["--rank", &r.to_string(), "--world-size", &world.to_string()])
                .args(["--rendezvous", &addr.to_string()])
                .arg("--job")
                .arg(&job_path)
                .arg("--result")
                .arg(result_path(dir.path(), r))
                .stdin(Stdio::null())
                .spawn()?;
            children.push(child);
        }
        let mut statuses = Vec::with_capacity(world);
        for mut c in children {
            statuses.push(c.wait()?);
        }
        server.join().map_err(|_| CliError::Rank("rendezvous thread panicked".into()))??;
        let mut outputs = Vec::with_capacity(world);
        for (r, status) in statuses.iter().enumerate() {
            let file = fs::read(result_path(dir.path(), r))
                .map_err(|_| CliError::Rank(format!("rank {r} exited with {status} and left no result")))?;
            match serde_json::from_slice(&file).map_err(|e| CliError::Rank(format!("rank {r}: {e}")))? {
                RankFile::Ok(o) => outputs.push(o),
                RankFile::Err { code: 2, message } => return Err(CliError::Infeasible(format!("rank {r}: {message}"))),
                RankFile::Err { message, .. } => return Err(CliError::Rank(format!("rank {r}: {message}"))),
            }
        }
        Ok(outputs.swap_remove(0))
    }
}

fn result_path(dir: &Path, rank: usize) -> PathBuf {
    dir.join(format!("result-{rank}.json"))
}

/// Body of the hidden `rank` subcommand: joins the job's socket group, runs
/// it, and records the outcome in `result`.
pub fn rank_main(rank: usize, world: usize, rendezvous: &str, job: &Path, result: &Path) -> Result<()> {
    let addr = rendezvous.parse().map_err(|e| CliError::Usage(format!("rendezvous `{rendezvous}`: {e}")))?;
    let job: RankJob = serde_json::from_slice(&fs::read(job)?).map_err(|e| CliError::Usage(format!("job file: {e}")))?;
    let transport = SocketTransport::connect(rank, world, addr, RANK_TIMEOUT)?;
    let mut comm = Communicator::new(transport);
    let outcome = match execute(&mut comm, &job) {
        Ok(o) => RankFile::Ok(o),
        Err(e) => RankFile::Err { code: e.exit_code(), message: e.to_string() },
    };
    let failed = matches!(outcome, RankFile::Err { .. });
    fs::write(result, serde_json::to_vec(&outcome).map_err(|e| CliError::Rank(e.to_string()))?)?;
    if failed {
        return Err(CliError::Rank(format!("rank {rank} failed")));
    }
    Ok(())
}
