//! Benchmark and verification commands for the tensor-parallel FNO.
//!
//! Every multi-rank command is expressed as a [`launch::RankJob`] that runs
//! either on in-process threads or on one child process per rank connected
//! through sockets. Rank 0's result is the command's result.
//!
//! CSV schemas (header row, comma separated, LF endings):
//!
//! | command | columns |
//! |---|---|
//! | `parity` | `suite,case,metric,value,tolerance,pass` |
//! | `scale` | `mode,workers,local_extents,t_forward_s,t_forward_backward_s,repartition_elements,predicted_elements,bytes,efficiency` |
//! | `train` | `epoch,train_loss_median,test_mse,test_mae,test_r2` |
//! | `taskpool` | `tasks,workers,submit_s,makespan_s` (sweep), `tasks,workers,task_ms,makespan_s,efficiency` (sleep demo) |

pub mod launch;
pub mod opts;
pub mod report;
pub mod scale;
pub mod suites;
pub mod synthetic;
pub mod taskpool_cmd;
pub mod train;

use dfno_core::comm::CommError;
use dfno_core::fno::FnoError;
use dfno_taskpool::TaskError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("infeasible configuration: {0}")]
    Infeasible(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Fno(#[from] FnoError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("rank process: {0}")]
    Rank(String),
}

impl CliError {
    /// 2 for usage and configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Infeasible(_) => 2,
            CliError::Fno(FnoError::Config(_) | FnoError::Partition(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Validates `config`, mapping any partition or shape problem to an
/// infeasible-configuration error.
pub fn check_feasible(config: &dfno_core::fno::FnoConfig) -> Result<()> {
    config.validate().map_err(|e| CliError::Infeasible(format!("{e} (grid {:?}, modes {:?}, P={})", config.grid, config.modes, config.num_ranks)))
}

macro_rules! via_fno {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Fno(FnoError::from(e))
            }
        }
    )*};
}

via_fno!(dfno_core::tensor::TensorError, dfno_core::spectral::SpectralError, dfno_core::partition::PartitionError);
