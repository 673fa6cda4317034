//! Clusterless task execution at desk scale.
//!
//! Tasks are described by a serialized [`TaskSpec`] naming a registered
//! callable, written to a directory-backed [`ObjectStore`] and executed by a
//! fixed pool of worker processes. Outputs are resolved through
//! [`RemoteRef`]s; large shared inputs are uploaded once with
//! [`broadcast_value`] and referenced by key from every task.
//!
//! Store layout:
//!
//! ```text
//! <root>/objects/<id>                              broadcast payloads
//! <root>/jobs/<job>/tasks/<task>/{spec,args,out,err}
//! ```

mod pool;
mod registry;
mod store;
mod task;
pub mod worker;

use std::time::Duration;

use thiserror::Error;

pub use pool::{JobHandle, JobReport, WorkerCommand, WorkerPool};
pub use registry::{lookup, registered, Callable, TaskContext};
pub use store::{ObjectStore, StoreCounters};
pub use task::{broadcast_value, Arg, ArgSource, RemoteRef, TaskSpec};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown callable `{0}`")]
    UnknownCallable(String),
    #[error("store key `{0}` already written")]
    KeyExists(String),
    #[error("store i/o on `{key}`: {source}")]
    Store {
        key: String,
        #[source]
        source: std::io::Error,
    },
    #[error("task {task} failed: {message}")]
    TaskFailed { task: String, message: String },
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("malformed task data: {0}")]
    Malformed(String),
}

pub type Result<T, E = TaskError> = std::result::Result<T, E>;

/// `(Σ durations / workers) / makespan`: the fraction of the pool's capacity
/// over the makespan that was spent running tasks.
pub fn weak_scaling_efficiency(durations: &[Duration], workers: usize, makespan: Duration) -> f64 {
    if workers == 0 || makespan.is_zero() {
        return 0.0;
    }
    let busy: f64 = durations.iter().map(Duration::as_secs_f64).sum();
    busy / workers as f64 / makespan.as_secs_f64()
}
