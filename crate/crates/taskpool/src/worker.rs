//! The worker side of the pool protocol.
//!
//! A worker is started with the store root, prints `ready`, then reads one
//! command per line from stdin:
//!
//! ```text
//! run <job-id> <task-index>
//! ```
//!
//! and answers each with `done <job-id> <task-index> <nanos> ok|err`. It exits
//! when stdin closes.

use std::io::{BufRead, Write};
use std::time::{Duration, Instant};

use crate::task::{decode_payloads, ArgSource, TaskSpec};
use crate::{lookup, ObjectStore, Result, TaskContext, TaskError};

/// Runs one task to completion, writing its `out` or `err` key. A task
/// whose output already exists is not run again.
pub fn execute_task(store: &ObjectStore, job_id: &str, task_index: usize) -> Result<(Duration, bool)> {
    let key = format!("{}/spec", crate::task::task_dir(job_id, task_index));
    let spec = TaskSpec::from_bytes(&store.get(&key)?.ok_or_else(|| TaskError::Malformed(format!("missing {key}")))?)?;
    if store.contains(&spec.output_key) {
        return Ok((Duration::ZERO, true));
    }
    let start = Instant::now();
    let outcome = run_spec(store, &spec);
    let elapsed = start.elapsed();
    let ok = match outcome {
        Ok(out) => {
            store.put(&spec.output_key, &out)?;
            true
        }
        Err(message) => {
            store.put(&spec.error_key, message.as_bytes())?;
            false
        }
    };
    Ok((elapsed, ok))
}

fn run_spec(store: &ObjectStore, spec: &TaskSpec) -> std::result::Result<Vec<u8>, String> {
    let f = lookup(&spec.callable).ok_or_else(|| format!("unknown callable `{}`", spec.callable))?;
    let inline = match store.get(&spec.args_key()).map_err(|e| e.to_string())? {
        Some(blob) => decode_payloads(&blob).map_err(|e| e.to_string())?,
        None => Vec::new(),
    };
    let mut args = Vec::with_capacity(spec.args.len());
    for a in &spec.args {
        args.push(match a {
            ArgSource::Inline(i) => inline.get(*i).cloned().ok_or_else(|| format!("inline argument {i} missing"))?,
            ArgSource::Ref(key) => store
                .get(key)
                .map_err(|e| e.to_string())?
                .ok_or_else(|| format!("referenced object `{key}` does not exist"))?,
        });
    }
    let ctx = TaskContext { job_id: spec.job_id.clone(), task_index: spec.task_index };
    f(&ctx, &args)
}

/// Serves the line protocol until `input` closes.
pub fn serve(store: &ObjectStore, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    writeln!(output, "ready")?;
    output.flush()?;
    for line in input.lines() {
        let line = line?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let reply = match parts.as_slice() {
            ["run", job, idx] => match idx.parse::<usize>() {
                Ok(i) => match execute_task(store, job, i) {
                    Ok((d, ok)) => format!("done {job} {i} {} {}", d.as_nanos(), if ok { "ok" } else { "err" }),
                    Err(e) => {
                        // record the failure so fetch does not wait forever
                        let spec = TaskSpec::new(job, i, "", Vec::new());
                        let _ = store.put(&spec.error_key, e.to_string().as_bytes());
                        format!("done {job} {i} 0 err")
                    }
                },
                Err(_) => format!("bad {line}"),
            },
            _ => format!("bad {line}"),
        };
        writeln!(output, "{reply}")?;
        output.flush()?;
    }
    Ok(())
}

/// Entry point shared by the `taskpool-worker` binary and embedding CLIs:
/// expects `--store <dir>` among `args`.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> std::result::Result<(), String> {
    let args: Vec<String> = args.into_iter().collect();
    let root = args
        .iter()
        .position(|a| a == "--store")
        .and_then(|i| args.get(i + 1))
        .ok_or("usage: taskpool-worker --store <dir>")?;
    let store = ObjectStore::open(root).map_err(|e| e.to_string())?;
    let stdin = std::io::stdin();
    serve(&store, stdin.lock(), std::io::stdout().lock()).map_err(|e| e.to_string())
}
