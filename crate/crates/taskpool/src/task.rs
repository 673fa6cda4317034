use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::{ObjectStore, Result, TaskError};

/// How a task receives one positional argument.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArgSource {
    /// Index into the task's own `args` blob.
    Inline(usize),
    /// A store key written once (e.g. by [`broadcast_value`]).
    Ref(String),
}

/// Serialized description of one task, stored under `<task dir>/spec`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub job_id: String,
    pub task_index: usize,
    pub callable: String,
    pub args: Vec<ArgSource>,
    pub output_key: String,
    pub error_key: String,
}

pub(crate) fn task_dir(job_id: &str, task_index: usize) -> String {
    format!("jobs/{job_id}/tasks/{task_index}")
}

impl TaskSpec {
    pub fn new(job_id: &str, task_index: usize, callable: &str, args: Vec<ArgSource>) -> Self {
        let dir = task_dir(job_id, task_index);
        TaskSpec {
            job_id: job_id.to_string(),
            task_index,
            callable: callable.to_string(),
            args,
            output_key: format!("{dir}/out"),
            error_key: format!("{dir}/err"),
        }
    }

    pub fn spec_key(&self) -> String {
        format!("{}/spec", task_dir(&self.job_id, self.task_index))
    }

    pub fn args_key(&self) -> String {
        format!("{}/args", task_dir(&self.job_id, self.task_index))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("task spec serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| TaskError::Malformed(format!("task spec: {e}")))
    }
}

/// An argument at submission time.
#[derive(Debug, Clone)]
pub enum Arg {
    /// Passed by reference; nothing is uploaded per task.
    Ref(RemoteRef),
    /// The same bytes for every task, uploaded with each task.
    Value(Vec<u8>),
    /// One payload per task.
    PerTask(Vec<Vec<u8>>),
}

/// `u32` count, then per payload a `u64` length and the bytes (all little endian).
pub(crate) fn encode_payloads(payloads: &[&[u8]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + payloads.iter().map(|p| 8 + p.len()).sum::<usize>());
    out.extend_from_slice(&(payloads.len() as u32).to_le_bytes());
    for p in payloads {
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(p);
    }
    out
}

pub(crate) fn decode_payloads(bytes: &[u8]) -> Result<Vec<Vec<u8>>> {
    let bad = || TaskError::Malformed("argument blob is truncated".into());
    let (count, mut rest) = bytes.split_at_checked(4).ok_or_else(bad)?;
    let count = u32::from_le_bytes(count.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (len, tail) = rest.split_at_checked(8).ok_or_else(bad)?;
        let len = u64::from_le_bytes(len.try_into().unwrap()) as usize;
        let (payload, tail) = tail.split_at_checked(len).ok_or_else(bad)?;
        out.push(payload.to_vec());
        rest = tail;
    }
    Ok(out)
}

/// Handle to a store object that may not exist yet. The first successful
/// [`fetch`](RemoteRef::fetch) caches the bytes; later calls never touch the store.
#[derive(Debug, Clone)]
pub struct RemoteRef {
    key: String,
    error_key: Option<String>,
    cache: OnceLock<Vec<u8>>,
}

const POLL: Duration = Duration::from_millis(1);

impl RemoteRef {
    pub fn new(key: impl Into<String>) -> Self {
        RemoteRef { key: key.into(), error_key: None, cache: OnceLock::new() }
    }

    pub(crate) fn for_task(spec: &TaskSpec) -> Self {
        RemoteRef { key: spec.output_key.clone(), error_key: Some(spec.error_key.clone()), cache: OnceLock::new() }
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn is_cached(&self) -> bool {
        self.cache.get().is_some()
    }

    /// Blocks until the object exists (or its task recorded an error) or
    /// `timeout` elapses.
    pub fn fetch(&self, store: &ObjectStore, timeout: Duration) -> Result<&[u8]> {
        if let Some(v) = self.cache.get() {
            return Ok(v);
        }
        let start = Instant::now();
        loop {
            if store.contains(&self.key) {
                if let Some(v) = store.get(&self.key)? {
                    return Ok(self.cache.get_or_init(|| v));
                }
            }
            if let Some(ek) = &self.error_key {
                if store.contains(ek) {
                    let message = store.get(ek)?.map(|m| String::from_utf8_lossy(&m).into_owned()).unwrap_or_default();
                    return Err(TaskError::TaskFailed { task: self.key.trim_end_matches("/out").to_string(), message });
                }
            }
            if start.elapsed() >= timeout {
                return Err(TaskError::Timeout(timeout));
            }
            std::thread::sleep(POLL);
        }
    }
}

/// Uploads `payload` once under `objects/<id>` and returns a reference any
/// number of tasks can take as an argument.
pub fn broadcast_value(store: &ObjectStore, payload: &[u8]) -> Result<RemoteRef> {
    let key = format!("objects/{}", uuid::Uuid::new_v4().simple());
    store.put(&key, payload)?;
    let r = RemoteRef::new(key);
    let _ = r.cache.set(payload.to_vec());
    Ok(r)
}
