//! Callables are looked up by key in a fixed registry compiled into both the
//! submitting process and the workers.

use std::time::Duration;

/// What a running task knows about itself.
#[derive(Debug, Clone)]
pub struct TaskContext {
    pub job_id: String,
    pub task_index: usize,
}

pub type Callable = fn(&TaskContext, &[Vec<u8>]) -> std::result::Result<Vec<u8>, String>;

const REGISTRY: &[(&str, Callable)] = &[
    ("noop", noop),
    ("hello", hello),
    ("sleep", sleep),
    ("fail", fail),
    ("payload_len", payload_len),
    ("concat", concat),
];

pub fn lookup(key: &str) -> Option<Callable> {
    REGISTRY.iter().find(|(k, _)| *k == key).map(|&(_, f)| f)
}

pub fn registered() -> impl Iterator<Item = &'static str> {
    REGISTRY.iter().map(|(k, _)| *k)
}

fn noop(_: &TaskContext, _: &[Vec<u8>]) -> std::result::Result<Vec<u8>, String> {
    Ok(Vec::new())
}

fn hello(ctx: &TaskContext, _: &[Vec<u8>]) -> std::result::Result<Vec<u8>, String> {
    Ok(format!("hello from task {}", ctx.task_index).into_bytes())
}

/// First argument: sleep duration in milliseconds, as decimal text.
fn sleep(_: &TaskContext, args: &[Vec<u8>]) -> std::result::Result<Vec<u8>, String> {
    let ms: u64 = args
        .first()
        .and_then(|a| std::str::from_utf8(a).ok())
        .and_then(|s| s.trim().parse().ok())
        .ok_or("sleep expects a millisecond count")?;
    std::thread::sleep(Duration::from_millis(ms));
    Ok(ms.to_string().into_bytes())
}

/// Always fails; the first argument (if any) is the message.
fn fail(_: &TaskContext, args: &[Vec<u8>]) -> std::result::Result<Vec<u8>, String> {
    Err(args.first().map_or_else(|| "failed".to_string(), |a| String::from_utf8_lossy(a).into_owned()))
}

/// Total argument bytes, as decimal text.
fn payload_len(_: &TaskContext, args: &[Vec<u8>]) -> std::result::Result<Vec<u8>, String> {
    Ok(args.iter().map(Vec::len).sum::<usize>().to_string().into_bytes())
}

fn concat(_: &TaskContext, args: &[Vec<u8>]) -> std::result::Result<Vec<u8>, String> {
    Ok(args.concat())
}
