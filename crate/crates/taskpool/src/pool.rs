use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{select, unbounded, Receiver, Sender};

use crate::task::{encode_payloads, Arg, ArgSource, RemoteRef, TaskSpec};
use crate::{lookup, ObjectStore, Result, TaskError};

/// How to launch one worker process; the pool appends `--store <root>`.
#[derive(Debug, Clone)]
pub struct WorkerCommand {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl WorkerCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        WorkerCommand { program: program.into(), args: Vec::new() }
    }

    pub fn arg(mut self, a: impl Into<String>) -> Self {
        self.args.push(a.into());
        self
    }
}

#[derive(Debug, Clone, Copy)]
struct Completion {
    task_index: usize,
    duration: Duration,
    ok: bool,
}

enum Cmd {
    Enqueue { job_id: String, n_tasks: usize, reply: Sender<Completion> },
    Shutdown,
}

enum Event {
    Line(usize, String),
    Exited(usize),
}

/// A fixed set of pre-started worker processes fed by one scheduler thread.
pub struct WorkerPool {
    store: ObjectStore,
    size: usize,
    cmd: Sender<Cmd>,
    scheduler: Option<JoinHandle<()>>,
}

/// Outcome of one submitted job.
#[derive(Debug, Clone)]
pub struct JobReport {
    /// Worker-measured run time per task, indexed by task.
    pub durations: Vec<Duration>,
    pub failed: Vec<usize>,
    /// From the end of submission to the last completion.
    pub makespan: Duration,
}

pub struct JobHandle {
    pub job_id: String,
    pub refs: Vec<RemoteRef>,
    /// Wall time spent uploading specs and arguments.
    pub submit_time: Duration,
    enqueued_at: Instant,
    completions: Receiver<Completion>,
}

impl JobHandle {
    /// Blocks until every task has reported back.
    pub fn wait(&self, timeout: Duration) -> Result<JobReport> {
        let n = self.refs.len();
        let mut durations = vec![Duration::ZERO; n];
        let mut failed = Vec::new();
        let deadline = self.enqueued_at + timeout;
        for _ in 0..n {
            let left = deadline.saturating_duration_since(Instant::now());
            let c = self.completions.recv_timeout(left).map_err(|_| TaskError::Timeout(timeout))?;
            durations[c.task_index] = c.duration;
            if !c.ok {
                failed.push(c.task_index);
            }
        }
        failed.sort_unstable();
        Ok(JobReport { durations, failed, makespan: self.enqueued_at.elapsed() })
    }
}

impl WorkerPool {
    /// Spawns `size` workers and waits until each has announced itself.
    pub fn start(size: usize, command: &WorkerCommand, store: ObjectStore) -> Result<Self> {
        if size == 0 {
            return Err(TaskError::Pool("pool size must be at least 1".into()));
        }
        let (ev_tx, ev_rx) = unbounded();
        let mut children = Vec::with_capacity(size);
        let mut stdins = Vec::with_capacity(size);
        for w in 0..size {
            let mut child = Command::new(&command.program)
                .args(&command.args)
                .arg("--store")
                .arg(store.root())
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|e| TaskError::Pool(format!("spawning {}: {e}", command.program.display())))?;
            stdins.push(child.stdin.take().expect("piped stdin"));
            let stdout = child.stdout.take().expect("piped stdout");
            let tx = ev_tx.clone();
            std::thread::spawn(move || {
                for line in BufReader::new(stdout).lines() {
                    match line {
                        Ok(l) => {
                            let _ = tx.send(Event::Line(w, l));
                        }
                        Err(_) => break,
                    }
                }
                let _ = tx.send(Event::Exited(w));
            });
            children.push(child);
        }
        let mut ready = 0;
        while ready < size {
            match ev_rx.recv_timeout(Duration::from_secs(30)) {
                Ok(Event::Line(_, l)) if l == "ready" => ready += 1,
                Ok(Event::Line(w, l)) => return Err(TaskError::Pool(format!("worker {w} said `{l}` before ready"))),
                Ok(Event::Exited(w)) => return Err(TaskError::Pool(format!("worker {w} exited during startup"))),
                Err(_) => return Err(TaskError::Pool("workers did not start within 30 s".into())),
            }
        }
        let (cmd_tx, cmd_rx) = unbounded();
        let scheduler = std::thread::spawn(move || Scheduler::new(children, stdins).run(cmd_rx, ev_rx));
        Ok(WorkerPool { store, size, cmd: cmd_tx, scheduler: Some(scheduler) })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn store(&self) -> &ObjectStore {
        &self.store
    }

    /// Writes one spec and one argument blob per task, then queues the tasks.
    /// [`Arg::Ref`] arguments are passed by key and never re-uploaded.
    pub fn submit_job(&self, callable: &str, args: &[Arg], n_tasks: usize) -> Result<JobHandle> {
        if lookup(callable).is_none() {
            return Err(TaskError::UnknownCallable(callable.to_string()));
        }
        if let Some(Arg::PerTask(v)) = args.iter().find(|a| matches!(a, Arg::PerTask(v) if v.len() != n_tasks)) {
            return Err(TaskError::Malformed(format!("{} per-task payloads for {n_tasks} tasks", v.len())));
        }
        let start = Instant::now();
        let job_id = uuid::Uuid::new_v4().simple().to_string();
        let mut refs = Vec::with_capacity(n_tasks);
        for i in 0..n_tasks {
            let mut sources = Vec::with_capacity(args.len());
            let mut inline: Vec<&[u8]> = Vec::new();
            for a in args {
                match a {
                    Arg::Ref(r) => sources.push(ArgSource::Ref(r.key().to_string())),
                    Arg::Value(v) => {
                        sources.push(ArgSource::Inline(inline.len()));
                        inline.push(v);
                    }
                    Arg::PerTask(v) => {
                        sources.push(ArgSource::Inline(inline.len()));
                        inline.push(&v[i]);
                    }
                }
            }
            let spec = TaskSpec::new(&job_id, i, callable, sources);
            self.store.put(&spec.args_key(), &encode_payloads(&inline))?;
            self.store.put(&spec.spec_key(), &spec.to_bytes())?;
            refs.push(RemoteRef::for_task(&spec));
        }
        let submit_time = start.elapsed();
        let (tx, rx) = unbounded();
        let enqueued_at = Instant::now();
        self.cmd
            .send(Cmd::Enqueue { job_id: job_id.clone(), n_tasks, reply: tx })
            .map_err(|_| TaskError::Pool("scheduler stopped".into()))?;
        Ok(JobHandle { job_id, refs, submit_time, enqueued_at, completions: rx })
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        let _ = self.cmd.send(Cmd::Shutdown);
        if let Some(h) = self.scheduler.take() {
            let _ = h.join();
        }
    }
}

struct Scheduler {
    children: Vec<Child>,
    stdins: Vec<Option<ChildStdin>>,
    idle: VecDeque<usize>,
    queue: VecDeque<(String, usize)>,
    jobs: HashMap<String, (Sender<Completion>, usize)>,
    running: HashMap<usize, (String, usize)>,
}

impl Scheduler {
    fn new(children: Vec<Child>, stdins: Vec<ChildStdin>) -> Self {
        let idle = (0..children.len()).collect();
        Scheduler {
            children,
            stdins: stdins.into_iter().map(Some).collect(),
            idle,
            queue: VecDeque::new(),
            jobs: HashMap::new(),
            running: HashMap::new(),
        }
    }

    fn run(mut self, cmds: Receiver<Cmd>, events: Receiver<Event>) {
        loop {
            select! {
                recv(cmds) -> c => match c {
                    Ok(Cmd::Enqueue { job_id, n_tasks, reply }) => {
                        self.queue.extend((0..n_tasks).map(|i| (job_id.clone(), i)));
                        self.jobs.insert(job_id, (reply, n_tasks));
                    }
                    Ok(Cmd::Shutdown) | Err(_) => break,
                },
                recv(events) -> e => match e {
                    Ok(Event::Line(w, line)) => self.on_line(w, &line),
                    Ok(Event::Exited(w)) => self.on_exit(w),
                    Err(_) => break,
                },
            }
            self.dispatch();
        }
        // closing stdin ends each worker's loop
        self.stdins.iter_mut().for_each(|s| drop(s.take()));
        for c in &mut self.children {
            let _ = c.wait();
        }
    }

    fn dispatch(&mut self) {
        while !self.queue.is_empty() {
            let Some(w) = self.idle.pop_front() else { return };
            let (job, idx) = self.queue.pop_front().expect("non-empty");
            let sent = match self.stdins[w].as_mut() {
                Some(s) => writeln!(s, "run {job} {idx}").and_then(|_| s.flush()).is_ok(),
                None => false,
            };
            if sent {
                self.running.insert(w, (job, idx));
            } else {
                self.stdins[w] = None;
                self.complete(&job, Completion { task_index: idx, duration: Duration::ZERO, ok: false });
            }
        }
    }

    fn complete(&mut self, job: &str, c: Completion) {
        if let Some((tx, left)) = self.jobs.get_mut(job) {
            let _ = tx.send(c);
            *left -= 1;
            if *left == 0 {
                self.jobs.remove(job);
            }
        }
    }

    fn on_line(&mut self, w: usize, line: &str) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if let ["done", job, idx, nanos, status] = parts.as_slice() {
            let c = Completion {
                task_index: idx.parse().unwrap_or(0),
                duration: Duration::from_nanos(nanos.parse().unwrap_or(0)),
                ok: *status == "ok",
            };
            self.running.remove(&w);
            self.complete(job, c);
            self.idle.push_back(w);
        }
    }

    fn on_exit(&mut self, w: usize) {
        self.stdins[w] = None;
        self.idle.retain(|&i| i != w);
        if let Some((job, idx)) = self.running.remove(&w) {
            self.complete(&job, Completion { task_index: idx, duration: Duration::ZERO, ok: false });
        }
    }
}
