//! Batch-system execution: job scripts rendered from a template, submitted
//! to an adapter, polled until done.
//!
//! The mock adapter uses a spool directory:
//!
//! ```text
//! <spool>/<jobid>.sh       job script
//! <spool>/<jobid>.state    pending | running | done:<exit>
//! <spool>/<jobid>.claim    taken by whoever moves the job out of pending
//! <spool>/<jobid>.cancel   cancellation request for a running job
//! ```
//!
//! [`run_spool`] executes spooled jobs FIFO; the `simbatch` binary is a thin
//! wrapper around it.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use super::{collect_outcome, exit_code_of, hostname, io_error, stage_inputs_into, ExecError, Executor, Outcome, TaskSpec};
use crate::cache::write_atomic;

pub const DEFAULT_TEMPLATE: &str = "#!/bin/sh
#BATCH --job-name={jobname}
#BATCH --cpus={cpus}
#BATCH --mem={memory}
#BATCH --time={walltime}
{script}
";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchJobState {
    Pending,
    Running,
    Done(i32),
    Lost,
}

impl BatchJobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, BatchJobState::Done(_) | BatchJobState::Lost)
    }

    fn parse(text: &str) -> BatchJobState {
        match text.trim() {
            "pending" => BatchJobState::Pending,
            "running" => BatchJobState::Running,
            other => other
                .strip_prefix("done:")
                .and_then(|c| c.parse().ok())
                .map(BatchJobState::Done)
                .unwrap_or(BatchJobState::Lost),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobTemplate {
    pub text: String,
}

impl Default for JobTemplate {
    fn default() -> Self {
        JobTemplate { text: DEFAULT_TEMPLATE.to_string() }
    }
}

impl JobTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        JobTemplate { text: text.into() }
    }

    pub fn from_file(path: &Path) -> io::Result<Self> {
        Ok(JobTemplate { text: fs::read_to_string(path)? })
    }

    /// Substitutes placeholders line by line. A line mentioning a hint the
    /// task does not set is dropped, so unset hints leave no header behind.
    pub fn render(&self, values: &BTreeMap<&str, Option<String>>) -> String {
        let mut out = String::new();
        'lines: for line in self.text.split_inclusive('\n') {
            let mut rendered = line.to_string();
            for (key, value) in values {
                let hole = format!("{{{key}}}");
                if rendered.contains(&hole) {
                    match value {
                        Some(v) => rendered = rendered.replace(&hole, v),
                        None => continue 'lines,
                    }
                }
            }
            out.push_str(&rendered);
        }
        out
    }
}

fn quote(s: &str) -> Result<String, ExecError> {
    shlex::try_quote(s).map(|c| c.into_owned()).map_err(|e| ExecError::Batch(format!("cannot quote `{s}`: {e}")))
}

fn quote_path(p: &Path) -> Result<String, ExecError> {
    quote(&p.to_string_lossy())
}

/// Shell lines that run the task: enter the workdir, run the wrapped
/// command with its output captured, exit with its status.
fn script_body(spec: &TaskSpec) -> Result<String, ExecError> {
    let argv = spec.full_argv().iter().map(|a| quote(a)).collect::<Result<Vec<_>, _>>()?;
    Ok(format!(
        "cd {} || exit 127\n{} > {} 2> {} < /dev/null\n",
        quote_path(&spec.workdir)?,
        argv.join(" "),
        quote_path(&spec.stdout)?,
        quote_path(&spec.stderr)?
    ))
}

/// The complete job script for `spec` under `template`.
pub fn render_job_script(template: &JobTemplate, spec: &TaskSpec) -> Result<String, ExecError> {
    let r = &spec.resources;
    let values = BTreeMap::from([
        ("cpus", r.cpus.map(|c| c.to_string())),
        ("memory", r.memory.clone()),
        ("walltime", r.walltime.clone()),
        ("jobname", Some(spec.task_id.clone())),
        ("script", Some(script_body(spec)?.trim_end().to_string())),
    ]);
    Ok(template.render(&values))
}

pub trait BatchAdapter: Send + Sync {
    fn name(&self) -> String;
    fn submit(&self, spec: &TaskSpec) -> Result<String, ExecError>;
    /// Side-effect free; unknown ids are `Lost`.
    fn poll(&self, job: &str) -> BatchJobState;
    /// Idempotent.
    fn cancel(&self, job: &str) -> Result<(), ExecError>;
}

/// Stops and joins an embedded spool runner when dropped.
pub struct RunnerHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl RunnerHandle {
    pub fn start(spool: PathBuf, concurrency: usize) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::spawn(move || {
            if let Err(e) = run_spool(&spool, concurrency, false, &flag) {
                log::error!("batch runner on {} stopped: {e}", spool.display());
            }
        });
        RunnerHandle { stop, thread: Some(thread) }
    }
}

impl Drop for RunnerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub struct MockBatch {
    spool: PathBuf,
    template: JobTemplate,
    _runner: Option<RunnerHandle>,
}

impl MockBatch {
    pub fn new(spool: impl Into<PathBuf>) -> io::Result<Self> {
        let spool = spool.into();
        fs::create_dir_all(&spool)?;
        Ok(MockBatch { spool, template: JobTemplate::default(), _runner: None })
    }

    pub fn with_template(mut self, template: JobTemplate) -> Self {
        self.template = template;
        self
    }

    /// Runs spooled jobs on a background thread of this process.
    pub fn with_embedded_runner(mut self, concurrency: usize) -> Self {
        self._runner = Some(RunnerHandle::start(self.spool.clone(), concurrency));
        self
    }

    pub fn spool(&self) -> &Path {
        &self.spool
    }

    fn file(&self, job: &str, ext: &str) -> PathBuf {
        self.spool.join(format!("{job}.{ext}"))
    }
}

fn new_job_id(task: &str) -> String {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    let name: String = task.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    let tag = uuid::Uuid::new_v4().simple().to_string();
    format!("{nanos:024}-{name}-{}", &tag[..8])
}

fn try_claim(path: &Path) -> bool {
    OpenOptions::new().write(true).create_new(true).open(path).is_ok()
}

impl BatchAdapter for MockBatch {
    fn name(&self) -> String {
        "mock".into()
    }

    fn submit(&self, spec: &TaskSpec) -> Result<String, ExecError> {
        let script = render_job_script(&self.template, spec)?;
        let id = new_job_id(&spec.task_id);
        let sh = self.file(&id, "sh");
        write_atomic(&sh, script.as_bytes()).map_err(io_error(&sh))?;
        let state = self.file(&id, "state");
        write_atomic(&state, b"pending").map_err(io_error(&state))?;
        Ok(id)
    }

    fn poll(&self, job: &str) -> BatchJobState {
        if job.contains('/') || job.is_empty() {
            return BatchJobState::Lost;
        }
        match fs::read_to_string(self.file(job, "state")) {
            Ok(text) => BatchJobState::parse(&text),
            Err(_) => BatchJobState::Lost,
        }
    }

    fn cancel(&self, job: &str) -> Result<(), ExecError> {
        match self.poll(job) {
            BatchJobState::Done(_) | BatchJobState::Lost => Ok(()),
            _ if try_claim(&self.file(job, "claim")) => {
                for ext in ["state", "sh", "claim"] {
                    let _ = fs::remove_file(self.file(job, ext));
                }
                Ok(())
            }
            _ => {
                let marker = self.file(job, "cancel");
                fs::write(&marker, b"").map_err(io_error(&marker))
            }
        }
    }
}

fn pending_jobs(spool: &Path) -> io::Result<Vec<String>> {
    let mut ids = Vec::new();
    for item in fs::read_dir(spool)? {
        let path = item?.path();
        if path.extension().is_some_and(|e| e == "state") {
            if let (Some(stem), Ok(text)) = (path.file_stem(), fs::read_to_string(&path)) {
                if BatchJobState::parse(&text) == BatchJobState::Pending {
                    ids.push(stem.to_string_lossy().into_owned());
                }
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Executes pending jobs in submission order, at most `concurrency` at a
/// time, until `stop` is set (or, with `once`, until the spool is drained).
/// Returns the number of jobs run.
pub fn run_spool(spool: &Path, concurrency: usize, once: bool, stop: &AtomicBool) -> io::Result<usize> {
    let concurrency = concurrency.max(1);
    let mut running: BTreeMap<String, Child> = BTreeMap::new();
    let mut finished = 0;
    let set_state = |id: &str, state: &str| write_atomic(&spool.join(format!("{id}.state")), state.as_bytes());
    loop {
        let mut done = Vec::new();
        for (id, child) in running.iter_mut() {
            if spool.join(format!("{id}.cancel")).exists() {
                let _ = child.kill();
            }
            if let Some(status) = child.try_wait()? {
                done.push((id.clone(), exit_code_of(status)));
            }
        }
        for (id, code) in done {
            running.remove(&id);
            set_state(&id, &format!("done:{code}"))?;
            finished += 1;
        }

        if stop.load(Ordering::SeqCst) {
            for (id, mut child) in std::mem::take(&mut running) {
                let _ = child.kill();
                let code = child.wait().map(exit_code_of).unwrap_or(-1);
                set_state(&id, &format!("done:{code}"))?;
            }
            return Ok(finished);
        }

        let pending = pending_jobs(spool)?;
        for id in &pending {
            if running.len() >= concurrency {
                break;
            }
            if !try_claim(&spool.join(format!("{id}.claim"))) {
                continue;
            }
            set_state(id, "running")?;
            let child = Command::new("sh")
                .arg(spool.join(format!("{id}.sh")))
                .current_dir(spool)
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .spawn();
            match child {
                Ok(c) => {
                    running.insert(id.clone(), c);
                }
                Err(e) => {
                    log::warn!("job {id} failed to start: {e}");
                    set_state(id, "done:127")?;
                    finished += 1;
                }
            }
        }

        if once && running.is_empty() && pending_jobs(spool)?.is_empty() {
            return Ok(finished);
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

/// Slurm via `sbatch`, `sacct` and `scancel`.
pub struct SlurmAdapter {
    pub template: JobTemplate,
    pub script_dir: PathBuf,
}

impl SlurmAdapter {
    pub fn new(template: JobTemplate, script_dir: impl Into<PathBuf>) -> Self {
        SlurmAdapter { template, script_dir: script_dir.into() }
    }
}

fn parse_sacct(text: &str) -> BatchJobState {
    let Some(line) = text.lines().map(str::trim).find(|l| !l.is_empty()) else {
        return BatchJobState::Lost;
    };
    let mut parts = line.split('|');
    let state = parts.next().unwrap_or("");
    let code = parts.next().and_then(|c| c.split(':').next()).and_then(|c| c.parse().ok()).unwrap_or(1);
    match state.split_whitespace().next().unwrap_or("") {
        "PENDING" | "REQUEUED" | "SUSPENDED" => BatchJobState::Pending,
        "RUNNING" | "COMPLETING" | "CONFIGURING" => BatchJobState::Running,
        "COMPLETED" => BatchJobState::Done(code),
        "FAILED" | "TIMEOUT" | "CANCELLED" | "NODE_FAIL" | "OUT_OF_MEMORY" | "PREEMPTED" => {
            BatchJobState::Done(if code == 0 { 1 } else { code })
        }
        _ => BatchJobState::Lost,
    }
}

impl BatchAdapter for SlurmAdapter {
    fn name(&self) -> String {
        "slurm".into()
    }

    fn submit(&self, spec: &TaskSpec) -> Result<String, ExecError> {
        let script = render_job_script(&self.template, spec)?;
        let path = self.script_dir.join(format!("{}.sh", new_job_id(&spec.task_id)));
        write_atomic(&path, script.as_bytes()).map_err(io_error(&path))?;
        let out = Command::new("sbatch")
            .arg("--parsable")
            .arg(&path)
            .output()
            .map_err(|source| ExecError::Spawn { program: "sbatch".into(), source })?;
        if !out.status.success() {
            return Err(ExecError::Batch(format!("sbatch rejected the job: {}", String::from_utf8_lossy(&out.stderr).trim())));
        }
        let id = String::from_utf8_lossy(&out.stdout).trim().split(';').next().unwrap_or("").to_string();
        if id.is_empty() {
            return Err(ExecError::Batch("sbatch printed no job id".into()));
        }
        Ok(id)
    }

    fn poll(&self, job: &str) -> BatchJobState {
        match Command::new("sacct").args(["-j", job, "-n", "-X", "-P", "-o", "State,ExitCode"]).output() {
            Ok(out) if out.status.success() => parse_sacct(&String::from_utf8_lossy(&out.stdout)),
            _ => BatchJobState::Lost,
        }
    }

    fn cancel(&self, job: &str) -> Result<(), ExecError> {
        Command::new("scancel")
            .arg(job)
            .status()
            .map(|_| ())
            .map_err(|source| ExecError::Spawn { program: "scancel".into(), source })
    }
}

/// Runs tasks as batch jobs on a filesystem shared with the engine.
pub struct BatchExecutor {
    adapter: Arc<dyn BatchAdapter>,
    poll_interval: Duration,
}

impl BatchExecutor {
    pub fn new(adapter: Arc<dyn BatchAdapter>) -> Self {
        BatchExecutor { adapter, poll_interval: Duration::from_millis(20) }
    }

    pub fn with_poll_interval(mut self, interval: Duration) -> Self {
        self.poll_interval = interval;
        self
    }
}

impl Executor for BatchExecutor {
    fn name(&self) -> String {
        format!("batch:{}", self.adapter.name())
    }

    fn execute(&self, spec: &TaskSpec) -> Result<Outcome, ExecError> {
        stage_inputs_into(spec, &spec.workdir)?;
        let job = self.adapter.submit(spec)?;
        loop {
            match self.adapter.poll(&job) {
                BatchJobState::Done(code) => return collect_outcome(spec, code, hostname()),
                BatchJobState::Lost => return Err(ExecError::Batch(format!("job {job} was lost"))),
                _ => std::thread::sleep(self.poll_interval),
            }
        }
    }
}
