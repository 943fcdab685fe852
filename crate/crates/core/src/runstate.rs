//! Run journal: one JSON document per line in `runs/<run-id>/events.ndjson`,
//! appended by the run's scheduler and readable at any time.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{now_timestamp, TypedLiteral};
use crate::digest::{Digest, Fingerprint};
use crate::provenance::{OutputBinding, TaskProvRecord};

pub const JOURNAL_FILE: &str = "events.ndjson";
pub const PID_FILE: &str = "pid";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskState {
    Succeeded,
    Failed,
    Cached,
    SkippedUpToDate,
    /// A transitive dependency failed.
    Blocked,
    /// Not started because the run stopped after a failure elsewhere.
    Cancelled,
}

impl TaskState {
    pub fn is_success(self) -> bool {
        matches!(self, TaskState::Succeeded | TaskState::Cached | TaskState::SkippedUpToDate)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Succeeded => "succeeded",
            TaskState::Failed => "failed",
            TaskState::Cached => "cached",
            TaskState::SkippedUpToDate => "skipped-up-to-date",
            TaskState::Blocked => "blocked",
            TaskState::Cancelled => "cancelled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowInfo {
    pub name: String,
    pub path: Option<String>,
    pub digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub workflow: WorkflowInfo,
    pub engine_version: String,
    pub user: String,
    pub hostname: String,
    pub pid: u32,
    pub policy: String,
    pub executor: String,
    pub jobs: usize,
    pub keep_going: bool,
    pub params: BTreeMap<String, TypedLiteral>,
    pub tasks: Vec<String>,
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventBody {
    RunStarted(RunMeta),
    TaskStarted {
        task: String,
        executor: String,
    },
    TaskFinished {
        task: String,
        state: TaskState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fingerprint: Option<Fingerprint>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        exit_code: Option<i32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
        /// Present for executed and linked tasks.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        record: Option<Box<TaskProvRecord>>,
        /// For skipped tasks: the run holding the record of the reused result.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        produced_in: Option<String>,
    },
    RunFinished {
        state: RunState,
        outputs: BTreeMap<String, OutputBinding>,
    },
}

impl EventBody {
    pub fn task(&self) -> Option<&str> {
        match self {
            EventBody::TaskStarted { task, .. } | EventBody::TaskFinished { task, .. } => Some(task),
            _ => None,
        }
    }

    pub fn finished(task: &str, state: TaskState) -> Self {
        EventBody::TaskFinished {
            task: task.to_string(),
            state,
            fingerprint: None,
            exit_code: None,
            error: None,
            record: None,
            produced_in: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub seq: u64,
    pub ts: String,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal I/O error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("sequence gap: expected {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("corrupt journal line {line} in {path}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("no run in {0}")]
    NoRun(PathBuf),
}

/// Append handle; the single writer of a run's journal.
pub struct Journal {
    path: PathBuf,
    file: File,
    last_seq: u64,
}

impl Journal {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self, JournalError> {
        let path = path.into();
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)
            .map_err(|source| JournalError::Io { path: path.clone(), source })?;
        Ok(Journal { path, file, last_seq: 0 })
    }

    /// Continues an existing journal after its last well-formed event.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, JournalError> {
        let path = path.into();
        let read = read_journal(&path)?;
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|source| JournalError::Io { path: path.clone(), source })?;
        Ok(Journal { path, file, last_seq: read.events.last().map(|e| e.seq).unwrap_or(0) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Appends `e` as one line with a single write. Refuses sequence gaps.
    pub fn append_event(&mut self, e: &RunEvent) -> Result<(), JournalError> {
        if e.seq != self.last_seq + 1 {
            return Err(JournalError::SequenceGap { expected: self.last_seq + 1, got: e.seq });
        }
        let mut line = serde_json::to_string(e).expect("event serializes");
        line.push('\n');
        let io = |source| JournalError::Io { path: self.path.clone(), source };
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.sync_data().map_err(|source| JournalError::Io { path: self.path.clone(), source })?;
        self.last_seq = e.seq;
        Ok(())
    }

    /// Stamps `body` with the next sequence number and the current time.
    pub fn append(&mut self, body: EventBody) -> Result<RunEvent, JournalError> {
        let e = RunEvent { seq: self.last_seq + 1, ts: now_timestamp(), body };
        self.append_event(&e)?;
        Ok(e)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct JournalRead {
    pub events: Vec<RunEvent>,
    /// A partially written last line was dropped.
    pub torn_tail: bool,
}

/// Parses a journal, tolerating a torn final line.
pub fn read_journal(path: &Path) -> Result<JournalRead, JournalError> {
    let text = match fs::read(path) {
        Ok(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(JournalError::NoRun(path.to_path_buf())),
        Err(source) => return Err(JournalError::Io { path: path.to_path_buf(), source }),
    };
    parse_journal(&text, path)
}

pub fn parse_journal(text: &str, path: &Path) -> Result<JournalRead, JournalError> {
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let mut out = JournalRead::default();
    for (i, raw) in lines.iter().enumerate() {
        let last = i + 1 == lines.len();
        let line = raw.trim_end_matches('\n');
        if line.trim().is_empty() {
            continue;
        }
        match (serde_json::from_str::<RunEvent>(line), last) {
            (Ok(e), _) => out.events.push(e),
            (Err(_), true) => {
                log::warn!("ignoring torn last line of {}", path.display());
                out.torn_tail = true;
            }
            (Err(err), false) => {
                return Err(JournalError::Corrupt { path: path.to_path_buf(), line: i + 1, message: err.to_string() })
            }
        }
    }
    Ok(out)
}

/// Structural rules every journal obeys; returns the first violation.
pub fn check_well_formed(events: &[RunEvent]) -> Result<(), String> {
    let mut started = BTreeSet::new();
    let mut finished = BTreeSet::new();
    for (i, e) in events.iter().enumerate() {
        if e.seq != i as u64 + 1 {
            return Err(format!("event {} has sequence number {}", i + 1, e.seq));
        }
        match &e.body {
            EventBody::RunStarted(_) if i != 0 => return Err("run-started is not the first event".into()),
            EventBody::RunStarted(_) => {}
            _ if i == 0 => return Err("first event is not run-started".into()),
            EventBody::RunFinished { .. } if i + 1 != events.len() => {
                return Err("run-finished is not the last event".into())
            }
            EventBody::RunFinished { .. } => {}
            EventBody::TaskStarted { task, .. } => {
                if !started.insert(task.clone()) {
                    return Err(format!("task `{task}` started twice"));
                }
            }
            EventBody::TaskFinished { task, state, .. } => {
                if matches!(state, TaskState::Succeeded | TaskState::Failed) && !started.contains(task) {
                    return Err(format!("task `{task}` finished as {} without starting", state.as_str()));
                }
                if !finished.insert(task.clone()) {
                    return Err(format!("task `{task}` finished twice"));
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatusSnapshot {
    pub run_id: String,
    pub workflow: String,
    pub total: usize,
    pub done: usize,
    pub running: Vec<String>,
    pub pending: usize,
    pub counts: BTreeMap<TaskState, usize>,
    pub elapsed_secs: f64,
    pub terminal: bool,
    pub state: Option<RunState>,
    /// Not terminal, and the engine process is gone.
    pub interrupted: bool,
    pub torn_tail: bool,
}

fn parse_ts(ts: &str) -> Option<chrono::DateTime<chrono::Utc>> {
    chrono::DateTime::parse_from_rfc3339(ts).ok().map(|t| t.with_timezone(&chrono::Utc))
}

pub(crate) fn seconds_between(a: &str, b: &str) -> f64 {
    match (parse_ts(a), parse_ts(b)) {
        (Some(a), Some(b)) => (b - a).num_milliseconds() as f64 / 1000.0,
        _ => 0.0,
    }
}

/// Snapshot of a journal prefix.
pub fn status_of(events: &[RunEvent]) -> Option<StatusSnapshot> {
    let EventBody::RunStarted(meta) = &events.first()?.body else { return None };
    let mut running = BTreeSet::new();
    let mut done = BTreeMap::new();
    let mut state = None;
    for e in events {
        match &e.body {
            EventBody::TaskStarted { task, .. } => {
                running.insert(task.clone());
            }
            EventBody::TaskFinished { task, state, .. } => {
                running.remove(task);
                done.insert(task.clone(), *state);
            }
            EventBody::RunFinished { state: s, .. } => state = Some(*s),
            EventBody::RunStarted(_) => {}
        }
    }
    let mut counts = BTreeMap::new();
    for s in done.values() {
        *counts.entry(*s).or_insert(0) += 1;
    }
    let terminal = state.is_some();
    let end = if terminal { events.last().unwrap().ts.clone() } else { now_timestamp() };
    let total = meta.tasks.len();
    Some(StatusSnapshot {
        run_id: meta.run_id.clone(),
        workflow: meta.workflow.name.clone(),
        total,
        done: done.len(),
        running: running.into_iter().collect(),
        pending: total.saturating_sub(done.len()),
        counts,
        elapsed_secs: seconds_between(&events[0].ts, &end),
        terminal,
        state,
        interrupted: false,
        torn_tail: false,
    })
    .map(|mut s| {
        s.pending -= s.running.len().min(s.pending);
        s
    })
}

fn process_alive(pid: u32) -> Option<bool> {
    let proc = Path::new("/proc");
    if !proc.is_dir() {
        return None;
    }
    let stat = fs::read_to_string(proc.join(pid.to_string()).join("stat")).ok();
    // zombies count as gone
    Some(stat.is_some_and(|s| s.rsplit(')').next().is_some_and(|rest| !rest.trim_start().starts_with('Z'))))
}

/// Status of the run stored in `run_dir`; never needs the live process.
pub fn status(run_dir: &Path) -> Result<StatusSnapshot, JournalError> {
    let read = read_journal(&run_dir.join(JOURNAL_FILE)).map_err(|e| match e {
        JournalError::NoRun(_) => JournalError::NoRun(run_dir.to_path_buf()),
        other => other,
    })?;
    let mut snap = status_of(&read.events).ok_or_else(|| JournalError::NoRun(run_dir.to_path_buf()))?;
    snap.torn_tail = read.torn_tail;
    if !snap.terminal {
        let pid = fs::read_to_string(run_dir.join(PID_FILE)).ok().and_then(|s| s.trim().parse().ok()).or_else(|| {
            match &read.events[0].body {
                EventBody::RunStarted(m) => Some(m.pid),
                _ => None,
            }
        });
        snap.interrupted = pid.and_then(process_alive) == Some(false);
    }
    Ok(snap)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn meta(tasks: &[&str]) -> RunMeta {
        RunMeta {
            run_id: "r1".into(),
            workflow: WorkflowInfo { name: "wf".into(), path: None, digest: Digest::of_bytes("wf") },
            engine_version: "0".into(),
            user: "u".into(),
            hostname: "h".into(),
            pid: std::process::id(),
            policy: "update".into(),
            executor: "local".into(),
            jobs: 1,
            keep_going: false,
            params: BTreeMap::new(),
            tasks: tasks.iter().map(|s| s.to_string()).collect(),
            edges: vec![],
        }
    }

    fn started(t: &str) -> EventBody {
        EventBody::TaskStarted { task: t.into(), executor: "local".into() }
    }

    #[test]
    fn sequence_rules() {
        let d = tempfile::tempdir().unwrap();
        let mut j = Journal::create(d.path().join(JOURNAL_FILE)).unwrap();
        let first = RunEvent { seq: 1, ts: now_timestamp(), body: EventBody::RunStarted(meta(&["a"])) };
        j.append_event(&first).unwrap();
        let gap = RunEvent { seq: 3, ts: now_timestamp(), body: started("a") };
        assert!(matches!(j.append_event(&gap), Err(JournalError::SequenceGap { expected: 2, got: 3 })));
        assert!(Journal::create(d.path().join(JOURNAL_FILE)).is_err());
        let mut again = Journal::open(d.path().join(JOURNAL_FILE)).unwrap();
        assert_eq!(again.append(started("a")).unwrap().seq, 2);
    }

    #[test]
    fn thousand_appends_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join(JOURNAL_FILE);
        let mut j = Journal::create(&path).unwrap();
        let mut written = vec![j.append(EventBody::RunStarted(meta(&[]))).unwrap()];
        for i in 1..1000 {
            written.push(j.append(started(&format!("t{i}"))).unwrap());
        }
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1000);
        assert_eq!(read_journal(&path).unwrap().events, written);
    }

    #[test]
    fn mid_run_and_torn_tail() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join(JOURNAL_FILE);
        let mut j = Journal::create(&path).unwrap();
        j.append(EventBody::RunStarted(meta(&["mesh", "convert", "simulate", "postproc", "macros", "paper"]))).unwrap();
        j.append(started("mesh")).unwrap();
        j.append(EventBody::finished("mesh", TaskState::Succeeded)).unwrap();
        j.append(started("convert")).unwrap();
        drop(j);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"seq":5,"ts":"2026"#).unwrap();
        let s = status(d.path()).unwrap();
        assert_eq!((s.done, s.running.clone(), s.pending), (1, vec!["convert".to_string()], 4));
        assert!(s.torn_tail && !s.terminal && !s.interrupted);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let text = "garbage\n{}\n";
        assert!(matches!(parse_journal(text, Path::new("j")), Err(JournalError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn no_run() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(status(d.path()), Err(JournalError::NoRun(_))));
    }

    #[test]
    fn well_formedness() {
        let ev = |seq, body| RunEvent { seq, ts: now_timestamp(), body };
        let ok = vec![
            ev(1, EventBody::RunStarted(meta(&["a", "b"]))),
            ev(2, started("a")),
            ev(3, EventBody::finished("a", TaskState::Succeeded)),
            ev(4, EventBody::finished("b", TaskState::Cached)),
        ];
        assert_eq!(check_well_formed(&ok), Ok(()));
        let bad = vec![ev(1, EventBody::RunStarted(meta(&["a"]))), ev(2, EventBody::finished("a", TaskState::Failed))];
        assert!(check_well_formed(&bad).is_err());
    }
}
