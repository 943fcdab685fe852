//! Provenance: for every run, which task produced which data from which
//! inputs, in which environment, on which executor.
//!
//! Each run writes one immutable `runs/<run-id>/provenance.json`, assembled
//! from its journal. `prov-index.json` maps artifact digests to their
//! producing tasks and task fingerprints to their records, so lineage
//! queries can follow data across runs.

mod dot;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::{self, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{write_atomic, TypedLiteral};
use crate::digest::{Digest, Fingerprint};
use crate::model::EnvSpec;
use crate::planner::ArtifactKind;
use crate::runstate::{self, EventBody, RunEvent, RunState, TaskState, WorkflowInfo, JOURNAL_FILE};
use crate::workspace::Workspace;

pub use dot::{provenance_dot, workflow_dot};

pub const PROVENANCE_SCHEMA: &str = "flowforge-provenance-v1";
pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProvAction {
    Execute,
    LinkCached,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvArtifact {
    pub kind: ArtifactKind,
    pub digest: Digest,
    pub name: String,
}

/// The task (of the same workflow) an input was taken from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpstreamRef {
    pub task: String,
    pub port: String,
    pub fingerprint: Fingerprint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvEcho {
    pub fingerprint: Digest,
    pub provider: String,
    pub spec: EnvSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProvRecord {
    pub task: String,
    pub fingerprint: Fingerprint,
    pub action: ProvAction,
    pub state: TaskState,
    pub argv: Vec<String>,
    pub literal_inputs: BTreeMap<String, TypedLiteral>,
    pub input_files: BTreeMap<String, Vec<ProvArtifact>>,
    pub upstream: BTreeMap<String, UpstreamRef>,
    pub output_files: BTreeMap<String, ProvArtifact>,
    pub value_outputs: BTreeMap<String, TypedLiteral>,
    pub env: EnvEcho,
    pub executor: String,
    pub host: String,
    pub started: String,
    pub ended: String,
    pub wall_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cached_from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A workflow output: an artifact or a literal, with the task and run that
/// hold its producing record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputBinding {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<ProvArtifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<TypedLiteral>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedTask {
    pub task: String,
    pub fingerprint: Fingerprint,
    pub produced_in: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnfinishedTask {
    pub task: String,
    pub state: TaskState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceDoc {
    pub schema: String,
    pub run_id: String,
    pub workflow: WorkflowInfo,
    pub engine_version: String,
    pub user: String,
    pub hostname: String,
    pub policy: String,
    pub executor: String,
    pub jobs: usize,
    pub params: BTreeMap<String, TypedLiteral>,
    pub edges: Vec<(String, String)>,
    pub started: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ended: Option<String>,
    pub wall_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<RunState>,
    pub incomplete: bool,
    pub tasks: Vec<TaskProvRecord>,
    pub skipped: Vec<SkippedTask>,
    pub not_run: Vec<UnfinishedTask>,
    pub outputs: BTreeMap<String, OutputBinding>,
}

impl ProvenanceDoc {
    pub fn record(&self, task: &str) -> Option<&TaskProvRecord> {
        self.tasks.iter().find(|r| r.task == task)
    }
}

#[derive(Debug, Error)]
pub enum ProvError {
    #[error("journal does not start with run-started")]
    NoRun,
    #[error("provenance I/O error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed provenance file {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error(transparent)]
    Journal(#[from] runstate::JournalError),
    #[error("unknown run `{0}`")]
    UnknownRun(String),
}

/// Assembles the provenance document of a run from its journal events. A
/// journal without run-finished yields a document flagged `incomplete`.
pub fn record(events: &[RunEvent]) -> Result<ProvenanceDoc, ProvError> {
    let Some(RunEvent { body: EventBody::RunStarted(meta), ts: started, .. }) = events.first() else {
        return Err(ProvError::NoRun);
    };
    let mut doc = ProvenanceDoc {
        schema: PROVENANCE_SCHEMA.to_string(),
        run_id: meta.run_id.clone(),
        workflow: meta.workflow.clone(),
        engine_version: meta.engine_version.clone(),
        user: meta.user.clone(),
        hostname: meta.hostname.clone(),
        policy: meta.policy.clone(),
        executor: meta.executor.clone(),
        jobs: meta.jobs,
        params: meta.params.clone(),
        edges: meta.edges.clone(),
        started: started.clone(),
        ended: None,
        wall_secs: 0.0,
        state: None,
        incomplete: true,
        tasks: Vec::new(),
        skipped: Vec::new(),
        not_run: Vec::new(),
        outputs: BTreeMap::new(),
    };
    for e in &events[1..] {
        match &e.body {
            EventBody::TaskFinished { record: Some(r), .. } => doc.tasks.push((**r).clone()),
            EventBody::TaskFinished {
                task,
                state: TaskState::SkippedUpToDate,
                fingerprint: Some(fp),
                produced_in: Some(run),
                ..
            } => doc.skipped.push(SkippedTask { task: task.clone(), fingerprint: *fp, produced_in: run.clone() }),
            EventBody::TaskFinished { task, state, .. } => {
                doc.not_run.push(UnfinishedTask { task: task.clone(), state: *state })
            }
            EventBody::RunFinished { state, outputs } => {
                doc.state = Some(*state);
                doc.outputs = outputs.clone();
                doc.ended = Some(e.ts.clone());
                doc.incomplete = false;
            }
            _ => {}
        }
    }
    let end = doc.ended.clone().unwrap_or_else(|| events.last().unwrap().ts.clone());
    doc.wall_secs = runstate::seconds_between(&doc.started, &end);
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProducerRef {
    pub run: String,
    pub task: String,
    pub port: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordRef {
    pub run: String,
    pub task: String,
}

/// Digest and fingerprint lookup over every recorded run, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProvIndex {
    pub runs: Vec<String>,
    pub artifacts: BTreeMap<Digest, Vec<ProducerRef>>,
    pub fingerprints: BTreeMap<Fingerprint, Vec<RecordRef>>,
}

impl ProvIndex {
    pub fn add(&mut self, doc: &ProvenanceDoc) {
        if self.runs.contains(&doc.run_id) {
            return;
        }
        self.runs.push(doc.run_id.clone());
        for r in &doc.tasks {
            if r.state == TaskState::Failed {
                continue;
            }
            for (port, a) in &r.output_files {
                self.artifacts.entry(a.digest).or_default().push(ProducerRef {
                    run: doc.run_id.clone(),
                    task: r.task.clone(),
                    port: port.clone(),
                });
            }
            self.fingerprints
                .entry(r.fingerprint)
                .or_default()
                .push(RecordRef { run: doc.run_id.clone(), task: r.task.clone() });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageTask {
    pub task: String,
    pub run: String,
    pub fingerprint: Fingerprint,
    pub action: ProvAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cached_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageArtifact {
    pub digest: Digest,
    pub name: String,
    /// `None` for workflow inputs.
    pub producer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEdge {
    pub from: String,
    pub to: String,
    pub port: String,
}

/// Upstream closure of an artifact. Empty when the digest is unknown.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub tasks: Vec<LineageTask>,
    pub artifacts: Vec<LineageArtifact>,
    pub edges: Vec<LineageEdge>,
}

impl Lineage {
    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty() && self.artifacts.is_empty()
    }

    pub fn task_ids(&self) -> BTreeSet<String> {
        self.tasks.iter().map(|t| t.task.clone()).collect()
    }
}

/// Reads and writes the provenance documents of a workspace.
#[derive(Debug, Clone)]
pub struct ProvStore {
    ws: Workspace,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>, ProvError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| ProvError::Malformed { path: path.to_path_buf(), message: e.to_string() }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(ProvError::Io { path: path.to_path_buf(), source }),
    }
}

impl ProvStore {
    pub fn new(ws: Workspace) -> Self {
        ProvStore { ws }
    }

    pub fn doc_path(&self, run: &str) -> PathBuf {
        self.ws.run_dir(run).join(PROVENANCE_FILE)
    }

    /// Writes the document and adds it to the index.
    pub fn publish(&self, doc: &ProvenanceDoc) -> Result<(), ProvError> {
        let path = self.doc_path(&doc.run_id);
        let io = |source| ProvError::Io { path: path.clone(), source };
        write_atomic(&path, &serde_json::to_vec_pretty(doc).expect("doc serializes")).map_err(io)?;
        let lock_path = self.ws.state_dir().join("prov-index.lock");
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|source| ProvError::Io { path: lock_path.clone(), source })?;
        lock.lock().map_err(|source| ProvError::Io { path: lock_path.clone(), source })?;
        let mut index = self.load_index()?;
        index.add(doc);
        let index_path = self.ws.index_path();
        write_atomic(&index_path, &serde_json::to_vec(&index).expect("index serializes"))
            .map_err(|source| ProvError::Io { path: index_path, source })
    }

    /// The stored document of a run; for runs without one (still running or
    /// killed), the document assembled from the journal.
    pub fn load(&self, run: &str) -> Result<ProvenanceDoc, ProvError> {
        if let Some(doc) = read_json(&self.doc_path(run))? {
            return Ok(doc);
        }
        let journal = self.ws.run_dir(run).join(JOURNAL_FILE);
        if !journal.exists() {
            return Err(ProvError::UnknownRun(run.to_string()));
        }
        record(&runstate::read_journal(&journal)?.events)
    }

    pub fn load_index(&self) -> Result<ProvIndex, ProvError> {
        match read_json(&self.ws.index_path())? {
            Some(index) => Ok(index),
            None => self.rebuild_index(),
        }
    }

    /// Index over every stored document, without touching disk.
    pub fn rebuild_index(&self) -> Result<ProvIndex, ProvError> {
        let mut index = ProvIndex::default();
        for run in self.ws.run_ids() {
            if let Some(doc) = read_json::<ProvenanceDoc>(&self.doc_path(&run))? {
                index.add(&doc);
            }
        }
        Ok(index)
    }

    fn record_of(
        &self,
        docs: &mut BTreeMap<String, Option<ProvenanceDoc>>,
        r: &RecordRef,
    ) -> Result<Option<TaskProvRecord>, ProvError> {
        if !docs.contains_key(&r.run) {
            let doc = match self.load(&r.run) {
                Ok(d) => Some(d),
                Err(ProvError::UnknownRun(_)) => None,
                Err(e) => return Err(e),
            };
            docs.insert(r.run.clone(), doc);
        }
        Ok(docs[&r.run].as_ref().and_then(|d| d.record(&r.task)).cloned())
    }

    /// Every task and artifact that took part in producing `digest`,
    /// following reused results into the runs that recorded them.
    pub fn lineage(&self, digest: &Digest) -> Result<Lineage, ProvError> {
        let index = self.load_index()?;
        let mut docs = BTreeMap::new();
        let mut out = Lineage::default();
        let Some(start) = index.artifacts.get(digest).and_then(|p| p.last()) else { return Ok(out) };

        let start_ref = RecordRef { run: start.run.clone(), task: start.task.clone() };
        let mut artifacts = BTreeMap::new();
        if let Some(a) = self.record_of(&mut docs, &start_ref)?.and_then(|r| r.output_files.get(&start.port).cloned()) {
            artifacts.insert(a.digest, LineageArtifact { digest: a.digest, name: a.name, producer: Some(start.task.clone()) });
        }
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([start_ref]);
        while let Some(rref) = queue.pop_front() {
            let Some(r) = self.record_of(&mut docs, &rref)? else { continue };
            if !seen.insert(r.fingerprint) {
                continue;
            }
            for (port, files) in &r.input_files {
                let producer = r.upstream.get(port).map(|u| u.task.clone());
                for a in files {
                    artifacts
                        .entry(a.digest)
                        .or_insert(LineageArtifact { digest: a.digest, name: a.name.clone(), producer: producer.clone() });
                }
            }
            for (port, up) in &r.upstream {
                out.edges.push(LineageEdge { from: up.task.clone(), to: r.task.clone(), port: port.clone() });
                match index.fingerprints.get(&up.fingerprint).and_then(|refs| refs.last()) {
                    Some(next) => queue.push_back(next.clone()),
                    None => log::warn!("no record of `{}` ({}) in any run", up.task, up.fingerprint),
                }
            }
            out.tasks.push(LineageTask {
                task: r.task,
                run: rref.run,
                fingerprint: r.fingerprint,
                action: r.action,
                cached_from: r.cached_from,
            });
        }
        out.tasks.sort_by(|a, b| a.task.cmp(&b.task));
        out.edges.sort_by(|a, b| (&a.from, &a.to, &a.port).cmp(&(&b.from, &b.to, &b.port)));
        out.edges.dedup();
        out.artifacts = artifacts.into_values().collect();
        Ok(out)
    }
}
