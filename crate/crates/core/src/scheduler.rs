//! Runs a task graph: decides per task whether to execute, link a cached
//! result or keep the workspace's up-to-date result, dispatches executions
//! with bounded parallelism, journals every transition and publishes the
//! run's provenance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{now_timestamp, CacheEntry, CacheError, CacheStore, Lookup, TypedLiteral};
use crate::digest::{Digest, Fingerprint};
use crate::exec::{ExecError, Executor, ExpectedOutput, Outcome, StagedInput, TaskSpec};
use crate::planner::{
    render_argv, staged_path, task_fingerprint, ArtifactKind, ArtifactRef, Binding, PlanError, Sink, TaskGraph,
    TaskInstance, TaskOutputs,
};
use crate::provenance::{
    self, EnvEcho, OutputBinding, ProvAction, ProvArtifact, ProvError, ProvStore, TaskProvRecord, UpstreamRef,
};
use crate::runstate::{
    EventBody, Journal, JournalError, RunEvent, RunMeta, RunState, TaskState, WorkflowInfo, JOURNAL_FILE,
};
use crate::value::Value;
use crate::workspace::{Stamp, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Recompute,
    Link,
    Update,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Recompute => "recompute",
            Policy::Link => "link",
            Policy::Update => "update",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "recompute" | "R" => Ok(Policy::Recompute),
            "link" | "L" => Ok(Policy::Link),
            "update" | "U" => Ok(Policy::Update),
            _ => Err(format!("unknown policy `{s}` (expected recompute, link or update)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum TaskAction {
    Execute,
    LinkCached { run_id: String, fingerprint: Fingerprint },
    SkipUpToDate,
}

impl TaskAction {
    pub fn label(&self) -> &'static str {
        match self {
            TaskAction::Execute => "execute",
            TaskAction::LinkCached { .. } => "link-cached",
            TaskAction::SkipUpToDate => "skip-up-to-date",
        }
    }
}

fn outputs_present(t: &TaskInstance, ws: &Workspace) -> bool {
    t.outputs.iter().all(|(_, o)| match (&o.path, ArtifactKind::of(o.ty.base)) {
        (Some(p), Some(ArtifactKind::File)) => ws.output_path(&t.id, p).is_file(),
        (Some(p), Some(ArtifactKind::Directory)) => ws.output_path(&t.id, p).is_dir(),
        _ => true,
    })
}

fn decide(t: &TaskInstance, fp: Fingerprint, policy: Policy, cache: &CacheStore, ws: &Workspace) -> TaskAction {
    match policy {
        Policy::Recompute => TaskAction::Execute,
        Policy::Link => match cache.get_entry(&fp) {
            Lookup::Hit(e) => TaskAction::LinkCached { run_id: e.run_id, fingerprint: fp },
            Lookup::Corrupt(why) => {
                log::warn!("cache entry for `{}` is unusable, executing instead: {why}", t.id);
                TaskAction::Execute
            }
            Lookup::Miss => TaskAction::Execute,
        },
        Policy::Update => match ws.read_stamp(&t.id) {
            Some(stamp) if stamp.fingerprint == fp && outputs_present(t, ws) => TaskAction::SkipUpToDate,
            _ => TaskAction::Execute,
        },
    }
}

/// The action `policy` prescribes for a task whose inputs are all known.
pub fn decide_action(t: &TaskInstance, policy: Policy, cache: &CacheStore, ws: &Workspace) -> Result<TaskAction, PlanError> {
    Ok(decide(t, task_fingerprint(t)?, policy, cache, ws))
}

fn artifact_name(path: &str) -> String {
    Path::new(path).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.to_string())
}

/// Consumer-side view of stored outputs.
fn outputs_from(
    t: &TaskInstance,
    files: &BTreeMap<String, Digest>,
    values: &BTreeMap<String, TypedLiteral>,
) -> Option<TaskOutputs> {
    let mut out = TaskOutputs::default();
    for (port, decl) in &t.outputs {
        match (&decl.path, ArtifactKind::of(decl.ty.base)) {
            (Some(path), Some(kind)) => {
                let digest = *files.get(port)?;
                out.files.insert(port.clone(), ArtifactRef { kind, digest, name: artifact_name(path) });
            }
            _ => {
                let v = values.get(port)?.to_value()?;
                v.check(&decl.ty).ok()?;
                out.values.insert(port.clone(), v);
            }
        }
    }
    Some(out)
}

fn stamp_outputs(s: &Stamp) -> BTreeMap<String, Digest> {
    s.outputs.iter().map(|(k, a)| (k.clone(), a.digest)).collect()
}

/// The actions a run would take if every executed task reproduced its
/// previous outputs. Tasks downstream of an execution are shown as
/// executing. Reads only; creates nothing.
pub fn plan_preview(
    g: &TaskGraph,
    policy: Policy,
    cache: &CacheStore,
    ws: &Workspace,
) -> Result<BTreeMap<String, TaskAction>, PlanError> {
    let mut actions = BTreeMap::new();
    let mut known: BTreeMap<String, TaskOutputs> = BTreeMap::new();
    for id in g.topo_order() {
        let t = &g.tasks[&id];
        if t.deps.iter().any(|d| actions.get(d) == Some(&TaskAction::Execute)) {
            actions.insert(id, TaskAction::Execute);
            continue;
        }
        let resolved = t.resolve(&known)?;
        let action = decide_action(&resolved, policy, cache, ws)?;
        let outs = match &action {
            TaskAction::LinkCached { fingerprint, .. } => match cache.get_entry(fingerprint) {
                Lookup::Hit(e) => outputs_from(t, &e.file_outputs, &e.value_outputs),
                _ => None,
            },
            TaskAction::SkipUpToDate => ws.read_stamp(&id).and_then(|s| outputs_from(t, &stamp_outputs(&s), &s.values)),
            TaskAction::Execute => None,
        };
        match outs {
            Some(o) => {
                known.insert(id.clone(), o);
                actions.insert(id, action);
            }
            None => {
                actions.insert(id, TaskAction::Execute);
            }
        }
    }
    Ok(actions)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub policy: Policy,
    pub jobs: usize,
    pub keep_going: bool,
    pub run_id: Option<String>,
    pub workflow: WorkflowInfo,
    /// Parent of the per-task scratch directories; the system temp dir by default.
    pub scratch_dir: Option<PathBuf>,
}

impl RunOptions {
    pub fn new(policy: Policy, jobs: usize, workflow: WorkflowInfo) -> Self {
        RunOptions { policy, jobs, keep_going: false, run_id: None, workflow, scratch_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskResult {
    pub state: TaskState,
    pub fingerprint: Option<Fingerprint>,
    pub exit_code: Option<i32>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub state: RunState,
    pub tasks: BTreeMap<String, TaskResult>,
    pub wall_time: Duration,
    pub outputs: BTreeMap<String, OutputBinding>,
}

impl RunResult {
    pub fn counts(&self) -> BTreeMap<TaskState, usize> {
        let mut out = BTreeMap::new();
        for r in self.tasks.values() {
            *out.entry(r.state).or_insert(0) += 1;
        }
        out
    }

    pub fn count(&self, state: TaskState) -> usize {
        self.tasks.values().filter(|r| r.state == state).count()
    }

    /// Tasks whose command ran in this run.
    pub fn executed(&self) -> BTreeSet<String> {
        self.tasks
            .iter()
            .filter(|(_, r)| matches!(r.state, TaskState::Succeeded | TaskState::Failed))
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn exit_status(&self) -> i32 {
        match self.state {
            RunState::Succeeded => 0,
            RunState::Failed => 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("jobs must be at least 1")]
    NoJobs,
    #[error("I/O error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Provenance(#[from] ProvError),
    #[error("external input {path} changed after planning")]
    InputChanged { path: PathBuf },
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

fn current_user() -> String {
    ["USER", "LOGNAME", "USERNAME"]
        .iter()
        .find_map(|k| std::env::var(k).ok().filter(|v| !v.is_empty()))
        .unwrap_or_else(|| "unknown".into())
}

struct Completion {
    task: String,
    spec: TaskSpec,
    result: Result<Outcome, ExecError>,
    started: String,
    ended: String,
    secs: f64,
}

/// One finished task's success data, as later tasks and the run output see it.
struct Produced {
    outputs: TaskOutputs,
    fingerprint: Fingerprint,
    run: String,
}

struct RunState_<'a> {
    g: &'a TaskGraph,
    ws: &'a Workspace,
    cache: CacheStore,
    run_id: String,
    run_dir: PathBuf,
    journal: Journal,
    events: Vec<RunEvent>,
    results: BTreeMap<String, TaskResult>,
    produced: BTreeMap<String, Produced>,
    executed: BTreeSet<String>,
    failed_any: bool,
    executor_name: String,
}

impl<'a> RunState_<'a> {
    fn log(&mut self, body: EventBody) -> Result<(), RunError> {
        let e = self.journal.append(body)?;
        self.events.push(e);
        Ok(())
    }

    fn completed(&self) -> BTreeSet<String> {
        self.produced.keys().cloned().collect()
    }

    fn upstream_outputs(&self) -> BTreeMap<String, TaskOutputs> {
        self.produced.iter().map(|(k, p)| (k.clone(), p.outputs.clone())).collect()
    }

    fn upstream_refs(&self, t: &TaskInstance) -> BTreeMap<String, UpstreamRef> {
        t.inputs
            .iter()
            .filter_map(|(port, input)| {
                let crate::model::Reference::Output { process, port: up } = &input.from else { return None };
                let fp = self.produced.get(process)?.fingerprint;
                Some((port.clone(), UpstreamRef { task: process.clone(), port: up.clone(), fingerprint: fp }))
            })
            .collect()
    }

    fn base_record(&self, t: &TaskInstance, fp: Fingerprint, action: ProvAction, state: TaskState) -> TaskProvRecord {
        let mut literal_inputs = BTreeMap::new();
        let mut input_files = BTreeMap::new();
        let prov = |a: &ArtifactRef| ProvArtifact { kind: a.kind, digest: a.digest, name: a.name.clone() };
        for (port, input) in &t.inputs {
            match &input.binding {
                Binding::Value(v) => {
                    literal_inputs.insert(port.clone(), TypedLiteral::new(v, &input.ty));
                }
                Binding::Artifact(a) => {
                    input_files.insert(port.clone(), vec![prov(a)]);
                }
                Binding::Artifacts(items) => {
                    input_files.insert(port.clone(), items.iter().map(prov).collect());
                }
                Binding::Upstream { .. } => {}
            }
        }
        let now = now_timestamp();
        TaskProvRecord {
            task: t.id.clone(),
            fingerprint: fp,
            action,
            state,
            argv: render_argv(t).unwrap_or_else(|_| t.argv.clone()),
            literal_inputs,
            input_files,
            upstream: self.upstream_refs(t),
            output_files: BTreeMap::new(),
            value_outputs: BTreeMap::new(),
            env: EnvEcho { fingerprint: t.env.fingerprint, provider: t.env.provider.clone(), spec: t.env.spec.clone() },
            executor: self.executor_name.clone(),
            host: crate::exec::hostname(),
            started: now.clone(),
            ended: now,
            wall_secs: 0.0,
            exit_code: None,
            cached_from: None,
            error: None,
        }
    }

    fn fill_outputs(rec: &mut TaskProvRecord, t: &TaskInstance, outs: &TaskOutputs) {
        for (port, a) in &outs.files {
            rec.output_files.insert(port.clone(), ProvArtifact { kind: a.kind, digest: a.digest, name: a.name.clone() });
        }
        for (port, v) in &outs.values {
            rec.value_outputs.insert(port.clone(), TypedLiteral::new(v, &t.outputs[port].ty));
        }
    }

    /// Places stored outputs at `<workspace>/<task>/<path>` and stamps them.
    fn install(&self, t: &TaskInstance, fp: Fingerprint, outs: &TaskOutputs) -> Result<(), CacheError> {
        for (port, a) in &outs.files {
            let path = t.outputs[port].path.as_deref().expect("file outputs have paths");
            self.cache.materialize(&a.digest, a.kind, &self.ws.output_path(&t.id, path))?;
        }
        let stamp = Stamp {
            fingerprint: fp,
            run_id: self.run_id.clone(),
            outputs: outs.files.clone(),
            values: outs.values.iter().map(|(k, v)| (k.clone(), TypedLiteral::new(v, &t.outputs[k].ty))).collect(),
        };
        let dir = self.ws.stamps_dir();
        self.ws.write_stamp(&t.id, &stamp).map_err(|source| CacheError::Io { path: dir, source })
    }

    fn succeed(&mut self, t: &TaskInstance, fp: Fingerprint, outs: TaskOutputs, record: Option<TaskProvRecord>, state: TaskState, produced_in: String) -> Result<(), RunError> {
        let exit_code = record.as_ref().and_then(|r| r.exit_code);
        self.results.insert(t.id.clone(), TaskResult { state, fingerprint: Some(fp), exit_code, error: None });
        self.log(EventBody::TaskFinished {
            task: t.id.clone(),
            state,
            fingerprint: Some(fp),
            exit_code,
            error: None,
            produced_in: if record.is_none() { Some(produced_in.clone()) } else { None },
            record: record.map(Box::new),
        })?;
        self.produced.insert(t.id.clone(), Produced { outputs: outs, fingerprint: fp, run: produced_in });
        Ok(())
    }

    fn fail(
        &mut self,
        t: &TaskInstance,
        fp: Option<Fingerprint>,
        record: Option<TaskProvRecord>,
        exit_code: Option<i32>,
        error: Option<String>,
        keep_going: bool,
    ) -> Result<(), RunError> {
        if let Some(e) = &error {
            log::error!("task `{}` failed: {e}", t.id);
        } else {
            log::error!("task `{}` failed with exit code {}", t.id, exit_code.unwrap_or(-1));
        }
        self.results.insert(t.id.clone(), TaskResult { state: TaskState::Failed, fingerprint: fp, exit_code, error: error.clone() });
        self.log(EventBody::TaskFinished {
            task: t.id.clone(),
            state: TaskState::Failed,
            fingerprint: fp,
            exit_code,
            error,
            record: record.map(Box::new),
            produced_in: None,
        })?;
        for d in self.g.descendants(&t.id) {
            if !self.results.contains_key(&d) {
                self.results.insert(d.clone(), TaskResult { state: TaskState::Blocked, fingerprint: None, exit_code: None, error: None });
                self.log(EventBody::finished(&d, TaskState::Blocked))?;
            }
        }
        if !keep_going {
            self.failed_any = true;
        }
        Ok(())
    }

    fn staged_inputs(&self, t: &TaskInstance) -> Result<Vec<StagedInput>, CacheError> {
        let mut out = Vec::new();
        let mut stage = |a: &ArtifactRef, rel: String| -> Result<(), CacheError> {
            match a.kind {
                ArtifactKind::File => out.push(StagedInput { rel_path: rel, source: Some(self.cache.blob_path(&a.digest)) }),
                ArtifactKind::Directory => {
                    let tree = self.cache.tree(&a.digest)?.ok_or(CacheError::UnknownBlob(a.digest))?;
                    out.push(StagedInput { rel_path: rel.clone(), source: None });
                    for e in tree.entries {
                        out.push(StagedInput {
                            rel_path: format!("{rel}/{}", e.path),
                            source: Some(self.cache.blob_path(&e.digest)),
                        });
                    }
                }
            }
            Ok(())
        };
        for (port, input) in &t.inputs {
            match &input.binding {
                Binding::Artifact(a) => stage(a, staged_path(port, None, &a.name))?,
                Binding::Artifacts(items) => {
                    for (i, a) in items.iter().enumerate() {
                        stage(a, staged_path(port, Some(i), &a.name))?;
                    }
                }
                _ => {}
            }
        }
        Ok(out)
    }

    /// Makes sure the cache holds a skipped task's outputs, re-adding them
    /// from the workspace if needed. False if the workspace copy differs.
    fn cache_has_or_ingest(&self, t: &TaskInstance, stamp: &Stamp) -> bool {
        stamp.outputs.iter().all(|(port, a)| {
            if self.cache.has_blob(&a.digest) || self.cache.has_tree(&a.digest) {
                return true;
            }
            let Some(path) = t.outputs.get(port).and_then(|o| o.path.as_deref()) else { return false };
            matches!(self.cache.put_artifact(a.kind, &self.ws.output_path(&t.id, path)), Ok(d) if d == a.digest)
        })
    }

    fn store_outcome(&self, t: &TaskInstance, fp: Fingerprint, spec: &TaskSpec, outcome: &Outcome) -> Result<TaskOutputs, CacheError> {
        let mut files = BTreeMap::new();
        for (port, a) in &outcome.outputs {
            let path = spec.workdir.join(spec.outputs[port].path.as_deref().expect("file outputs have paths"));
            let stored = self.cache.put_artifact(a.kind, &path)?;
            if stored != a.digest {
                return Err(CacheError::Malformed { path, message: "output changed after the task finished".into() });
            }
            files.insert(port.clone(), a.digest);
        }
        let values: BTreeMap<String, TypedLiteral> =
            outcome.values.iter().map(|(k, v)| (k.clone(), TypedLiteral::new(v, &t.outputs[k].ty))).collect();
        self.cache.put_entry(&CacheEntry {
            fingerprint: fp,
            run_id: self.run_id.clone(),
            file_outputs: files,
            value_outputs: values,
            created: now_timestamp(),
        })?;
        Ok(TaskOutputs { files: outcome.outputs.clone(), values: outcome.values.clone() })
    }
}

fn ingest_external_inputs(g: &TaskGraph, cache: &CacheStore) -> Result<(), RunError> {
    for t in g.tasks.values() {
        for input in t.inputs.values() {
            let refs: Vec<&ArtifactRef> = match &input.binding {
                Binding::Artifact(a) => vec![a],
                Binding::Artifacts(items) => items.iter().collect(),
                _ => continue,
            };
            for (a, src) in refs.into_iter().zip(&input.sources) {
                if cache.put_artifact(a.kind, src)? != a.digest {
                    return Err(RunError::InputChanged { path: src.clone() });
                }
            }
        }
    }
    Ok(())
}

fn spec_for(
    st: &RunState_<'_>,
    t: &TaskInstance,
    argv: Vec<String>,
    scratch: &Path,
) -> Result<TaskSpec, RunError> {
    let workdir = scratch.join(uuid::Uuid::new_v4().simple().to_string()).join("work");
    fs::create_dir_all(&workdir).map_err(io_at(&workdir))?;
    let logs = st.run_dir.join("logs");
    Ok(TaskSpec {
        task_id: t.id.clone(),
        argv,
        workdir,
        inputs: st.staged_inputs(t)?,
        outputs: t
            .outputs
            .iter()
            .map(|(k, o)| (k.clone(), ExpectedOutput { ty: o.ty.clone(), path: o.path.clone() }))
            .collect(),
        wrapper: t.env.wrapper.clone(),
        resources: t.resources.clone(),
        stdout: logs.join(format!("{}.stdout", t.id)),
        stderr: logs.join(format!("{}.stderr", t.id)),
    })
}

/// Executes `g` in workspace `ws`. At most `opts.jobs` tasks run at once;
/// with `keep_going` unset, no task starts after the first failure.
pub fn run(g: &TaskGraph, opts: &RunOptions, ws: &Workspace, executor: &dyn Executor) -> Result<RunResult, RunError> {
    if opts.jobs == 0 {
        return Err(RunError::NoJobs);
    }
    let clock = Instant::now();
    ws.ensure().map_err(io_at(ws.root()))?;
    let cache = CacheStore::open(ws.cache_dir())?;
    let _lease = cache.lease()?;
    let run_id = opts.run_id.clone().unwrap_or_else(Workspace::new_run_id);
    let run_dir = ws.run_dir(&run_id);
    let logs = run_dir.join("logs");
    fs::create_dir_all(&logs).map_err(io_at(&logs))?;
    let journal = Journal::create(run_dir.join(JOURNAL_FILE))?;
    ingest_external_inputs(g, &cache)?;

    let scratch = match &opts.scratch_dir {
        Some(dir) => tempfile::Builder::new().prefix("flowforge-").tempdir_in(dir),
        None => tempfile::Builder::new().prefix("flowforge-").tempdir(),
    }
    .map_err(io_at(Path::new("scratch")))?;

    let mut st = RunState_ {
        g,
        ws,
        cache,
        run_id: run_id.clone(),
        run_dir: run_dir.clone(),
        journal,
        events: Vec::new(),
        results: BTreeMap::new(),
        produced: BTreeMap::new(),
        executed: BTreeSet::new(),
        failed_any: false,
        executor_name: executor.name(),
    };
    st.log(EventBody::RunStarted(RunMeta {
        run_id: run_id.clone(),
        workflow: opts.workflow.clone(),
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        user: current_user(),
        hostname: crate::exec::hostname(),
        pid: std::process::id(),
        policy: opts.policy.to_string(),
        executor: executor.name(),
        jobs: opts.jobs,
        keep_going: opts.keep_going,
        params: g
            .params
            .iter()
            .map(|(k, v)| (k.clone(), TypedLiteral::new(v, &g.param_types[k])))
            .collect(),
        tasks: g.tasks.keys().cloned().collect(),
        edges: g.edges.iter().cloned().collect(),
    }))?;

    let mut inflight: BTreeMap<String, (TaskInstance, Fingerprint)> = BTreeMap::new();
    std::thread::scope(|scope| -> Result<(), RunError> {
        let (tx, rx) = mpsc::channel::<Completion>();
        loop {
            if !st.failed_any {
                loop {
                    let mut progressed = false;
                    let ready: Vec<String> = crate::planner::ready_set(g, &st.completed())
                        .into_iter()
                        .filter(|id| !st.results.contains_key(id) && !inflight.contains_key(id))
                        .collect();
                    for id in ready {
                        if st.failed_any {
                            break;
                        }
                        let t = g.tasks[&id].resolve(&st.upstream_outputs())?;
                        let fp = task_fingerprint(&t)?;
                        let forced = opts.policy == Policy::Update && t.deps.iter().any(|d| st.executed.contains(d));
                        let mut action = if forced { TaskAction::Execute } else { decide(&t, fp, opts.policy, &st.cache, ws) };

                        if let TaskAction::LinkCached { .. } = action {
                            match st.cache.get_entry(&fp) {
                                Lookup::Hit(entry) => match outputs_from(&t, &entry.file_outputs, &entry.value_outputs) {
                                    Some(outs) => {
                                        if let Err(e) = st.install(&t, fp, &outs) {
                                            st.fail(&t, Some(fp), None, None, Some(e.to_string()), opts.keep_going)?;
                                        } else {
                                            let mut rec = st.base_record(&t, fp, ProvAction::LinkCached, TaskState::Cached);
                                            rec.executor = "cache".into();
                                            rec.cached_from = Some(entry.run_id.clone());
                                            RunState_::fill_outputs(&mut rec, &t, &outs);
                                            let run = st.run_id.clone();
                                            st.succeed(&t, fp, outs, Some(rec), TaskState::Cached, run)?;
                                        }
                                        progressed = true;
                                        continue;
                                    }
                                    None => action = TaskAction::Execute,
                                },
                                _ => action = TaskAction::Execute,
                            }
                        }

                        if action == TaskAction::SkipUpToDate {
                            let stamp = ws.read_stamp(&id);
                            let outs = stamp.as_ref().and_then(|s| outputs_from(&t, &stamp_outputs(s), &s.values));
                            match (stamp, outs) {
                                (Some(stamp), Some(outs)) if st.cache_has_or_ingest(&t, &stamp) => {
                                    st.succeed(&t, fp, outs, None, TaskState::SkippedUpToDate, stamp.run_id.clone())?;
                                    progressed = true;
                                    continue;
                                }
                                _ => action = TaskAction::Execute,
                            }
                        }

                        debug_assert_eq!(action, TaskAction::Execute);
                        if inflight.len() >= opts.jobs {
                            continue;
                        }
                        if let Err(e) = ws.clear_stamp(&id) {
                            log::warn!("cannot clear stamp of `{id}`: {e}");
                        }
                        let spec = match render_argv(&t)
                            .map_err(RunError::from)
                            .and_then(|argv| spec_for(&st, &t, argv, scratch.path()))
                        {
                            Ok(s) => s,
                            Err(e) => {
                                st.fail(&t, Some(fp), None, None, Some(e.to_string()), opts.keep_going)?;
                                progressed = true;
                                continue;
                            }
                        };
                        st.log(EventBody::TaskStarted { task: id.clone(), executor: st.executor_name.clone() })?;
                        inflight.insert(id.clone(), (t, fp));
                        progressed = true;
                        let tx = tx.clone();
                        scope.spawn(move || {
                            let started = now_timestamp();
                            let clock = Instant::now();
                            let result = executor.execute(&spec);
                            let _ = tx.send(Completion {
                                task: id,
                                spec,
                                result,
                                started,
                                ended: now_timestamp(),
                                secs: clock.elapsed().as_secs_f64(),
                            });
                        });
                    }
                    if !progressed || st.failed_any {
                        break;
                    }
                }
            }
            if inflight.is_empty() {
                return Ok(());
            }
            let c = rx.recv().expect("a worker is still running");
            let (t, fp) = inflight.remove(&c.task).expect("completion of a dispatched task");
            st.executed.insert(t.id.clone());
            let mut rec = st.base_record(&t, fp, ProvAction::Execute, TaskState::Succeeded);
            rec.started = c.started.clone();
            rec.ended = c.ended.clone();
            rec.wall_secs = c.secs;
            match c.result {
                Ok(outcome) if outcome.success() => {
                    rec.host = outcome.host.clone();
                    rec.exit_code = Some(0);
                    match st.store_outcome(&t, fp, &c.spec, &outcome).and_then(|outs| st.install(&t, fp, &outs).map(|_| outs)) {
                        Ok(outs) => {
                            RunState_::fill_outputs(&mut rec, &t, &outs);
                            let run = st.run_id.clone();
                            st.succeed(&t, fp, outs, Some(rec), TaskState::Succeeded, run)?;
                        }
                        Err(e) => {
                            rec.state = TaskState::Failed;
                            rec.error = Some(e.to_string());
                            st.fail(&t, Some(fp), Some(rec), Some(0), Some(e.to_string()), opts.keep_going)?;
                        }
                    }
                }
                Ok(outcome) => {
                    rec.host = outcome.host.clone();
                    rec.state = TaskState::Failed;
                    rec.exit_code = Some(outcome.exit_code);
                    st.fail(&t, Some(fp), Some(rec), Some(outcome.exit_code), None, opts.keep_going)?;
                }
                Err(e) => {
                    rec.state = TaskState::Failed;
                    rec.error = Some(format!("{}: {e}", e.class()));
                    let msg = rec.error.clone();
                    st.fail(&t, Some(fp), Some(rec), None, msg, opts.keep_going)?;
                }
            }
            if c.spec.workdir.exists() {
                let _ = fs::remove_dir_all(c.spec.workdir.parent().unwrap_or(&c.spec.workdir));
            }
        }
    })?;

    for id in g.tasks.keys() {
        if !st.results.contains_key(id) {
            st.results.insert(id.clone(), TaskResult { state: TaskState::Cancelled, fingerprint: None, exit_code: None, error: None });
            st.log(EventBody::finished(id, TaskState::Cancelled))?;
        }
    }

    let outputs = workflow_outputs(&st);
    let state = if st.results.values().all(|r| r.state.is_success()) { RunState::Succeeded } else { RunState::Failed };
    st.log(EventBody::RunFinished { state, outputs: outputs.clone() })?;
    let doc = provenance::record(&st.events)?;
    ProvStore::new(ws.clone()).publish(&doc)?;

    Ok(RunResult { run_id, run_dir, state, tasks: st.results, wall_time: clock.elapsed(), outputs })
}

fn workflow_outputs(st: &RunState_<'_>) -> BTreeMap<String, OutputBinding> {
    let mut out = BTreeMap::new();
    for (name, sink) in &st.g.sinks {
        let binding = match sink {
            Sink::Task { task, port } => {
                let Some(p) = st.produced.get(task) else { continue };
                let mut b = OutputBinding {
                    task: Some(task.clone()),
                    port: Some(port.clone()),
                    run: Some(p.run.clone()),
                    artifact: None,
                    value: None,
                };
                if let Some(a) = p.outputs.files.get(port) {
                    b.artifact = Some(ProvArtifact { kind: a.kind, digest: a.digest, name: a.name.clone() });
                } else if let Some(v) = p.outputs.values.get(port) {
                    b.value = Some(TypedLiteral::new(v, &st.g.tasks[task].outputs[port].ty));
                }
                b
            }
            Sink::Param(binding) => {
                let mut b = OutputBinding { task: None, port: None, run: None, artifact: None, value: None };
                match binding {
                    Binding::Artifact(a) => b.artifact = Some(ProvArtifact { kind: a.kind, digest: a.digest, name: a.name.clone() }),
                    Binding::Value(v) => {
                        b.value = Some(TypedLiteral { ty: v.kind_name().to_string(), value: v.to_json() });
                    }
                    _ => {}
                }
                b
            }
        };
        out.insert(name.clone(), binding);
    }
    out
}

/// Value of a (task, port) pair after a run, read back from the workspace stamp.
pub fn stamped_value(ws: &Workspace, task: &str, port: &str) -> Option<Value> {
    ws.read_stamp(task)?.values.get(port)?.to_value()
}
