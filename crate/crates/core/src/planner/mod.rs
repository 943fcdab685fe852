//! Turns a flattened workflow into an executable task graph and gives every
//! task a deterministic fingerprint.

mod fingerprint;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Digest;
use crate::envprov::{EnvError, EnvRegistry, ResolvedEnv};
use crate::exec::{INPUTS_DIR, VALUE_MANIFEST};
use crate::model::{check_connections, EnvSpec, Finding, FlatWorkflow, ProcessBody, Reference, ResourceHints};
use crate::tree;
use crate::value::{BaseKind, PortType, TypeError, Value};

pub use fingerprint::{canonical_inputs, canonical_outputs, preimage, task_fingerprint, FINGERPRINT_SCHEMA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    File,
    Directory,
}

impl ArtifactKind {
    pub fn of(base: BaseKind) -> Option<Self> {
        match base {
            BaseKind::File => Some(ArtifactKind::File),
            BaseKind::Directory => Some(ArtifactKind::Directory),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::File => "file",
            ArtifactKind::Directory => "directory",
        }
    }
}

/// A content-addressed file or directory together with the file name it is
/// staged under.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub kind: ArtifactKind,
    pub digest: Digest,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Binding {
    Artifact(ArtifactRef),
    Artifacts(Vec<ArtifactRef>),
    Value(Value),
    /// Not yet known: produced by an upstream task.
    Upstream { task: String, port: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInput {
    pub ty: PortType,
    pub binding: Binding,
    /// Where external artifacts are read from; empty for upstream and value inputs.
    pub sources: Vec<PathBuf>,
    pub from: Reference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutputDecl {
    pub ty: PortType,
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub id: String,
    /// Command template; placeholders are substituted by [`render_argv`].
    pub argv: Vec<String>,
    pub inputs: BTreeMap<String, TaskInput>,
    pub outputs: BTreeMap<String, TaskOutputDecl>,
    pub env: ResolvedEnv,
    pub deps: BTreeSet<String>,
    pub resources: ResourceHints,
}

impl TaskInstance {
    pub fn env_fingerprint(&self) -> Digest {
        self.env.fingerprint
    }

    pub fn value_output_ports(&self) -> BTreeSet<&str> {
        self.outputs.iter().filter(|(_, o)| !o.ty.is_artifact()).map(|(k, _)| k.as_str()).collect()
    }

    pub fn file_output_paths(&self) -> BTreeMap<&str, &str> {
        self.outputs.iter().filter_map(|(k, o)| Some((k.as_str(), o.path.as_deref()?))).collect()
    }

    pub fn is_resolved(&self) -> bool {
        !self.inputs.values().any(|i| matches!(i.binding, Binding::Upstream { .. }))
    }

    /// Substitutes upstream results into `Upstream` bindings.
    pub fn resolve(&self, upstream: &BTreeMap<String, TaskOutputs>) -> Result<TaskInstance, PlanError> {
        let mut t = self.clone();
        for (port, input) in t.inputs.iter_mut() {
            let Binding::Upstream { task, port: up_port } = &input.binding else { continue };
            let unresolved = || PlanError::Unresolved { task: self.id.clone(), port: port.clone() };
            let outs = upstream.get(task).ok_or_else(unresolved)?;
            input.binding = if input.ty.is_artifact() {
                Binding::Artifact(outs.files.get(up_port).cloned().ok_or_else(unresolved)?)
            } else {
                Binding::Value(outs.values.get(up_port).cloned().ok_or_else(unresolved)?)
            };
        }
        Ok(t)
    }
}

/// Results of a completed task, as seen by its consumers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskOutputs {
    pub files: BTreeMap<String, ArtifactRef>,
    pub values: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sink {
    Task { task: String, port: String },
    Param(Binding),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskGraph {
    pub name: String,
    pub tasks: BTreeMap<String, TaskInstance>,
    /// `(producer, consumer)` pairs.
    pub edges: BTreeSet<(String, String)>,
    pub sinks: BTreeMap<String, Sink>,
    pub params: BTreeMap<String, Value>,
    pub param_types: BTreeMap<String, PortType>,
}

impl TaskGraph {
    pub fn ids(&self) -> BTreeSet<String> {
        self.tasks.keys().cloned().collect()
    }

    /// Kahn's algorithm, breaking ties lexicographically.
    pub fn topo_order(&self) -> Vec<String> {
        let mut done = BTreeSet::new();
        let mut order = Vec::with_capacity(self.tasks.len());
        loop {
            let ready = ready_set(self, &done);
            if ready.is_empty() {
                break;
            }
            for id in ready {
                done.insert(id.clone());
                order.push(id);
            }
        }
        order
    }

    /// Transitive consumers of `id`, excluding `id` itself.
    pub fn descendants(&self, id: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id.to_string()];
        while let Some(cur) = stack.pop() {
            for (from, to) in &self.edges {
                if *from == cur && out.insert(to.clone()) {
                    stack.push(to.clone());
                }
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("missing value for param `{0}`")]
    MissingParam(String),
    #[error("unknown param `{0}`")]
    UnknownParam(String),
    #[error("param `{name}`: {source}")]
    ParamType { name: String, source: TypeError },
    #[error("param `{param}`: input {kind} {path} does not exist")]
    MissingInputFile { param: String, kind: &'static str, path: PathBuf },
    #[error("cannot hash {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("process `{process}` environment: {source}")]
    Env { process: String, source: EnvError },
    #[error("task `{task}`: input `{port}` is not resolved")]
    Unresolved { task: String, port: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TypeReport {
    pub mismatches: Vec<Finding>,
}

impl TypeReport {
    pub fn is_ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Static check of every connection in a flattened workflow.
pub fn typecheck(fw: &FlatWorkflow) -> TypeReport {
    TypeReport { mismatches: check_connections(fw) }
}

fn artifact_for(param: &str, kind: ArtifactKind, raw: &str, base_dir: &Path) -> Result<(ArtifactRef, PathBuf), PlanError> {
    let path = base_dir.join(raw);
    let exists = match kind {
        ArtifactKind::File => path.is_file(),
        ArtifactKind::Directory => path.is_dir(),
    };
    if !exists {
        return Err(PlanError::MissingInputFile { param: param.into(), kind: kind.as_str(), path });
    }
    let digest = match kind {
        ArtifactKind::File => crate::digest::Digest::of_file(&path),
        ArtifactKind::Directory => tree::digest_dir(&path),
    }
    .map_err(|source| PlanError::Io { path: path.clone(), source })?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| param.to_string());
    Ok((ArtifactRef { kind, digest, name }, path))
}

fn param_binding(
    name: &str,
    ty: &PortType,
    value: &Value,
    base_dir: &Path,
) -> Result<(Binding, Vec<PathBuf>), PlanError> {
    let Some(kind) = ArtifactKind::of(ty.base) else {
        return Ok((Binding::Value(value.clone()), Vec::new()));
    };
    match value {
        Value::Path(p) => {
            let (a, src) = artifact_for(name, kind, p, base_dir)?;
            Ok((Binding::Artifact(a), vec![src]))
        }
        Value::Array(items) => {
            let mut refs = Vec::new();
            let mut sources = Vec::new();
            for item in items {
                let Value::Path(p) = item else {
                    return Err(PlanError::Invalid(format!("param `{name}`: expected paths")));
                };
                let (a, src) = artifact_for(name, kind, p, base_dir)?;
                refs.push(a);
                sources.push(src);
            }
            Ok((Binding::Artifacts(refs), sources))
        }
        _ => Err(PlanError::Invalid(format!("param `{name}`: expected a path"))),
    }
}

/// Builds one task per process. Relative file params resolve against
/// `base_dir`; external input files are hashed by content. Deterministic.
pub fn build_graph(
    fw: &FlatWorkflow,
    param_values: &BTreeMap<String, Value>,
    base_dir: &Path,
    envs: &EnvRegistry,
) -> Result<TaskGraph, PlanError> {
    for name in param_values.keys() {
        if !fw.params.contains_key(name) {
            return Err(PlanError::UnknownParam(name.clone()));
        }
    }
    let mut params = BTreeMap::new();
    let mut param_types = BTreeMap::new();
    let mut bindings = BTreeMap::new();
    for (name, decl) in &fw.params {
        let value = match (param_values.get(name), &decl.default) {
            (Some(v), _) => {
                v.check(&decl.ty).map_err(|source| PlanError::ParamType { name: name.clone(), source })?;
                v.clone()
            }
            (None, Some(default)) => Value::from_json(default, &decl.ty)
                .map_err(|source| PlanError::ParamType { name: name.clone(), source })?,
            (None, None) => return Err(PlanError::MissingParam(name.clone())),
        };
        bindings.insert(name.clone(), param_binding(name, &decl.ty, &value, base_dir)?);
        params.insert(name.clone(), value);
        param_types.insert(name.clone(), decl.ty.clone());
    }

    let mut tasks = BTreeMap::new();
    let mut edges = BTreeSet::new();
    for p in &fw.processes {
        let ProcessBody::Command(argv) = &p.body else {
            return Err(PlanError::Invalid(format!("process `{}` was not flattened", p.id)));
        };
        let mut inputs = BTreeMap::new();
        let mut deps = BTreeSet::new();
        for (port, input) in &p.inputs {
            let (binding, sources) = match &input.from {
                Reference::Param(name) => {
                    bindings.get(name).cloned().ok_or_else(|| PlanError::MissingParam(name.clone()))?
                }
                Reference::Output { process, port: up } => {
                    deps.insert(process.clone());
                    edges.insert((process.clone(), p.id.clone()));
                    (Binding::Upstream { task: process.clone(), port: up.clone() }, Vec::new())
                }
            };
            inputs.insert(port.clone(), TaskInput { ty: input.ty.clone(), binding, sources, from: input.from.clone() });
        }
        let outputs = p
            .outputs
            .iter()
            .map(|(k, o)| (k.clone(), TaskOutputDecl { ty: o.ty.clone(), path: o.path.clone() }))
            .collect();
        let spec = p.env.clone().or_else(|| fw.env.clone()).unwrap_or(EnvSpec::None);
        let env = envs.resolve(&spec, base_dir).map_err(|source| PlanError::Env { process: p.id.clone(), source })?;
        tasks.insert(
            p.id.clone(),
            TaskInstance {
                id: p.id.clone(),
                argv: argv.clone(),
                inputs,
                outputs,
                env,
                deps,
                resources: p.resources.clone().unwrap_or_default(),
            },
        );
    }
    for (from, to) in &edges {
        if !tasks.contains_key(from) {
            return Err(PlanError::Invalid(format!("`{to}` depends on unknown process `{from}`")));
        }
    }

    let sinks = fw
        .outputs
        .iter()
        .map(|(name, r)| {
            let sink = match r {
                Reference::Param(p) => Sink::Param(bindings[p].0.clone()),
                Reference::Output { process, port } => Sink::Task { task: process.clone(), port: port.clone() },
            };
            (name.clone(), sink)
        })
        .collect();

    Ok(TaskGraph { name: fw.name.clone(), tasks, edges, sinks, params, param_types })
}

/// Tasks not yet completed whose dependencies all are, in id order.
pub fn ready_set(g: &TaskGraph, completed: &BTreeSet<String>) -> BTreeSet<String> {
    g.tasks
        .values()
        .filter(|t| !completed.contains(&t.id) && t.deps.iter().all(|d| completed.contains(d)))
        .map(|t| t.id.clone())
        .collect()
}

/// Relative staging path of an input artifact inside a task directory.
pub fn staged_path(port: &str, index: Option<usize>, name: &str) -> String {
    match index {
        Some(i) => format!("{INPUTS_DIR}/{port}/{i}/{name}"),
        None => format!("{INPUTS_DIR}/{port}/{name}"),
    }
}

fn substitute(t: &TaskInstance, is_input: bool, port: &str) -> Result<Vec<String>, PlanError> {
    let unresolved = || PlanError::Unresolved { task: t.id.clone(), port: port.to_string() };
    if !is_input {
        let out = t.outputs.get(port).ok_or_else(unresolved)?;
        return Ok(vec![out.path.clone().unwrap_or_else(|| VALUE_MANIFEST.to_string())]);
    }
    let input = t.inputs.get(port).ok_or_else(unresolved)?;
    Ok(match &input.binding {
        Binding::Artifact(a) => vec![staged_path(port, None, &a.name)],
        Binding::Artifacts(items) => items.iter().enumerate().map(|(i, a)| staged_path(port, Some(i), &a.name)).collect(),
        Binding::Value(Value::Array(items)) => items.iter().map(Value::render).collect(),
        Binding::Value(v) => vec![v.render()],
        Binding::Upstream { .. } => return Err(unresolved()),
    })
}

/// Concrete argv of a resolved task. An argument that consists of exactly
/// one array-valued placeholder expands to one argument per element.
pub fn render_argv(t: &TaskInstance) -> Result<Vec<String>, PlanError> {
    let mut out = Vec::with_capacity(t.argv.len());
    for arg in &t.argv {
        let holes = crate::model::placeholders_of(arg);
        if holes.len() == 1 && holes[0].2 == (0..arg.len()) {
            out.extend(substitute(t, holes[0].0, &holes[0].1)?);
            continue;
        }
        let mut rendered = String::new();
        let mut last = 0;
        for (is_input, port, range) in holes {
            rendered.push_str(&arg[last..range.start]);
            rendered.push_str(&substitute(t, is_input, &port)?.join(" "));
            last = range.end;
        }
        rendered.push_str(&arg[last..]);
        out.push(rendered);
    }
    Ok(out)
}
