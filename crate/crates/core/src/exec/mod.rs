//! Task execution backends.
//!
//! Every backend receives a [`TaskSpec`]: an empty working directory, the
//! files to stage into it, and the outputs it must produce. Value outputs are
//! read from [`VALUE_MANIFEST`], a flat JSON object the command writes into
//! its working directory.

mod batch;
mod config;
mod local;
mod remote;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Digest;
use crate::model::ResourceHints;
use crate::planner::{ArtifactKind, ArtifactRef};
use crate::tree;
use crate::value::{PortType, TypeError, Value};

pub use batch::{
    render_job_script, run_spool, BatchAdapter, BatchExecutor, BatchJobState, JobTemplate, MockBatch, RunnerHandle,
    SlurmAdapter, DEFAULT_TEMPLATE,
};
pub use config::{ExecutorConfig, ExecutorKind};
pub use local::LocalExecutor;
pub use remote::{LoopbackTransport, RemoteExecutor, TransferDirection, TransferEntry, Transport};

/// Directory (relative to the task workdir) under which inputs are staged.
pub const INPUTS_DIR: &str = "inputs";
/// Value-output manifest written by the command.
pub const VALUE_MANIFEST: &str = "outputs.json";

/// A file to place into the task workdir before the command starts.
/// `source: None` creates an empty directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagedInput {
    pub rel_path: String,
    pub source: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedOutput {
    pub ty: PortType,
    /// Relative path for file and directory ports; `None` for value ports.
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub argv: Vec<String>,
    pub workdir: PathBuf,
    pub inputs: Vec<StagedInput>,
    pub outputs: BTreeMap<String, ExpectedOutput>,
    pub wrapper: Vec<String>,
    pub resources: ResourceHints,
    pub stdout: PathBuf,
    pub stderr: PathBuf,
}

impl TaskSpec {
    /// Wrapper prefix followed by the command.
    pub fn full_argv(&self) -> Vec<String> {
        self.wrapper.iter().chain(&self.argv).cloned().collect()
    }

    pub fn has_value_outputs(&self) -> bool {
        self.outputs.values().any(|o| o.path.is_none())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.workdir.join(VALUE_MANIFEST)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    pub stdout: PathBuf,
    pub stderr: PathBuf,
    pub outputs: BTreeMap<String, ArtifactRef>,
    pub values: BTreeMap<String, Value>,
    pub host: String,
}

impl Outcome {
    pub fn success(&self) -> bool {
        self.exit_code == 0
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("cannot start `{program}`: {source}")]
    Spawn { program: String, source: io::Error },
    #[error("declared output `{0}` was not produced")]
    MissingOutput(String),
    #[error("output `{port}` has an invalid value: {message}")]
    BadValue { port: String, message: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("batch system error: {0}")]
    Batch(String),
    #[error("I/O error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("unknown executor `{0}`")]
    Unknown(String),
}

impl ExecError {
    pub fn class(&self) -> &'static str {
        match self {
            ExecError::Spawn { .. } => "spawn",
            ExecError::MissingOutput(_) => "missing-output",
            ExecError::BadValue { .. } => "bad-value",
            ExecError::Transport(_) => "transport",
            ExecError::Batch(_) => "batch",
            ExecError::Io { .. } => "io",
            ExecError::Unknown(_) => "unknown-executor",
        }
    }
}

pub(crate) fn io_error(path: &Path) -> impl FnOnce(io::Error) -> ExecError + '_ {
    move |source| ExecError::Io { path: path.to_path_buf(), source }
}

pub trait Executor: Send + Sync {
    fn name(&self) -> String;
    fn execute(&self, spec: &TaskSpec) -> Result<Outcome, ExecError>;
}

/// Best-effort host name for provenance.
pub fn hostname() -> String {
    fs::read_to_string("/proc/sys/kernel/hostname")
        .or_else(|_| fs::read_to_string("/etc/hostname"))
        .map(|s| s.trim().to_string())
        .ok()
        .filter(|s| !s.is_empty())
        .or_else(|| std::env::var("HOSTNAME").ok())
        .unwrap_or_else(|| "localhost".to_string())
}

/// Links (or copies) every staged input into `root`.
pub(crate) fn stage_inputs_into(spec: &TaskSpec, root: &Path) -> Result<(), ExecError> {
    for input in &spec.inputs {
        let dest = root.join(&input.rel_path);
        match &input.source {
            Some(src) => crate::cache::link_or_copy(src, &dest).map_err(io_error(&dest))?,
            None => fs::create_dir_all(&dest).map_err(io_error(&dest))?,
        }
    }
    Ok(())
}

fn file_name_of(path: &str) -> String {
    Path::new(path).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.to_string())
}

/// Reads the declared outputs of a finished command from `spec.workdir`.
/// Nonzero exit codes yield an outcome without outputs.
pub fn collect_outcome(spec: &TaskSpec, exit_code: i32, host: String) -> Result<Outcome, ExecError> {
    let mut outcome = Outcome {
        exit_code,
        stdout: spec.stdout.clone(),
        stderr: spec.stderr.clone(),
        outputs: BTreeMap::new(),
        values: BTreeMap::new(),
        host,
    };
    if exit_code != 0 {
        return Ok(outcome);
    }
    let mut manifest: Option<serde_json::Map<String, serde_json::Value>> = None;
    for (port, out) in &spec.outputs {
        match &out.path {
            Some(rel) => {
                let path = spec.workdir.join(rel);
                let kind = ArtifactKind::of(out.ty.base).unwrap_or(ArtifactKind::File);
                let digest = match kind {
                    ArtifactKind::File if path.is_file() => Digest::of_file(&path),
                    ArtifactKind::Directory if path.is_dir() => tree::digest_dir(&path),
                    _ => return Err(ExecError::MissingOutput(port.clone())),
                }
                .map_err(io_error(&path))?;
                outcome.outputs.insert(port.clone(), ArtifactRef { kind, digest, name: file_name_of(rel) });
            }
            None => {
                if manifest.is_none() {
                    manifest = Some(read_manifest(spec, port)?);
                }
                let json = manifest.as_ref().unwrap().get(port).ok_or_else(|| ExecError::MissingOutput(port.clone()))?;
                let value = Value::from_json(json, &out.ty)
                    .map_err(|e: TypeError| ExecError::BadValue { port: port.clone(), message: e.to_string() })?;
                outcome.values.insert(port.clone(), value);
            }
        }
    }
    Ok(outcome)
}

fn read_manifest(spec: &TaskSpec, port: &str) -> Result<serde_json::Map<String, serde_json::Value>, ExecError> {
    let path = spec.manifest_path();
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(ExecError::MissingOutput(port.to_string())),
        Err(e) => return Err(ExecError::Io { path, source: e }),
    };
    match serde_json::from_str(&text) {
        Ok(serde_json::Value::Object(map)) => Ok(map),
        Ok(_) => Err(ExecError::BadValue { port: port.into(), message: format!("{VALUE_MANIFEST} is not a JSON object") }),
        Err(e) => Err(ExecError::BadValue { port: port.into(), message: format!("{VALUE_MANIFEST}: {e}") }),
    }
}

/// How a finished child process maps to an exit code; signals map to 128+n.
pub(crate) fn exit_code_of(status: std::process::ExitStatus) -> i32 {
    if let Some(code) = status.code() {
        return code;
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return 128 + sig;
        }
    }
    -1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorInfo {
    pub name: String,
    pub host: String,
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::value::BaseKind;

    pub fn spec(dir: &Path, argv: &[&str], outputs: &[(&str, PortType, Option<&str>)]) -> TaskSpec {
        let workdir = dir.join("work");
        fs::create_dir_all(&workdir).unwrap();
        fs::create_dir_all(dir.join("logs")).unwrap();
        TaskSpec {
            task_id: "t".into(),
            argv: argv.iter().map(|s| s.to_string()).collect(),
            workdir,
            inputs: vec![],
            outputs: outputs
                .iter()
                .map(|(p, ty, path)| (p.to_string(), ExpectedOutput { ty: ty.clone(), path: path.map(str::to_string) }))
                .collect(),
            wrapper: vec![],
            resources: ResourceHints::default(),
            stdout: dir.join("logs/t.stdout"),
            stderr: dir.join("logs/t.stderr"),
        }
    }

    pub fn file() -> PortType {
        PortType::scalar(BaseKind::File)
    }

    pub fn integer() -> PortType {
        PortType::scalar(BaseKind::Integer)
    }
}
