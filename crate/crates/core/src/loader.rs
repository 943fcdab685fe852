//! Reading a workflow file into a checked, flattened definition.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::digest::Digest;
use crate::envprov::EnvRegistry;
use crate::model::{flatten, parse_workflow, validate, FlatWorkflow, Finding, FlattenError, FsLoader, ParseError, WorkflowDef};
use crate::planner::{build_graph, typecheck, PlanError, TaskGraph};
use crate::runstate::WorkflowInfo;
use crate::value::{TypeError, Value};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: ParseError },
    #[error(transparent)]
    Flatten(#[from] FlattenError),
    #[error("{path}: {} problem(s):\n{}", .findings.len(), .findings.iter().map(|f| format!("  {f}")).collect::<Vec<_>>().join("\n"))]
    Invalid { path: PathBuf, findings: Vec<Finding> },
    #[error("unknown param `{0}`")]
    UnknownParam(String),
    #[error("--param expects NAME=VALUE, got `{0}`")]
    ParamSyntax(String),
    #[error("param `{name}`: {source}")]
    ParamType { name: String, source: TypeError },
}

#[derive(Debug, Clone)]
pub struct LoadedWorkflow {
    pub path: PathBuf,
    pub base_dir: PathBuf,
    pub def: WorkflowDef,
    pub flat: FlatWorkflow,
    pub info: WorkflowInfo,
}

/// Parses, validates, flattens and typechecks `path`.
pub fn load_workflow(path: &Path) -> Result<LoadedWorkflow, LoadError> {
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io { path: path.into(), source })?;
    let def = parse_workflow(&text).map_err(|source| LoadError::Parse { path: path.into(), source })?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let report = validate(&def, &base_dir);
    if !report.is_ok() {
        return Err(LoadError::Invalid { path: path.into(), findings: report.findings });
    }
    let flat = flatten(&def, path, &FsLoader)?;
    let types = typecheck(&flat);
    if !types.is_ok() {
        return Err(LoadError::Invalid { path: path.into(), findings: types.mismatches });
    }
    let info = WorkflowInfo {
        name: def.name.clone(),
        path: Some(path.display().to_string()),
        digest: Digest::of_bytes(text.as_bytes()),
    };
    Ok(LoadedWorkflow { path: path.into(), base_dir, def, flat, info })
}

impl LoadedWorkflow {
    /// Parses `NAME=VALUE` pairs against the declared param types.
    pub fn parse_params<S: AsRef<str>>(&self, pairs: &[S]) -> Result<BTreeMap<String, Value>, LoadError> {
        let mut out = BTreeMap::new();
        for pair in pairs {
            let pair = pair.as_ref();
            let (name, text) = pair.split_once('=').ok_or_else(|| LoadError::ParamSyntax(pair.to_string()))?;
            let decl = self.flat.params.get(name).ok_or_else(|| LoadError::UnknownParam(name.to_string()))?;
            let v = Value::parse_text(text, &decl.ty).map_err(|source| LoadError::ParamType { name: name.into(), source })?;
            out.insert(name.to_string(), v);
        }
        Ok(out)
    }

    pub fn graph(&self, params: &BTreeMap<String, Value>, envs: &EnvRegistry) -> Result<TaskGraph, PlanError> {
        build_graph(&self.flat, params, &self.base_dir, envs)
    }
}
