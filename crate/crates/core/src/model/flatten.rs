use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use thiserror::Error;

use super::validate::source_type;
use super::{
    find_cycle, parse_workflow, validate, EnvSpec, Finding, FlatWorkflow, ParamDecl, ParseError, ProcessBody,
    ProcessDef, Reference, WorkflowDef,
};

#[derive(Debug, Error)]
pub enum FlattenError {
    #[error("include cycle: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(" -> "))]
    IncludeCycle(Vec<PathBuf>),
    #[error("missing subworkflow file {0}")]
    MissingFile(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: ParseError },
    #[error("{path}: {}", .findings.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid { path: PathBuf, findings: Vec<Finding> },
    #[error("input-mapping type mismatch at {at}: parent declares {declared}, subworkflow has {actual}")]
    TypeMismatch { at: String, declared: String, actual: String },
    #[error("process `{process}` maps `{name}`, which its subworkflow does not declare")]
    UnknownMapping { process: String, name: String },
    #[error("process `{process}` does not supply required subworkflow param `{param}`")]
    UnmappedParam { process: String, param: String },
    #[error("`{process}.{port}` is not an output of its subworkflow")]
    UnknownOutput { process: String, port: String },
    #[error("flattened workflow has a cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
}

/// Resolves subworkflow paths to definitions.
pub trait WorkflowLoader {
    fn load(&self, path: &Path) -> Result<WorkflowDef, FlattenError>;
}

pub struct FsLoader;

impl WorkflowLoader for FsLoader {
    fn load(&self, path: &Path) -> Result<WorkflowDef, FlattenError> {
        if !path.is_file() {
            return Err(FlattenError::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| FlattenError::Io { path: path.into(), source })?;
        parse_workflow(&text).map_err(|source| FlattenError::Parse { path: path.into(), source })
    }
}

/// Lexical normalization; the loader may not be backed by a real filesystem.
fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

fn rebase(sub_rel: &str, path: &str) -> String {
    if Path::new(path).is_absolute() {
        return path.to_string();
    }
    let dir = Path::new(sub_rel).parent().unwrap_or(Path::new(""));
    normalize(&dir.join(path)).to_string_lossy().into_owned()
}

fn rebase_env(sub_rel: &str, env: EnvSpec) -> EnvSpec {
    match env {
        EnvSpec::Recipe(path) => EnvSpec::Recipe(rebase(sub_rel, &path)),
        other => other,
    }
}

/// Loads `path` and flattens it; returns the parsed and the flattened form.
pub fn flatten_file(path: &Path, loader: &dyn WorkflowLoader) -> Result<(WorkflowDef, FlatWorkflow), FlattenError> {
    let def = loader.load(path)?;
    let flat = flatten(&def, path, loader)?;
    Ok((def, flat))
}

/// Inlines every subworkflow process. `origin` is the path `def` was read
/// from; subworkflow paths resolve relative to its directory.
pub fn flatten(def: &WorkflowDef, origin: &Path, loader: &dyn WorkflowLoader) -> Result<FlatWorkflow, FlattenError> {
    let mut stack = vec![normalize(origin)];
    let flat = flatten_in(def, origin, loader, &mut stack)?;
    if let Some(ids) = find_cycle(&flat.dependencies()) {
        return Err(FlattenError::Cycle(ids));
    }
    Ok(FlatWorkflow::new(flat).expect("flattened workflow has no subworkflows"))
}

struct Inlined {
    processes: Vec<ProcessDef>,
    outputs: BTreeMap<String, Reference>,
}

fn flatten_in(
    def: &WorkflowDef,
    origin: &Path,
    loader: &dyn WorkflowLoader,
    stack: &mut Vec<PathBuf>,
) -> Result<WorkflowDef, FlattenError> {
    if !def.has_subworkflows() {
        return Ok(def.clone());
    }
    let base = origin.parent().unwrap_or(Path::new(""));
    let mut params = def.params.clone();
    let mut inlined: BTreeMap<String, Inlined> = BTreeMap::new();

    for p in &def.processes {
        let ProcessBody::Subworkflow(rel) = &p.body else { continue };
        let path = normalize(&base.join(rel));
        if stack.contains(&path) {
            let mut chain = stack.clone();
            chain.push(path);
            return Err(FlattenError::IncludeCycle(chain));
        }
        let inner = loader.load(&path)?;
        let report = validate(&inner, path.parent().unwrap_or(Path::new("")));
        if !report.is_ok() {
            return Err(FlattenError::Invalid { path, findings: report.findings });
        }
        stack.push(path.clone());
        let inner = flatten_in(&inner, &path, loader, stack)?;
        stack.pop();

        for (name, input) in &p.inputs {
            let Some(param) = inner.params.get(name) else {
                return Err(FlattenError::UnknownMapping { process: p.id.clone(), name: name.clone() });
            };
            if !param.ty.accepts(&input.ty) {
                return Err(FlattenError::TypeMismatch {
                    at: format!("{}.inputs.{name}", p.id),
                    declared: input.ty.to_string(),
                    actual: param.ty.to_string(),
                });
            }
        }

        let ns = |id: &str| format!("{}.{id}", p.id);
        for (name, param) in &inner.params {
            if p.inputs.contains_key(name) {
                continue;
            }
            let Some(default) = &param.default else {
                return Err(FlattenError::UnmappedParam { process: p.id.clone(), param: name.clone() });
            };
            let default = match default {
                serde_json::Value::String(s) if param.ty.is_artifact() && !param.ty.array => {
                    serde_json::Value::String(rebase(rel, s))
                }
                other => other.clone(),
            };
            params.insert(ns(name), ParamDecl { ty: param.ty.clone(), default: Some(default) });
        }

        let rename = |r: &Reference| -> Reference {
            match r {
                Reference::Param(name) => match p.inputs.get(name) {
                    Some(input) => input.from.clone(),
                    None => Reference::Param(ns(name)),
                },
                Reference::Output { process, port } => Reference::output(ns(process), port.clone()),
            }
        };

        let processes = inner
            .processes
            .iter()
            .map(|q| {
                let env = q.env.clone().or_else(|| inner.env.clone()).map(|e| rebase_env(rel, e));
                let env = env.or_else(|| p.env.clone());
                let mut q = q.clone();
                q.id = ns(&q.id);
                for input in q.inputs.values_mut() {
                    input.from = rename(&input.from);
                }
                q.env = env;
                q
            })
            .collect();

        let mut outputs = BTreeMap::new();
        for (port, out) in &p.outputs {
            let Some(inner_ref) = inner.outputs.get(port) else {
                return Err(FlattenError::UnknownOutput { process: p.id.clone(), port: port.clone() });
            };
            if let Some(actual) = source_type(&inner, inner_ref) {
                if !out.ty.accepts(actual) {
                    return Err(FlattenError::TypeMismatch {
                        at: format!("{}.outputs.{port}", p.id),
                        declared: out.ty.to_string(),
                        actual: actual.to_string(),
                    });
                }
            }
            outputs.insert(port.clone(), rename(inner_ref));
        }
        inlined.insert(p.id.clone(), Inlined { processes, outputs });
    }

    // References into subworkflow processes may pass through several
    // levels of parameter forwarding before reaching a real producer.
    let resolve = |r: &Reference| -> Result<Reference, FlattenError> {
        let mut current = r.clone();
        for _ in 0..=inlined.len() {
            match &current {
                Reference::Output { process, port } if inlined.contains_key(process) => {
                    current = inlined[process]
                        .outputs
                        .get(port)
                        .cloned()
                        .ok_or_else(|| FlattenError::UnknownOutput { process: process.clone(), port: port.clone() })?;
                }
                _ => return Ok(current),
            }
        }
        Ok(current)
    };

    let mut processes = Vec::new();
    for p in &def.processes {
        let expanded: Vec<ProcessDef> = match inlined.get(&p.id) {
            Some(sub) => sub.processes.clone(),
            None => vec![p.clone()],
        };
        for mut q in expanded {
            for input in q.inputs.values_mut() {
                input.from = resolve(&input.from)?;
            }
            processes.push(q);
        }
    }
    let outputs = def.outputs.iter().map(|(k, r)| Ok((k.clone(), resolve(r)?))).collect::<Result<_, FlattenError>>()?;

    Ok(WorkflowDef {
        format_version: def.format_version,
        name: def.name.clone(),
        env: def.env.clone(),
        params,
        processes,
        outputs,
    })
}
