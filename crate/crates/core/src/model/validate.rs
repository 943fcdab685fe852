use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Component, Path, PathBuf};

use serde::Serialize;

use super::{EnvSpec, ProcessBody, Reference, WorkflowDef, FORMAT_VERSION};
use crate::value::{PortType, Value};

/// One problem found in a workflow definition.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "class", rename_all = "kebab-case")]
pub enum FindingKind {
    UnresolvedReference { at: String, reference: String },
    Cycle { ids: Vec<String> },
    TypeMismatch { producer: String, consumer: String, producer_type: String, consumer_type: String },
    MissingFile { path: PathBuf },
    Invalid { message: String },
}

pub type Finding = FindingKind;

impl FindingKind {
    pub fn class(&self) -> &'static str {
        match self {
            FindingKind::UnresolvedReference { .. } => "unresolved-reference",
            FindingKind::Cycle { .. } => "cycle",
            FindingKind::TypeMismatch { .. } => "type-mismatch",
            FindingKind::MissingFile { .. } => "missing-file",
            FindingKind::Invalid { .. } => "invalid",
        }
    }

    pub(crate) fn mismatch(producer: String, consumer: String, producer_ty: &PortType, consumer_ty: &PortType) -> Self {
        FindingKind::TypeMismatch {
            producer,
            consumer,
            producer_type: producer_ty.to_string(),
            consumer_type: consumer_ty.to_string(),
        }
    }
}

impl fmt::Display for FindingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FindingKind::UnresolvedReference { at, reference } => write!(f, "{at}: unresolved reference `{reference}`"),
            FindingKind::Cycle { ids } => write!(f, "cycle detected: {}", ids.join(" -> ")),
            FindingKind::TypeMismatch { producer, consumer, producer_type, consumer_type } => {
                write!(f, "type mismatch: {producer} ({producer_type}) -> {consumer} ({consumer_type})")
            }
            FindingKind::MissingFile { path } => write!(f, "missing referenced file {}", path.display()),
            FindingKind::Invalid { message } => f.write_str(message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has_class(&self, class: &str) -> bool {
        self.findings.iter().any(|f| f.class() == class)
    }
}

fn invalid(message: String) -> Finding {
    FindingKind::Invalid { message }
}

/// Type of whatever `r` points at, if it resolves.
pub(crate) fn source_type<'a>(def: &'a WorkflowDef, r: &Reference) -> Option<&'a PortType> {
    match r {
        Reference::Param(name) => def.params.get(name).map(|p| &p.ty),
        Reference::Output { process, port } => def.process(process)?.outputs.get(port).map(|o| &o.ty),
    }
}

/// Type-checks every resolvable producer→consumer connection.
pub fn check_connections(def: &WorkflowDef) -> Vec<Finding> {
    let mut findings = Vec::new();
    for p in &def.processes {
        for (port, input) in &p.inputs {
            if let Some(producer) = source_type(def, &input.from) {
                if !input.ty.accepts(producer) {
                    findings.push(FindingKind::mismatch(
                        input.from.to_string(),
                        format!("{}.{port}", p.id),
                        producer,
                        &input.ty,
                    ));
                }
            }
        }
    }
    findings
}

/// Finds a dependency cycle, returned as ids along `depends-on` edges and
/// rotated to start at the smallest id (`[A, B]`: A consumes B, B consumes A).
pub fn find_cycle(deps: &BTreeMap<String, BTreeSet<String>>) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Done,
    }
    fn visit<'a>(
        node: &'a str,
        deps: &'a BTreeMap<String, BTreeSet<String>>,
        marks: &mut BTreeMap<&'a str, Mark>,
        stack: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        marks.insert(node, Mark::Open);
        stack.push(node);
        for dep in deps.get(node).into_iter().flatten() {
            match marks.get(dep.as_str()) {
                Some(Mark::Open) => {
                    let start = stack.iter().position(|n| *n == dep.as_str()).unwrap();
                    let mut cycle: Vec<String> = stack[start..].iter().map(|s| s.to_string()).collect();
                    let min = cycle.iter().enumerate().min_by_key(|(_, id)| id.as_str()).map(|(i, _)| i).unwrap();
                    cycle.rotate_left(min);
                    return Some(cycle);
                }
                Some(Mark::Done) => {}
                None if deps.contains_key(dep) => {
                    if let Some(c) = visit(dep, deps, marks, stack) {
                        return Some(c);
                    }
                }
                None => {}
            }
        }
        stack.pop();
        marks.insert(node, Mark::Done);
        None
    }

    let mut marks = BTreeMap::new();
    for node in deps.keys() {
        if !marks.contains_key(node.as_str()) {
            let mut stack = Vec::new();
            if let Some(c) = visit(node, deps, &mut marks, &mut stack) {
                return Some(c);
            }
        }
    }
    None
}

fn check_relative_path(path: &str) -> Result<(), String> {
    let p = Path::new(path);
    if path.is_empty() || p.is_absolute() {
        return Err(format!("path `{path}` must be relative and nonempty"));
    }
    if p.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
        return Err(format!("path `{path}` must stay inside the task directory"));
    }
    Ok(())
}

fn check_env(env: &EnvSpec, at: &str, base_dir: &Path, findings: &mut Vec<Finding>) {
    match env {
        EnvSpec::Manifest(pkgs) => {
            for pkg in pkgs {
                if pkg.name.trim().is_empty() || pkg.version.trim().is_empty() {
                    findings.push(invalid(format!("{at}: manifest entries need a nonempty name and version")));
                }
            }
        }
        EnvSpec::Image(reference) if reference.trim().is_empty() => {
            findings.push(invalid(format!("{at}: image reference must not be empty")));
        }
        EnvSpec::Recipe(path) => {
            let full = base_dir.join(path);
            if !full.is_file() {
                findings.push(FindingKind::MissingFile { path: full });
            }
        }
        _ => {}
    }
}

/// Static checks run before anything executes. `base_dir` is the directory
/// of the workflow file; recipe and subworkflow paths resolve against it.
pub fn validate(def: &WorkflowDef, base_dir: &Path) -> ValidationReport {
    let mut findings = Vec::new();

    if let Some(v) = def.format_version {
        if v != FORMAT_VERSION {
            findings.push(invalid(format!("unsupported formatVersion {v} (expected {FORMAT_VERSION})")));
        }
    }
    if let Some(env) = &def.env {
        check_env(env, "workflow env", base_dir, &mut findings);
    }

    for (name, param) in &def.params {
        if let Some(default) = &param.default {
            if let Err(e) = Value::from_json(default, &param.ty) {
                findings.push(invalid(format!("param `{name}`: default value: {e}")));
            }
        }
    }

    for p in &def.processes {
        for (port, input) in &p.inputs {
            if source_type(def, &input.from).is_none() {
                findings.push(FindingKind::UnresolvedReference {
                    at: format!("{}.inputs.{port}", p.id),
                    reference: input.from.to_string(),
                });
            }
        }

        let mut paths = BTreeSet::new();
        for (port, out) in &p.outputs {
            let at = format!("{}.outputs.{port}", p.id);
            match (&p.body, out.ty.is_artifact(), &out.path) {
                (ProcessBody::Subworkflow(_), _, Some(_)) => {
                    findings.push(invalid(format!("{at}: subworkflow outputs take no path")));
                }
                (ProcessBody::Subworkflow(_), _, None) => {}
                (_, true, None) => findings.push(invalid(format!("{at}: {} outputs need a `path`", out.ty.type_name()))),
                (_, false, Some(_)) => findings.push(invalid(format!("{at}: value outputs take no `path`"))),
                (_, true, Some(path)) => {
                    if out.ty.array {
                        findings.push(invalid(format!("{at}: array outputs of files or directories are not supported")));
                    } else if let Err(e) = check_relative_path(path) {
                        findings.push(invalid(format!("{at}: {e}")));
                    } else if path == crate::exec::VALUE_MANIFEST || path.starts_with(crate::exec::INPUTS_DIR) {
                        findings.push(invalid(format!("{at}: path `{path}` is reserved")));
                    } else if !paths.insert(path.trim_start_matches("./").to_string()) {
                        findings.push(invalid(format!("{at}: path `{path}` used by two outputs")));
                    }
                }
                (_, false, None) => {}
            }
        }

        if let Some(env) = &p.env {
            check_env(env, &format!("{} env", p.id), base_dir, &mut findings);
        }
        if let ProcessBody::Subworkflow(path) = &p.body {
            let full = base_dir.join(path);
            if !full.is_file() {
                findings.push(FindingKind::MissingFile { path: full });
            }
        }
    }

    for (name, r) in &def.outputs {
        if source_type(def, r).is_none() {
            findings.push(FindingKind::UnresolvedReference { at: format!("outputs.{name}"), reference: r.to_string() });
        }
    }

    let deps = def.dependencies();
    if let Some(ids) = find_cycle(&deps) {
        findings.push(FindingKind::Cycle { ids });
    }

    findings.extend(check_connections(def));
    ValidationReport { findings }
}
