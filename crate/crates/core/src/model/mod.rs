//! Workflow definitions: data model, parsing, validation and flattening of
//! nested compositions.

mod flatten;
mod parse;
mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::value::PortType;

pub use flatten::{flatten, flatten_file, FlattenError, FsLoader, WorkflowLoader};
pub use parse::{parse_workflow, to_json_string, ParseError, ParseErrorKind};
pub(crate) use parse::placeholders as placeholders_of;
pub use validate::{check_connections, find_cycle, validate, Finding, FindingKind, ValidationReport};

/// The only accepted value of the optional `formatVersion` key.
pub const FORMAT_VERSION: u32 = 1;

/// Name under which workflow parameters are referenced (`params.<name>`).
pub const PARAMS_NAMESPACE: &str = "params";

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowDef {
    pub format_version: Option<u32>,
    pub name: String,
    /// Default environment for processes that declare none.
    pub env: Option<EnvSpec>,
    pub params: BTreeMap<String, ParamDecl>,
    pub processes: Vec<ProcessDef>,
    pub outputs: BTreeMap<String, Reference>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub ty: PortType,
    pub default: Option<Json>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessDef {
    pub id: String,
    pub body: ProcessBody,
    pub inputs: BTreeMap<String, InputDecl>,
    pub outputs: BTreeMap<String, OutputDecl>,
    pub env: Option<EnvSpec>,
    pub resources: Option<ResourceHints>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProcessBody {
    /// argv template with `{inputs.X}` / `{outputs.Y}` placeholders.
    Command(Vec<String>),
    /// Relative path of an embedded workflow; `inputs` map onto its params.
    Subworkflow(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputDecl {
    pub ty: PortType,
    pub from: Reference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputDecl {
    pub ty: PortType,
    /// Path relative to the task directory; required for file and directory ports.
    pub path: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceHints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpus: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walltime: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Package {
    pub name: String,
    pub version: String,
}

/// Compute environment of a process.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvSpec {
    #[default]
    None,
    Manifest(Vec<Package>),
    Image(String),
    /// Container build recipe, relative to the declaring workflow file.
    Recipe(String),
}

impl EnvSpec {
    pub fn variant(&self) -> &'static str {
        match self {
            EnvSpec::None => "none",
            EnvSpec::Manifest(_) => "manifest",
            EnvSpec::Image(_) => "image",
            EnvSpec::Recipe(_) => "recipe",
        }
    }
}

/// Source of a process input or workflow output.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reference {
    Param(String),
    Output { process: String, port: String },
}

impl Reference {
    pub fn output(process: impl Into<String>, port: impl Into<String>) -> Self {
        Reference::Output { process: process.into(), port: port.into() }
    }

    pub fn process(&self) -> Option<&str> {
        match self {
            Reference::Output { process, .. } => Some(process),
            Reference::Param(_) => None,
        }
    }
}

impl FromStr for Reference {
    type Err = String;

    /// `params.<name>` or `<process-id>.<port>`; process ids of flattened
    /// workflows may contain dots, port names never do.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (head, port) = s.rsplit_once('.').ok_or_else(|| format!("reference `{s}` must look like `process.port` or `params.name`"))?;
        if head.is_empty() || port.is_empty() {
            return Err(format!("reference `{s}` has an empty component"));
        }
        if head == PARAMS_NAMESPACE {
            Ok(Reference::Param(port.to_string()))
        } else if let Some(name) = s.strip_prefix("params.") {
            // namespaced params of inlined workflows, e.g. `params.meshing.size`
            Ok(Reference::Param(name.to_string()))
        } else {
            Ok(Reference::Output { process: head.to_string(), port: port.to_string() })
        }
    }
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reference::Param(name) => write!(f, "{PARAMS_NAMESPACE}.{name}"),
            Reference::Output { process, port } => write!(f, "{process}.{port}"),
        }
    }
}

/// Whether `id` is a valid raw (un-namespaced) process id or port name.
pub fn is_identifier(id: &str) -> bool {
    !id.is_empty() && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

impl WorkflowDef {
    pub fn process(&self, id: &str) -> Option<&ProcessDef> {
        self.processes.iter().find(|p| p.id == id)
    }

    /// Direct dependencies of every process, derived from input wiring.
    pub fn dependencies(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.processes
            .iter()
            .map(|p| {
                let deps = p.inputs.values().filter_map(|i| i.from.process()).map(str::to_string).collect();
                (p.id.clone(), deps)
            })
            .collect()
    }

    pub fn has_subworkflows(&self) -> bool {
        self.processes.iter().any(|p| matches!(p.body, ProcessBody::Subworkflow(_)))
    }
}

/// A workflow with every sub-workflow inlined.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatWorkflow(WorkflowDef);

impl FlatWorkflow {
    /// Wraps a definition that contains no subworkflow processes.
    pub fn new(def: WorkflowDef) -> Result<Self, WorkflowDef> {
        if def.has_subworkflows() {
            Err(def)
        } else {
            Ok(FlatWorkflow(def))
        }
    }

    pub fn into_inner(self) -> WorkflowDef {
        self.0
    }
}

impl Deref for FlatWorkflow {
    type Target = WorkflowDef;

    fn deref(&self) -> &WorkflowDef {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_round_trip() {
        for text in ["params.domain_size", "mesh.msh", "meshing.mesh.msh", "params.meshing.size"] {
            let r: Reference = text.parse().unwrap();
            assert_eq!(r.to_string(), text);
        }
        assert_eq!("meshing.mesh.msh".parse::<Reference>().unwrap(), Reference::output("meshing.mesh", "msh"));
        assert!("nodot".parse::<Reference>().is_err());
        assert!(".x".parse::<Reference>().is_err());
    }

    #[test]
    fn identifiers() {
        assert!(is_identifier("mesh_2-a"));
        assert!(!is_identifier("a.b"));
        assert!(!is_identifier(""));
        assert!(!is_identifier("a b"));
    }
}
