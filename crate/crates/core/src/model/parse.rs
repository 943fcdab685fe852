use std::collections::BTreeMap;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use super::{
    is_identifier, EnvSpec, InputDecl, OutputDecl, ParamDecl, ProcessBody, ProcessDef, Reference, ResourceHints,
    WorkflowDef, PARAMS_NAMESPACE,
};
use crate::value::PortType;

const TOP_LEVEL_KEYS: &[&str] = &["formatVersion", "name", "env", "params", "processes", "outputs"];

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{(inputs|outputs)\.([^{}]*)\}").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax,
    UnknownKey,
    DuplicateId,
    UndeclaredPlaceholder,
    Invalid,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub message: String,
    pub line: Option<usize>,
    pub column: Option<usize>,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "{} at line {l}, column {c}", self.message),
            (Some(l), None) => write!(f, "{} at line {l}", self.message),
            _ => f.write_str(&self.message),
        }
    }
}

impl ParseError {
    fn new(kind: ParseErrorKind, message: impl Into<String>) -> Self {
        ParseError { kind, message: message.into(), line: None, column: None }
    }

    fn at(mut self, pos: Option<(usize, usize)>) -> Self {
        if let Some((l, c)) = pos {
            self.line = Some(l);
            self.column = Some(c);
        }
        self
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorkflow {
    #[serde(rename = "formatVersion", default, skip_serializing_if = "Option::is_none")]
    format_version: Option<u32>,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    env: Option<EnvSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    params: BTreeMap<String, RawPort>,
    #[serde(default)]
    processes: Vec<RawProcess>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProcess {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    command: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subworkflow: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    inputs: BTreeMap<String, RawPort>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    outputs: BTreeMap<String, RawPort>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    env: Option<EnvSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    resources: Option<ResourceHints>,
}

/// Shared shape of params, inputs and outputs; which optional keys are
/// allowed depends on the position and is checked during conversion.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPort {
    #[serde(rename = "type")]
    ty: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    format: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    default: Option<Json>,
}

/// Parses workflow text. JSON is the canonical encoding; the indentation
/// based YAML form is accepted as well. Pure: no filesystem access.
pub fn parse_workflow(text: &str) -> Result<WorkflowDef, ParseError> {
    let tree = parse_tree(text)?;
    let obj = tree
        .as_object()
        .ok_or_else(|| ParseError::new(ParseErrorKind::Invalid, "workflow must be a mapping at the top level"))?;
    for key in obj.keys() {
        if !TOP_LEVEL_KEYS.contains(&key.as_str()) {
            return Err(ParseError::new(
                ParseErrorKind::UnknownKey,
                format!("unknown top-level key `{key}` (expected one of {})", TOP_LEVEL_KEYS.join(", ")),
            )
            .at(locate(text, key, 0)));
        }
    }
    let raw: RawWorkflow = serde_path_to_error::deserialize(tree).map_err(|e| {
        let path = e.path().to_string();
        ParseError::new(ParseErrorKind::Invalid, format!("{} (at `{path}`)", e.into_inner()))
    })?;
    convert(raw, text)
}

fn parse_tree(text: &str) -> Result<Json, ParseError> {
    let json_err = match serde_json::from_str::<Json>(text) {
        Ok(tree) => return Ok(tree),
        Err(e) => e,
    };
    match serde_yaml::from_str::<Json>(text) {
        Ok(tree) => Ok(tree),
        Err(yaml_err) => {
            let looks_like_json = text.trim_start().starts_with('{');
            if looks_like_json {
                Err(ParseError {
                    kind: ParseErrorKind::Syntax,
                    message: format!("syntax error: {json_err}"),
                    line: Some(json_err.line()),
                    column: Some(json_err.column()),
                })
            } else {
                let loc = yaml_err.location();
                Err(ParseError {
                    kind: ParseErrorKind::Syntax,
                    message: format!("syntax error: {yaml_err}"),
                    line: loc.as_ref().map(|l| l.line()),
                    column: loc.as_ref().map(|l| l.column()),
                })
            }
        }
    }
}

/// Best-effort position of the `nth` occurrence of `needle` in the source.
fn locate(text: &str, needle: &str, nth: usize) -> Option<(usize, usize)> {
    let offset = text.match_indices(needle).nth(nth)?.0;
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(offset, |nl| offset - nl - 1) + 1;
    Some((line, column))
}

fn invalid(msg: impl Into<String>) -> ParseError {
    ParseError::new(ParseErrorKind::Invalid, msg)
}

fn port_type(raw: &RawPort, what: &str) -> Result<PortType, ParseError> {
    PortType::parse(&raw.ty, raw.format.clone()).map_err(|e| invalid(format!("{what}: {e}")))
}

fn reference(text: &str, what: &str) -> Result<Reference, ParseError> {
    text.parse().map_err(|e: String| invalid(format!("{what}: {e}")))
}

fn convert(raw: RawWorkflow, text: &str) -> Result<WorkflowDef, ParseError> {
    let mut params = BTreeMap::new();
    for (name, p) in raw.params {
        let what = format!("param `{name}`");
        if !is_identifier(&name) {
            return Err(invalid(format!("{what}: names may only contain [A-Za-z0-9_-]")));
        }
        if p.from.is_some() || p.path.is_some() {
            return Err(invalid(format!("{what}: params take only `type`, `format` and `default`")));
        }
        params.insert(name, ParamDecl { ty: port_type(&p, &what)?, default: p.default });
    }

    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut processes = Vec::with_capacity(raw.processes.len());
    for rp in raw.processes {
        let id = rp.id.clone();
        if !is_identifier(&id) {
            return Err(invalid(format!("process id `{id}` may only contain [A-Za-z0-9_-]")));
        }
        if id == PARAMS_NAMESPACE {
            return Err(invalid(format!("process id `{id}` is reserved")));
        }
        let count = seen.entry(id.clone()).or_default();
        *count += 1;
        if *count > 1 {
            return Err(ParseError::new(ParseErrorKind::DuplicateId, format!("duplicate process id `{id}`"))
                .at(locate(text, &format!("\"{id}\""), 1)));
        }
        processes.push(convert_process(rp)?);
    }

    let outputs = raw
        .outputs
        .into_iter()
        .map(|(name, r)| {
            if !is_identifier(&name) {
                return Err(invalid(format!("workflow output `{name}` may only contain [A-Za-z0-9_-]")));
            }
            let r = reference(&r, &format!("workflow output `{name}`"))?;
            Ok((name, r))
        })
        .collect::<Result<_, _>>()?;

    Ok(WorkflowDef { format_version: raw.format_version, name: raw.name, env: raw.env, params, processes, outputs })
}

fn convert_process(rp: RawProcess) -> Result<ProcessDef, ParseError> {
    let id = rp.id;
    let body = match (rp.command, rp.subworkflow) {
        (Some(argv), None) => {
            if argv.is_empty() {
                return Err(invalid(format!("process `{id}`: command must not be empty")));
            }
            ProcessBody::Command(argv)
        }
        (None, Some(path)) => ProcessBody::Subworkflow(path),
        _ => return Err(invalid(format!("process `{id}`: exactly one of `command` or `subworkflow` is required"))),
    };

    let mut inputs = BTreeMap::new();
    for (port, p) in rp.inputs {
        let what = format!("input `{id}.{port}`");
        if !is_identifier(&port) {
            return Err(invalid(format!("{what}: port names may only contain [A-Za-z0-9_-]")));
        }
        if p.path.is_some() || p.default.is_some() {
            return Err(invalid(format!("{what}: inputs take only `type`, `format` and `from`")));
        }
        let from = p.from.as_deref().ok_or_else(|| invalid(format!("{what}: missing `from`")))?;
        let from = reference(from, &what)?;
        inputs.insert(port, InputDecl { ty: port_type(&p, &what)?, from });
    }

    let mut outputs = BTreeMap::new();
    for (port, p) in rp.outputs {
        let what = format!("output `{id}.{port}`");
        if !is_identifier(&port) {
            return Err(invalid(format!("{what}: port names may only contain [A-Za-z0-9_-]")));
        }
        if p.from.is_some() || p.default.is_some() {
            return Err(invalid(format!("{what}: outputs take only `type`, `format` and `path`")));
        }
        outputs.insert(port, OutputDecl { ty: port_type(&p, &what)?, path: p.path });
    }

    if let ProcessBody::Command(argv) = &body {
        for arg in argv {
            for cap in PLACEHOLDER.captures_iter(arg) {
                let (side, port) = (&cap[1], &cap[2]);
                let declared = if side == "inputs" { inputs.contains_key(port) } else { outputs.contains_key(port) };
                if !declared {
                    return Err(ParseError::new(
                        ParseErrorKind::UndeclaredPlaceholder,
                        format!("process `{id}`: placeholder `{{{side}.{port}}}` names an undeclared port"),
                    ));
                }
            }
        }
    }

    Ok(ProcessDef { id, body, inputs, outputs, env: rp.env, resources: rp.resources })
}

/// Placeholders of one argv element, as `(is_input, port)` pairs with byte ranges.
pub(crate) fn placeholders(arg: &str) -> Vec<(bool, String, std::ops::Range<usize>)> {
    PLACEHOLDER
        .captures_iter(arg)
        .map(|cap| (&cap[1] == "inputs", cap[2].to_string(), cap.get(0).unwrap().range()))
        .collect()
}

fn to_raw_port(ty: &PortType) -> RawPort {
    RawPort { ty: ty.type_name(), format: ty.format.clone(), from: None, path: None, default: None }
}

/// Canonical JSON rendering of a definition; parses back to an equal value.
pub fn to_json_string(def: &WorkflowDef) -> String {
    let raw = RawWorkflow {
        format_version: def.format_version,
        name: def.name.clone(),
        env: def.env.clone(),
        params: def
            .params
            .iter()
            .map(|(k, p)| (k.clone(), RawPort { default: p.default.clone(), ..to_raw_port(&p.ty) }))
            .collect(),
        processes: def
            .processes
            .iter()
            .map(|p| {
                let (command, subworkflow) = match &p.body {
                    ProcessBody::Command(argv) => (Some(argv.clone()), None),
                    ProcessBody::Subworkflow(path) => (None, Some(path.clone())),
                };
                RawProcess {
                    id: p.id.clone(),
                    command,
                    subworkflow,
                    inputs: p
                        .inputs
                        .iter()
                        .map(|(k, i)| (k.clone(), RawPort { from: Some(i.from.to_string()), ..to_raw_port(&i.ty) }))
                        .collect(),
                    outputs: p
                        .outputs
                        .iter()
                        .map(|(k, o)| (k.clone(), RawPort { path: o.path.clone(), ..to_raw_port(&o.ty) }))
                        .collect(),
                    env: p.env.clone(),
                    resources: p.resources.clone(),
                }
            })
            .collect(),
        outputs: def.outputs.iter().map(|(k, r)| (k.clone(), r.to_string())).collect(),
    };
    serde_json::to_string_pretty(&raw).expect("workflow serialization is infallible")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::BaseKind;

    #[test]
    fn minimal_flow_style() {
        let text = r#"{name: hello, processes: [{id: greet, command: ["echo","hi"], outputs: {msg: {type: file, path: "out.txt"}}}]}"#;
        let def = parse_workflow(text).unwrap();
        assert_eq!(def.processes.len(), 1);
        assert!(def.params.is_empty());
        assert_eq!(def.processes[0].outputs["msg"].ty, PortType::scalar(BaseKind::File));
    }

    #[test]
    fn yaml_block_style() {
        let text = "name: y\nparams:\n  n:\n    type: integer\n    default: 3\nprocesses:\n  - id: a\n    command: [echo, '{inputs.n}']\n    inputs:\n      n: {type: integer, from: params.n}\n";
        let def = parse_workflow(text).unwrap();
        assert_eq!(def.params["n"].default, Some(serde_json::json!(3)));
        assert_eq!(def.processes[0].inputs["n"].from, Reference::Param("n".into()));
    }

    #[test]
    fn duplicate_id() {
        let text = r#"{"name":"d","processes":[{"id":"mesh","command":["true"]},{"id":"mesh","command":["true"]}]}"#;
        let err = parse_workflow(text).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::DuplicateId);
        assert!(err.message.contains("duplicate process id"));
        assert_eq!(err.line, Some(1));
    }

    #[test]
    fn unknown_top_level_key() {
        let err = parse_workflow("{\"name\":\"x\",\n \"jobs\": 3}").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnknownKey);
        assert_eq!(err.line, Some(2));
    }

    #[test]
    fn syntax_error_has_position() {
        let err = parse_workflow("{\"name\": \"x\",\n  \"processes\": [\n}").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::Syntax);
        assert_eq!(err.line, Some(3));
        assert!(err.column.is_some());
    }

    #[test]
    fn undeclared_placeholder() {
        let text = r#"{"name":"p","processes":[{"id":"a","command":["cat","{inputs.missing}"]}]}"#;
        assert_eq!(parse_workflow(text).unwrap_err().kind, ParseErrorKind::UndeclaredPlaceholder);
    }

    #[test]
    fn command_xor_subworkflow() {
        let both = r#"{"name":"p","processes":[{"id":"a","command":["true"],"subworkflow":"x.wf"}]}"#;
        let neither = r#"{"name":"p","processes":[{"id":"a"}]}"#;
        assert_eq!(parse_workflow(both).unwrap_err().kind, ParseErrorKind::Invalid);
        assert_eq!(parse_workflow(neither).unwrap_err().kind, ParseErrorKind::Invalid);
    }

    #[test]
    fn dotted_ids_rejected() {
        let text = r#"{"name":"p","processes":[{"id":"a.b","command":["true"]}]}"#;
        assert_eq!(parse_workflow(text).unwrap_err().kind, ParseErrorKind::Invalid);
    }

    #[test]
    fn schema_error_reports_path() {
        let text = r#"{"name":"p","processes":[{"id":"a","command":["true"],"outputs":{"o":{"type":"file","colour":1}}}]}"#;
        let err = parse_workflow(text).unwrap_err();
        assert!(err.message.contains("processes[0].outputs.o"), "{}", err.message);
    }

    #[test]
    fn env_variants_parse() {
        let text = r#"{"name":"e","env":"none","processes":[
            {"id":"a","command":["true"],"env":{"manifest":[{"name":"meshtool","version":"1.0"}]}},
            {"id":"b","command":["true"],"env":{"image":"example/sim:2"}},
            {"id":"c","command":["true"],"env":{"recipe":"Dockerfile"}}]}"#;
        let def = parse_workflow(text).unwrap();
        assert_eq!(def.env, Some(EnvSpec::None));
        assert_eq!(def.processes[1].env, Some(EnvSpec::Image("example/sim:2".into())));
        let back = parse_workflow(&to_json_string(&def)).unwrap();
        assert_eq!(back, def);
    }
}
