use serde_json::{json, Map, Value as Json};

use super::{ArtifactRef, Binding, PlanError, TaskInstance};
use crate::canonical::{self, field};
use crate::digest::{Digest, Fingerprint};

/// Engine-version salt; bumping it invalidates every cached result.
pub const FINGERPRINT_SCHEMA: &str = "flowforge-fingerprint-v1";

fn artifact_json(a: &ArtifactRef) -> Json {
    json!({"digest": a.digest.to_hex(), "kind": a.kind.as_str(), "name": a.name})
}

/// `{port: binding}` with artifacts by digest and values with their declared type.
pub fn canonical_inputs(t: &TaskInstance) -> Result<Json, PlanError> {
    let mut map = Map::new();
    for (port, input) in &t.inputs {
        let encoded = match &input.binding {
            Binding::Artifact(a) => artifact_json(a),
            Binding::Artifacts(items) => json!({"items": items.iter().map(artifact_json).collect::<Vec<_>>(), "kind": "array"}),
            Binding::Value(v) => json!({"kind": "value", "type": input.ty.type_name(), "value": v.to_json()}),
            Binding::Upstream { .. } => return Err(PlanError::Unresolved { task: t.id.clone(), port: port.clone() }),
        };
        map.insert(port.clone(), encoded);
    }
    Ok(Json::Object(map))
}

/// `{port: {type, path?, format?}}`.
pub fn canonical_outputs(t: &TaskInstance) -> Json {
    let mut map = Map::new();
    for (port, out) in &t.outputs {
        let mut entry = Map::new();
        entry.insert("type".into(), Json::String(out.ty.type_name()));
        if let Some(path) = &out.path {
            entry.insert("path".into(), Json::String(path.clone()));
        }
        if let Some(format) = &out.ty.format {
            entry.insert("format".into(), Json::String(format.clone()));
        }
        map.insert(port.clone(), Json::Object(entry));
    }
    Json::Object(map)
}

/// Bytes hashed into the fingerprint:
///
/// ```text
/// flowforge-fingerprint-v1\n
/// argv:<len>:<canonical argv template>\n
/// inputs:<len>:<canonical inputs>\n
/// outputs:<len>:<canonical outputs>\n
/// env:64:<env fingerprint hex>\n
/// ```
pub fn preimage(t: &TaskInstance) -> Result<Vec<u8>, PlanError> {
    let argv = canonical::encode(&Json::Array(t.argv.iter().cloned().map(Json::String).collect()));
    let inputs = canonical::encode(&canonical_inputs(t)?);
    let outputs = canonical::encode(&canonical_outputs(t));
    let mut out = Vec::new();
    out.extend_from_slice(FINGERPRINT_SCHEMA.as_bytes());
    out.push(b'\n');
    field("argv", &argv, &mut out);
    field("inputs", &inputs, &mut out);
    field("outputs", &outputs, &mut out);
    field("env", &t.env.fingerprint.to_hex(), &mut out);
    Ok(out)
}

pub fn task_fingerprint(t: &TaskInstance) -> Result<Fingerprint, PlanError> {
    Ok(Fingerprint(Digest::of_bytes(preimage(t)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envprov::{EnvRegistry, ResolvedEnv};
    use crate::model::{EnvSpec, Package, Reference};
    use crate::planner::{ArtifactKind, TaskInput, TaskOutputDecl};
    use crate::value::{BaseKind, PortType, Value};
    use std::collections::{BTreeMap, BTreeSet};
    use std::path::Path;

    fn task(content: &[u8], env: EnvSpec) -> TaskInstance {
        let env: ResolvedEnv = EnvRegistry::builtin().resolve(&env, Path::new(".")).unwrap();
        TaskInstance {
            id: "mesh".into(),
            argv: vec!["sh".into(), "{inputs.script}".into()],
            inputs: BTreeMap::from([
                (
                    "script".to_string(),
                    TaskInput {
                        ty: PortType::scalar(BaseKind::File),
                        binding: Binding::Artifact(ArtifactRef {
                            kind: ArtifactKind::File,
                            digest: Digest::of_bytes(content),
                            name: "mesh.sh".into(),
                        }),
                        sources: vec![],
                        from: Reference::Param("script".into()),
                    },
                ),
                (
                    "size".to_string(),
                    TaskInput {
                        ty: PortType::scalar(BaseKind::Float),
                        binding: Binding::Value(Value::Float(2.0)),
                        sources: vec![],
                        from: Reference::Param("size".into()),
                    },
                ),
            ]),
            outputs: BTreeMap::from([(
                "msh".to_string(),
                TaskOutputDecl { ty: PortType::scalar(BaseKind::File), path: Some("mesh.msh".into()) },
            )]),
            env,
            deps: BTreeSet::new(),
            resources: Default::default(),
        }
    }

    #[test]
    fn deterministic() {
        let t = task(b"echo", EnvSpec::None);
        assert_eq!(task_fingerprint(&t).unwrap(), task_fingerprint(&t.clone()).unwrap());
    }

    #[test]
    fn documented_layout() {
        let t = task(b"", EnvSpec::None);
        let text = String::from_utf8(preimage(&t).unwrap()).unwrap();
        let inputs = r#"{"script":{"digest":"e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855","kind":"file","name":"mesh.sh"},"size":{"kind":"value","type":"float","value":2.0}}"#;
        let expected = format!(
            "flowforge-fingerprint-v1\nargv:24:[\"sh\",\"{{inputs.script}}\"]\ninputs:{}:{inputs}\noutputs:41:{{\"msh\":{{\"path\":\"mesh.msh\",\"type\":\"file\"}}}}\nenv:64:{}\n",
            inputs.len(),
            Digest::of_bytes("env:none")
        );
        assert_eq!(text, expected);
    }

    #[test]
    fn sensitive_to_content_and_env() {
        let base = task_fingerprint(&task(b"echo", EnvSpec::None)).unwrap();
        assert_ne!(base, task_fingerprint(&task(b"echp", EnvSpec::None)).unwrap());
        let m = |v: &str| EnvSpec::Manifest(vec![Package { name: "meshtool".into(), version: v.into() }]);
        assert_ne!(
            task_fingerprint(&task(b"echo", m("1.0"))).unwrap(),
            task_fingerprint(&task(b"echo", m("1.1"))).unwrap()
        );
    }

    #[test]
    fn unresolved_binding_errors() {
        let mut t = task(b"", EnvSpec::None);
        t.inputs.get_mut("script").unwrap().binding = Binding::Upstream { task: "x".into(), port: "y".into() };
        assert!(matches!(task_fingerprint(&t), Err(PlanError::Unresolved { .. })));
    }
}
