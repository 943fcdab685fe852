//! Port types and the literal values that flow through value ports.

use std::fmt;
use std::str::FromStr;

use serde_json::Value as Json;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaseKind {
    String,
    Integer,
    Float,
    Boolean,
    File,
    Directory,
}

impl BaseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaseKind::String => "string",
            BaseKind::Integer => "integer",
            BaseKind::Float => "float",
            BaseKind::Boolean => "boolean",
            BaseKind::File => "file",
            BaseKind::Directory => "directory",
        }
    }

    pub fn is_artifact(self) -> bool {
        matches!(self, BaseKind::File | BaseKind::Directory)
    }
}

impl FromStr for BaseKind {
    type Err = TypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "string" => BaseKind::String,
            "integer" => BaseKind::Integer,
            "float" => BaseKind::Float,
            "boolean" => BaseKind::Boolean,
            "file" => BaseKind::File,
            "directory" => BaseKind::Directory,
            other => return Err(TypeError::UnknownType(other.to_string())),
        })
    }
}

/// Type of a port. Arrays nest exactly one level, which the representation
/// enforces: `array<array<..>>` cannot be expressed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortType {
    pub base: BaseKind,
    pub array: bool,
    /// Format IRI; only meaningful for file elements.
    pub format: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TypeError {
    #[error("unknown type `{0}`")]
    UnknownType(String),
    #[error("nested arrays are not supported: `{0}`")]
    NestedArray(String),
    #[error("a format may only be declared on file ports, not `{0}`")]
    FormatOnNonFile(String),
    #[error("expected a value of type {expected}, got {got}")]
    Mismatch { expected: String, got: String },
}

impl PortType {
    pub fn scalar(base: BaseKind) -> Self {
        PortType { base, array: false, format: None }
    }

    pub fn array_of(base: BaseKind) -> Self {
        PortType { base, array: true, format: None }
    }

    pub fn file_with_format(format: impl Into<String>) -> Self {
        PortType { base: BaseKind::File, array: false, format: Some(format.into()) }
    }

    /// Parses `integer`, `array<file>` and friends, attaching an optional format.
    pub fn parse(text: &str, format: Option<String>) -> Result<Self, TypeError> {
        let text = text.trim();
        let (array, inner) = match text.strip_prefix("array<").and_then(|t| t.strip_suffix('>')) {
            Some(inner) => (true, inner.trim()),
            None => (false, text),
        };
        if array && inner.starts_with("array") {
            return Err(TypeError::NestedArray(text.to_string()));
        }
        let base: BaseKind = inner.parse()?;
        if format.is_some() && base != BaseKind::File {
            return Err(TypeError::FormatOnNonFile(text.to_string()));
        }
        Ok(PortType { base, array, format })
    }

    /// Name without the format, e.g. `array<float>`.
    pub fn type_name(&self) -> String {
        if self.array {
            format!("array<{}>", self.base.as_str())
        } else {
            self.base.as_str().to_string()
        }
    }

    pub fn is_artifact(&self) -> bool {
        self.base.is_artifact()
    }

    /// Producer/consumer compatibility: kinds must be equal (no numeric
    /// promotion) and file formats must be byte-identical unless the consumer
    /// declares none.
    pub fn accepts(&self, producer: &PortType) -> bool {
        if self.base != producer.base || self.array != producer.array {
            return false;
        }
        match &self.format {
            None => true,
            Some(want) => producer.format.as_deref() == Some(want.as_str()),
        }
    }
}

impl fmt::Display for PortType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.type_name())?;
        if let Some(format) = &self.format {
            write!(f, " (format {format})")?;
        }
        Ok(())
    }
}

/// A literal carried by a value port, or a path given for a file/directory parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    String(String),
    Integer(i64),
    Float(f64),
    Boolean(bool),
    Path(String),
    Array(Vec<Value>),
}

fn json_kind(v: &Json) -> &'static str {
    match v {
        Json::Null => "null",
        Json::Bool(_) => "boolean",
        Json::Number(n) if n.is_i64() || n.is_u64() => "integer",
        Json::Number(_) => "float",
        Json::String(_) => "string",
        Json::Array(_) => "array",
        Json::Object(_) => "object",
    }
}

impl Value {
    /// Converts an untyped literal into a value of the given type. Integers
    /// are not promoted to floats and vice versa, except that a JSON number
    /// for a float port is accepted when it carries a fractional part or
    /// exponent in its source text.
    pub fn from_json(json: &Json, ty: &PortType) -> Result<Value, TypeError> {
        let mismatch = || TypeError::Mismatch { expected: ty.type_name(), got: json_kind(json).to_string() };
        if ty.array {
            let items = json.as_array().ok_or_else(mismatch)?;
            let elem = PortType { array: false, ..ty.clone() };
            return items.iter().map(|it| Value::from_json(it, &elem)).collect::<Result<_, _>>().map(Value::Array);
        }
        match ty.base {
            BaseKind::String => json.as_str().map(|s| Value::String(s.to_string())).ok_or_else(mismatch),
            BaseKind::Boolean => json.as_bool().map(Value::Boolean).ok_or_else(mismatch),
            BaseKind::Integer => json.as_i64().map(Value::Integer).ok_or_else(mismatch),
            BaseKind::Float => match json {
                Json::Number(n) if n.is_f64() => Ok(Value::Float(n.as_f64().ok_or_else(mismatch)?)),
                _ => Err(mismatch()),
            },
            BaseKind::File | BaseKind::Directory => json.as_str().map(|s| Value::Path(s.to_string())).ok_or_else(mismatch),
        }
    }

    /// Parses command-line text against a declared type. Floats accept
    /// plain decimal and exponent forms; integers must be plain decimal.
    pub fn parse_text(text: &str, ty: &PortType) -> Result<Value, TypeError> {
        let mismatch = |what: &str| TypeError::Mismatch { expected: ty.type_name(), got: what.to_string() };
        if ty.array {
            let json: Json = serde_json::from_str(text).map_err(|_| mismatch("non-JSON array text"))?;
            return Value::from_json(&json, ty);
        }
        match ty.base {
            BaseKind::String => Ok(Value::String(text.to_string())),
            BaseKind::File | BaseKind::Directory => Ok(Value::Path(text.to_string())),
            BaseKind::Boolean => match text {
                "true" => Ok(Value::Boolean(true)),
                "false" => Ok(Value::Boolean(false)),
                _ => Err(mismatch(&format!("`{text}`"))),
            },
            BaseKind::Integer => text.parse::<i64>().map(Value::Integer).map_err(|_| mismatch(&format!("`{text}`"))),
            BaseKind::Float => {
                let ok = !text.is_empty()
                    && text.bytes().all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'e' | b'E' | b'+' | b'-'));
                match text.parse::<f64>() {
                    Ok(f) if ok && f.is_finite() => Ok(Value::Float(f)),
                    _ => Err(mismatch(&format!("`{text}`"))),
                }
            }
        }
    }

    /// Checks that this value inhabits `ty`.
    pub fn check(&self, ty: &PortType) -> Result<(), TypeError> {
        let ok = match (self, ty.array) {
            (Value::Array(items), true) => {
                let elem = PortType { array: false, ..ty.clone() };
                return items.iter().try_for_each(|it| it.check(&elem));
            }
            (_, true) | (Value::Array(_), false) => false,
            (Value::String(_), _) => ty.base == BaseKind::String,
            (Value::Integer(_), _) => ty.base == BaseKind::Integer,
            (Value::Float(f), _) => ty.base == BaseKind::Float && f.is_finite(),
            (Value::Boolean(_), _) => ty.base == BaseKind::Boolean,
            (Value::Path(_), _) => ty.base.is_artifact(),
        };
        if ok {
            Ok(())
        } else {
            Err(TypeError::Mismatch { expected: ty.type_name(), got: self.kind_name().to_string() })
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Value::String(_) => "string",
            Value::Integer(_) => "integer",
            Value::Float(_) => "float",
            Value::Boolean(_) => "boolean",
            Value::Path(_) => "path",
            Value::Array(_) => "array",
        }
    }

    pub fn to_json(&self) -> Json {
        match self {
            Value::String(s) | Value::Path(s) => Json::String(s.clone()),
            Value::Integer(i) => Json::from(*i),
            Value::Float(f) => serde_json::Number::from_f64(*f).map(Json::Number).unwrap_or(Json::Null),
            Value::Boolean(b) => Json::Bool(*b),
            Value::Array(items) => Json::Array(items.iter().map(Value::to_json).collect()),
        }
    }

    /// Text substituted into command lines.
    pub fn render(&self) -> String {
        match self {
            Value::String(s) | Value::Path(s) => s.clone(),
            Value::Integer(i) => i.to_string(),
            Value::Float(_) => crate::canonical::encode(&self.to_json()),
            Value::Boolean(b) => b.to_string(),
            Value::Array(items) => items.iter().map(Value::render).collect::<Vec<_>>().join(" "),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn parses_types() {
        assert_eq!(PortType::parse("integer", None).unwrap(), PortType::scalar(BaseKind::Integer));
        assert_eq!(PortType::parse("array<float>", None).unwrap(), PortType::array_of(BaseKind::Float));
        assert!(matches!(PortType::parse("array<array<float>>", None), Err(TypeError::NestedArray(_))));
        assert!(matches!(PortType::parse("integer", Some("x".into())), Err(TypeError::FormatOnNonFile(_))));
        assert!(matches!(PortType::parse("tensor", None), Err(TypeError::UnknownType(_))));
    }

    #[test]
    fn no_numeric_promotion() {
        let int = PortType::scalar(BaseKind::Integer);
        let float = PortType::scalar(BaseKind::Float);
        assert!(!float.accepts(&int));
        assert!(!int.accepts(&float));
        assert!(int.accepts(&int));
        assert!(Value::from_json(&json!(2), &float).is_err());
        assert!(Value::from_json(&json!(2.5), &int).is_err());
        assert_eq!(Value::from_json(&json!(2.0), &float).unwrap(), Value::Float(2.0));
    }

    #[test]
    fn format_rule() {
        let a = PortType::file_with_format("http://edamontology.org/format_a");
        let b = PortType::file_with_format("http://edamontology.org/format_b");
        let plain = PortType::scalar(BaseKind::File);
        assert!(!b.accepts(&a));
        assert!(plain.accepts(&a));
        assert!(a.accepts(&a.clone()));
        assert!(!a.accepts(&plain));
    }

    #[test]
    fn cli_float_forms() {
        let float = PortType::scalar(BaseKind::Float);
        assert_eq!(Value::parse_text("2.0", &float).unwrap(), Value::Float(2.0));
        assert_eq!(Value::parse_text("2", &float).unwrap(), Value::Float(2.0));
        assert_eq!(Value::parse_text("1.5e3", &float).unwrap(), Value::Float(1500.0));
        assert!(Value::parse_text("nan", &float).is_err());
        assert!(Value::parse_text("inf", &float).is_err());
        let int = PortType::scalar(BaseKind::Integer);
        assert!(Value::parse_text("2.0", &int).is_err());
    }

    #[test]
    fn rendering() {
        assert_eq!(Value::Float(2.0).render(), "2.0");
        assert_eq!(Value::Float(0.1).render(), "0.1");
        assert_eq!(Value::Integer(-7).render(), "-7");
        assert_eq!(Value::Array(vec![Value::Integer(1), Value::Integer(2)]).render(), "1 2");
    }
}
