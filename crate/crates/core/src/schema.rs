//! Contract files: replicated object classes and RPC method signatures.
//!
//! The contract is a small line-oriented text format shared by every
//! endpoint. Ids are always explicit so wire compatibility can be audited
//! by reading the file:
//!
//! ```text
//! version 1
//! class Avatar id=1
//!   prop appearance id=1 kind=text replicated
//!   prop position id=2 kind=vec3 replicated
//! end
//! rpc SetAppearance id=10 params=(text) returns=none mode=unary
//! rpc SubscribeTelemetry id=11 params=(int64) returns=vec3 mode=stream
//! ```

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

/// Key of the property that gives an object its position for relevance checks.
pub const POSITION_KEY: &str = "position";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ValueKind {
    Null,
    Bool,
    Int64,
    Float64,
    Text,
    Vec3,
    Bytes,
}

impl ValueKind {
    pub const ALL: [ValueKind; 7] = [
        ValueKind::Null,
        ValueKind::Bool,
        ValueKind::Int64,
        ValueKind::Float64,
        ValueKind::Text,
        ValueKind::Vec3,
        ValueKind::Bytes,
    ];

    /// Wire tag, 0..=6 in declaration order.
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            ValueKind::Null => "null",
            ValueKind::Bool => "bool",
            ValueKind::Int64 => "int64",
            ValueKind::Float64 => "float64",
            ValueKind::Text => "text",
            ValueKind::Vec3 => "vec3",
            ValueKind::Bytes => "bytes",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.token() == token)
    }
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertyDef {
    pub key: String,
    pub prop_id: u16,
    pub kind: ValueKind,
    /// Non-replicated properties live on the server only and are never
    /// serialized into deltas or snapshots.
    pub replicated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDef {
    pub name: String,
    pub class_id: u16,
    /// Declaration order is the canonical serialization order.
    pub properties: Vec<PropertyDef>,
}

impl ClassDef {
    pub fn property(&self, prop_id: u16) -> Option<&PropertyDef> {
        self.properties.iter().find(|p| p.prop_id == prop_id)
    }

    pub fn property_by_key(&self, key: &str) -> Option<&PropertyDef> {
        self.properties.iter().find(|p| p.key == key)
    }

    /// The `position` property, when the class declares one of kind vec3.
    pub fn position_property(&self) -> Option<&PropertyDef> {
        self.property_by_key(POSITION_KEY)
            .filter(|p| p.kind == ValueKind::Vec3)
    }

    pub fn replicated_properties(&self) -> impl Iterator<Item = &PropertyDef> {
        self.properties.iter().filter(|p| p.replicated)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodMode {
    Unary,
    ServerStream,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MethodDef {
    pub name: String,
    pub method_id: u16,
    pub params: Vec<ValueKind>,
    /// For stream methods this is the kind of each streamed element.
    pub returns: Option<ValueKind>,
    pub mode: MethodMode,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Schema {
    pub version: u32,
    pub classes: Vec<ClassDef>,
    pub methods: Vec<MethodDef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: IdKind, id: u16 },
    #[error("unknown value kind `{0}`")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdKind {
    Class,
    Property,
    Method,
}

impl fmt::Display for IdKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IdKind::Class => "class",
            IdKind::Property => "property",
            IdKind::Method => "method",
        })
    }
}

/// A broken schema invariant. Validation reports these as data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateClassName(String),
    DuplicateClassId(u16),
    DuplicatePropertyKey { class: String, key: String },
    DuplicatePropertyId { class: String, prop_id: u16 },
    DuplicateMethodName(String),
    DuplicateMethodId(u16),
    StreamWithoutReturn { method: String },
    InvalidIdentifier(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateClassName(n) => write!(f, "class name `{n}` declared more than once"),
            Violation::DuplicateClassId(id) => write!(f, "class id {id} declared more than once"),
            Violation::DuplicatePropertyKey { class, key } => {
                write!(f, "class `{class}`: property key `{key}` declared more than once")
            }
            Violation::DuplicatePropertyId { class, prop_id } => {
                write!(f, "class `{class}`: property id {prop_id} declared more than once")
            }
            Violation::DuplicateMethodName(n) => write!(f, "method name `{n}` declared more than once"),
            Violation::DuplicateMethodId(id) => write!(f, "method id {id} declared more than once"),
            Violation::StreamWithoutReturn { method } => {
                write!(f, "stream method `{method}` must declare a return kind")
            }
            Violation::InvalidIdentifier(s) => write!(f, "`{s}` is not a valid identifier"),
        }
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl Schema {
    pub fn class(&self, class_id: u16) -> Option<&ClassDef> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    pub fn class_by_name(&self, name: &str) -> Option<&ClassDef> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn lookup_method(&self, method_id: u16) -> Option<&MethodDef> {
        self.methods.iter().find(|m| m.method_id == method_id)
    }

    pub fn method_by_name(&self, name: &str) -> Option<&MethodDef> {
        self.methods.iter().find(|m| m.name == name)
    }

    /// Every invariant violation, in declaration order. Empty means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut class_names = BTreeSet::new();
        let mut class_ids = BTreeSet::new();
        for class in &self.classes {
            if !is_identifier(&class.name) {
                out.push(Violation::InvalidIdentifier(class.name.clone()));
            }
            if !class_names.insert(class.name.as_str()) {
                out.push(Violation::DuplicateClassName(class.name.clone()));
            }
            if !class_ids.insert(class.class_id) {
                out.push(Violation::DuplicateClassId(class.class_id));
            }
            let mut keys = BTreeSet::new();
            let mut ids = BTreeSet::new();
            for prop in &class.properties {
                if !is_identifier(&prop.key) {
                    out.push(Violation::InvalidIdentifier(prop.key.clone()));
                }
                if !keys.insert(prop.key.as_str()) {
                    out.push(Violation::DuplicatePropertyKey {
                        class: class.name.clone(),
                        key: prop.key.clone(),
                    });
                }
                if !ids.insert(prop.prop_id) {
                    out.push(Violation::DuplicatePropertyId {
                        class: class.name.clone(),
                        prop_id: prop.prop_id,
                    });
                }
            }
        }
        let mut method_names = BTreeSet::new();
        let mut method_ids = BTreeSet::new();
        for method in &self.methods {
            if !is_identifier(&method.name) {
                out.push(Violation::InvalidIdentifier(method.name.clone()));
            }
            if !method_names.insert(method.name.as_str()) {
                out.push(Violation::DuplicateMethodName(method.name.clone()));
            }
            if !method_ids.insert(method.method_id) {
                out.push(Violation::DuplicateMethodId(method.method_id));
            }
            if method.mode == MethodMode::ServerStream && method.returns.is_none() {
                out.push(Violation::StreamWithoutReturn {
                    method: method.name.clone(),
                });
            }
        }
        out
    }

    /// Canonical source text. Parsing the output yields an equal schema.
    pub fn to_source(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "version {}", self.version)?;
        for class in &self.classes {
            writeln!(f, "class {} id={}", class.name, class.class_id)?;
            for p in &class.properties {
                write!(f, "  prop {} id={} kind={}", p.key, p.prop_id, p.kind)?;
                if p.replicated {
                    f.write_str(" replicated")?;
                }
                writeln!(f)?;
            }
            writeln!(f, "end")?;
        }
        for m in &self.methods {
            let params: Vec<_> = m.params.iter().map(|k| k.token()).collect();
            let returns = m.returns.map_or("none", ValueKind::token);
            let mode = match m.mode {
                MethodMode::Unary => "unary",
                MethodMode::ServerStream => "stream",
            };
            writeln!(
                f,
                "rpc {} id={} params=({}) returns={} mode={}",
                m.name,
                m.method_id,
                params.join(","),
                returns,
                mode
            )?;
        }
        Ok(())
    }
}

pub fn validate_schema(schema: &Schema) -> Vec<Violation> {
    schema.validate()
}

pub fn lookup_method(schema: &Schema, method_id: u16) -> Option<&MethodDef> {
    schema.lookup_method(method_id)
}

/// Parses contract source. Duplicate ids are rejected here; everything else
/// structural is left to [`Schema::validate`].
pub fn parse_schema(text: &str) -> Result<Schema, SchemaError> {
    Parser::default().run(text)
}

#[derive(Default)]
struct Parser {
    schema: Schema,
    open_class: Option<(usize, ClassDef)>,
    seen_version: bool,
}

impl Parser {
    fn run(mut self, text: &str) -> Result<Schema, SchemaError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut words = content.split_whitespace();
            let head = words.next().unwrap_or_default();
            let rest: Vec<&str> = words.collect();
            match head {
                "version" => self.version(line, &rest)?,
                "class" => self.class(line, &rest)?,
                "prop" => self.prop(line, &rest)?,
                "end" => self.end(line, &rest)?,
                "rpc" => self.rpc(line, &rest)?,
                other => return Err(syntax(line, format!("unexpected keyword `{other}`"))),
            }
        }
        if let Some((line, class)) = self.open_class {
            return Err(syntax(line, format!("class `{}` is missing `end`", class.name)));
        }
        Ok(self.schema)
    }

    fn version(&mut self, line: usize, rest: &[&str]) -> Result<(), SchemaError> {
        if self.seen_version {
            return Err(syntax(line, "version declared twice"));
        }
        if self.open_class.is_some() {
            return Err(syntax(line, "version inside class block"));
        }
        let [v] = rest else {
            return Err(syntax(line, "expected `version <n>`"));
        };
        self.schema.version = v
            .parse()
            .map_err(|_| syntax(line, format!("invalid version `{v}`")))?;
        self.seen_version = true;
        Ok(())
    }

    fn class(&mut self, line: usize, rest: &[&str]) -> Result<(), SchemaError> {
        if self.open_class.is_some() {
            return Err(syntax(line, "nested class block"));
        }
        let [name, id] = rest else {
            return Err(syntax(line, "expected `class <Name> id=<n>`"));
        };
        let name = identifier(line, name)?;
        let class_id = id_attr(line, id)?;
        if self.schema.class(class_id).is_some() {
            return Err(SchemaError::DuplicateId { kind: IdKind::Class, id: class_id });
        }
        self.open_class = Some((
            line,
            ClassDef {
                name,
                class_id,
                properties: Vec::new(),
            },
        ));
        Ok(())
    }

    fn prop(&mut self, line: usize, rest: &[&str]) -> Result<(), SchemaError> {
        let Some((_, class)) = self.open_class.as_mut() else {
            return Err(syntax(line, "`prop` outside class block"));
        };
        let (key, id, kind, flag) = match rest {
            [key, id, kind] => (key, id, kind, None),
            [key, id, kind, flag] => (key, id, kind, Some(*flag)),
            _ => return Err(syntax(line, "expected `prop <key> id=<n> kind=<kind> [replicated]`")),
        };
        let key = identifier(line, key)?;
        let prop_id = id_attr(line, id)?;
        let kind = kind_attr(line, "kind", kind)?
            .ok_or_else(|| SchemaError::UnknownKind("none".into()))?;
        let replicated = match flag {
            None => false,
            Some("replicated") => true,
            Some(other) => return Err(syntax(line, format!("unexpected flag `{other}`"))),
        };
        if class.property(prop_id).is_some() {
            return Err(SchemaError::DuplicateId { kind: IdKind::Property, id: prop_id });
        }
        class.properties.push(PropertyDef {
            key,
            prop_id,
            kind,
            replicated,
        });
        Ok(())
    }

    fn end(&mut self, line: usize, rest: &[&str]) -> Result<(), SchemaError> {
        if !rest.is_empty() {
            return Err(syntax(line, "trailing tokens after `end`"));
        }
        let (_, class) = self
            .open_class
            .take()
            .ok_or_else(|| syntax(line, "`end` without class"))?;
        self.schema.classes.push(class);
        Ok(())
    }

    fn rpc(&mut self, line: usize, rest: &[&str]) -> Result<(), SchemaError> {
        if self.open_class.is_some() {
            return Err(syntax(line, "`rpc` inside class block"));
        }
        let [name, id, params, returns, mode] = rest else {
            return Err(syntax(
                line,
                "expected `rpc <Name> id=<n> params=(..) returns=<kind|none> mode=<unary|stream>`",
            ));
        };
        let name = identifier(line, name)?;
        let method_id = id_attr(line, id)?;
        let params = params_attr(line, params)?;
        let returns = kind_attr(line, "returns", returns)?;
        let mode = match attr(line, "mode", mode)? {
            "unary" => MethodMode::Unary,
            "stream" => MethodMode::ServerStream,
            other => return Err(syntax(line, format!("unknown mode `{other}`"))),
        };
        if self.schema.lookup_method(method_id).is_some() {
            return Err(SchemaError::DuplicateId { kind: IdKind::Method, id: method_id });
        }
        self.schema.methods.push(MethodDef {
            name,
            method_id,
            params,
            returns,
            mode,
        });
        Ok(())
    }
}

fn syntax(line: usize, reason: impl Into<String>) -> SchemaError {
    SchemaError::Syntax {
        line,
        reason: reason.into(),
    }
}

fn identifier(line: usize, token: &str) -> Result<String, SchemaError> {
    if is_identifier(token) {
        Ok(token.to_owned())
    } else {
        Err(syntax(line, format!("invalid identifier `{token}`")))
    }
}

fn attr<'a>(line: usize, name: &str, token: &'a str) -> Result<&'a str, SchemaError> {
    token
        .strip_prefix(name)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| syntax(line, format!("expected `{name}=...`, found `{token}`")))
}

fn id_attr(line: usize, token: &str) -> Result<u16, SchemaError> {
    let v = attr(line, "id", token)?;
    v.parse()
        .map_err(|_| syntax(line, format!("id `{v}` is not a u16")))
}

/// `none` maps to `Ok(None)`.
fn kind_attr(line: usize, name: &str, token: &str) -> Result<Option<ValueKind>, SchemaError> {
    let v = attr(line, name, token)?;
    if v == "none" {
        return Ok(None);
    }
    ValueKind::from_token(v)
        .map(Some)
        .ok_or_else(|| SchemaError::UnknownKind(v.to_owned()))
}

fn params_attr(line: usize, token: &str) -> Result<Vec<ValueKind>, SchemaError> {
    let v = attr(line, "params", token)?;
    let inner = v
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| syntax(line, "params must be parenthesized"))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|t| {
            let t = t.trim();
            ValueKind::from_token(t).ok_or_else(|| SchemaError::UnknownKind(t.to_owned()))
        })
        .collect()
}
