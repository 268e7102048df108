//! Versioned workflow templates.
//!
//! A template bundles a setup command, a run command with `{{param}}`
//! placeholders, declared parameters with defaults, and an environment
//! description. Templates are registered into an append-only
//! [`TemplateRegistry`] that assigns monotonically increasing versions per name.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::ResourceRequirements;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Number,
    String,
    Boolean,
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamKind::Number => "number",
            ParamKind::String => "string",
            ParamKind::Boolean => "boolean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Boolean(bool),
    Number(f64),
    String(String),
}

impl ParamValue {
    pub fn kind(&self) -> ParamKind {
        match self {
            ParamValue::Boolean(_) => ParamKind::Boolean,
            ParamValue::Number(_) => ParamKind::Number,
            ParamValue::String(_) => ParamKind::String,
        }
    }

    /// Parses command-line text into a value of the requested kind.
    pub fn parse_as(kind: ParamKind, text: &str) -> Option<ParamValue> {
        match kind {
            ParamKind::Number => text
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(ParamValue::Number),
            ParamKind::Boolean => match text.trim() {
                "true" => Some(ParamValue::Boolean(true)),
                "false" => Some(ParamValue::Boolean(false)),
                _ => None,
            },
            ParamKind::String => Some(ParamValue::String(text.to_string())),
        }
    }
}

/// Canonical textual form: shortest round-trippable decimal for numbers.
impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Boolean(b) => write!(f, "{b}"),
            ParamValue::Number(n) => write!(f, "{n}"),
            ParamValue::String(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDecl {
    pub name: String,
    pub kind: ParamKind,
    pub default: ParamValue,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default)]
    pub env_vars: BTreeMap<String, String>,
    #[serde(default)]
    pub required_tools: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowTemplate {
    pub name: String,
    /// Assigned by the registry; 0 in unregistered documents.
    #[serde(default)]
    pub version: u32,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setup_command: Option<String>,
    pub run_command: String,
    #[serde(default)]
    pub parameters: Vec<ParameterDecl>,
    #[serde(default)]
    pub environment: EnvironmentSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_requirements: Option<ResourceRequirements>,
    /// Expected wall time, used to size budget reservations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_wall_hours: Option<f64>,
}

impl WorkflowTemplate {
    /// Wraps a raw setup/run command pair into a single-use template whose name
    /// is derived from a digest of the commands.
    pub fn ad_hoc(setup_command: Option<&str>, run_command: &str) -> WorkflowTemplate {
        let mut hasher = Sha256::new();
        hasher.update(setup_command.unwrap_or("").as_bytes());
        hasher.update([0u8]);
        hasher.update(run_command.as_bytes());
        let digest = hex::encode(hasher.finalize());
        WorkflowTemplate {
            name: format!("adhoc-{}", &digest[..12]),
            version: 1,
            description: "ad-hoc command pair".into(),
            setup_command: setup_command.map(str::to_string),
            run_command: run_command.to_string(),
            parameters: Vec::new(),
            environment: EnvironmentSpec::default(),
            default_requirements: None,
            expected_wall_hours: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<WorkflowTemplate, WorkflowError> {
        toml::from_str(text).map_err(|e| WorkflowError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("templates are always representable as TOML")
    }

    pub fn parameter(&self, name: &str) -> Option<&ParameterDecl> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn version_ref(&self) -> TemplateVersion {
        TemplateVersion {
            name: self.name.clone(),
            version: self.version,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TemplateVersion {
    pub name: String,
    pub version: u32,
}

impl fmt::Display for TemplateVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name, self.version)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterSet {
    pub values: BTreeMap<String, ParamValue>,
}

impl ParameterSet {
    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.values.get(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutablePlan {
    pub setup: Option<String>,
    pub run: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkflowError {
    #[error("template validation failed: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    ValidationFailed(Vec<Violation>),
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("parameter {name:?} expects a {expected} value, got {got}")]
    TypeMismatch {
        name: String,
        expected: ParamKind,
        got: String,
    },
    #[error("parameter {0:?} has no value")]
    MissingParameter(String),
    #[error("template {0} not found")]
    NotFound(String),
    #[error("template document: {0}")]
    Parse(String),
    #[error("registry write failed: {0}")]
    Storage(String),
}

/// Placeholder scan result for one command string.
enum Token<'a> {
    Placeholder(&'a str),
    Unterminated,
}

fn scan_placeholders(command: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut rest = command;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                out.push(Token::Placeholder(&after[..end]));
                rest = &after[end + 2..];
            }
            None => {
                out.push(Token::Unterminated);
                break;
            }
        }
    }
    out
}

/// Names of all `{{name}}` placeholders in `command`, in order of appearance.
pub fn placeholders(command: &str) -> Vec<&str> {
    scan_placeholders(command)
        .into_iter()
        .filter_map(|t| match t {
            Token::Placeholder(n) => Some(n),
            Token::Unterminated => None,
        })
        .collect()
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

pub fn validate_template(t: &WorkflowTemplate) -> Vec<Violation> {
    let mut v = Vec::new();
    let mut push = |field: &str, rule: String| {
        v.push(Violation {
            field: field.to_string(),
            rule,
        })
    };

    if t.name.is_empty()
        || !t
            .name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
    {
        push("name", format!("invalid template name {:?}", t.name));
    }
    if t.run_command.trim().is_empty() {
        push("run_command", "must not be empty".into());
    }
    if let Some(setup) = &t.setup_command {
        if setup.trim().is_empty() {
            push("setup_command", "must not be empty when present".into());
        }
    }

    let mut seen = BTreeSet::new();
    for p in &t.parameters {
        if !is_identifier(&p.name) {
            push("parameters", format!("invalid parameter name {:?}", p.name));
        }
        if !seen.insert(p.name.as_str()) {
            push("parameters", format!("duplicate parameter {}", p.name));
        }
        if p.default.kind() != p.kind {
            push(
                &format!("parameters.{}", p.name),
                format!("default does not conform to kind {}", p.kind),
            );
        }
        if let ParamValue::Number(n) = p.default {
            if !n.is_finite() {
                push(
                    &format!("parameters.{}", p.name),
                    "default must be finite".into(),
                );
            }
        }
    }

    let commands = [
        ("setup_command", t.setup_command.as_deref()),
        ("run_command", Some(t.run_command.as_str())),
    ];
    for (field, cmd) in commands {
        let Some(cmd) = cmd else { continue };
        let mut reported = BTreeSet::new();
        for tok in scan_placeholders(cmd) {
            match tok {
                Token::Placeholder(name) => {
                    if !seen.contains(name) && reported.insert(name) {
                        push(field, format!("undeclared placeholder {name}"));
                    }
                }
                Token::Unterminated => push(field, "unterminated placeholder".into()),
            }
        }
    }

    for key in t.environment.env_vars.keys() {
        if key.trim().is_empty() {
            push(
                "environment.env_vars",
                "variable names must be non-empty".into(),
            );
        }
    }
    if let Some(h) = t.expected_wall_hours {
        if !(h.is_finite() && h > 0.0) {
            push("expected_wall_hours", "must be positive".into());
        }
    }
    if let Some(req) = &t.default_requirements {
        if req.num_nodes < 1 {
            push("default_requirements.num_nodes", "must be >= 1".into());
        }
    }
    v
}

/// Defaults merged with overrides; overrides win.
pub fn resolve_parameters(
    t: &WorkflowTemplate,
    overrides: &BTreeMap<String, ParamValue>,
) -> Result<ParameterSet, WorkflowError> {
    let mut values: BTreeMap<String, ParamValue> = t
        .parameters
        .iter()
        .map(|p| (p.name.clone(), p.default.clone()))
        .collect();
    for (name, value) in overrides {
        let decl = t
            .parameter(name)
            .ok_or_else(|| WorkflowError::UnknownParameter(name.clone()))?;
        let ok =
            value.kind() == decl.kind && !matches!(value, ParamValue::Number(n) if !n.is_finite());
        if !ok {
            return Err(WorkflowError::TypeMismatch {
                name: name.clone(),
                expected: decl.kind,
                got: format!("{value:?}"),
            });
        }
        values.insert(name.clone(), value.clone());
    }
    Ok(ParameterSet { values })
}

/// Like [`resolve_parameters`], but overrides arrive as text (`--param q=0.5`)
/// and are coerced to each parameter's declared kind.
pub fn resolve_parameters_from_text(
    t: &WorkflowTemplate,
    overrides: &BTreeMap<String, String>,
) -> Result<ParameterSet, WorkflowError> {
    let mut typed = BTreeMap::new();
    for (name, text) in overrides {
        let decl = t
            .parameter(name)
            .ok_or_else(|| WorkflowError::UnknownParameter(name.clone()))?;
        let value =
            ParamValue::parse_as(decl.kind, text).ok_or_else(|| WorkflowError::TypeMismatch {
                name: name.clone(),
                expected: decl.kind,
                got: format!("{text:?}"),
            })?;
        typed.insert(name.clone(), value);
    }
    resolve_parameters(t, &typed)
}

fn render_one(command: &str, p: &ParameterSet) -> Result<String, WorkflowError> {
    let mut out = String::with_capacity(command.len());
    let mut rest = command;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else { break };
        let name = &after[..end];
        let value = p
            .get(name)
            .ok_or_else(|| WorkflowError::MissingParameter(name.to_string()))?;
        out.push_str(&rest[..start]);
        out.push_str(&value.to_string());
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn render_commands(
    t: &WorkflowTemplate,
    p: &ParameterSet,
) -> Result<ExecutablePlan, WorkflowError> {
    Ok(ExecutablePlan {
        setup: t
            .setup_command
            .as_deref()
            .map(|s| render_one(s, p))
            .transpose()?,
        run: render_one(&t.run_command, p)?,
    })
}

/// Append-only template store with per-name monotone versions.
///
/// When opened on a directory, every registered version is persisted as
/// `<root>/<name>/<version>.toml` and reloaded on the next open.
#[derive(Debug, Default)]
pub struct TemplateRegistry {
    root: Option<PathBuf>,
    templates: RwLock<BTreeMap<String, Vec<Arc<WorkflowTemplate>>>>,
    // One lock per template name keeps version assignment race-free without
    // blocking registrations of unrelated names.
    name_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl TemplateRegistry {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self, WorkflowError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| WorkflowError::Storage(e.to_string()))?;
        let mut templates: BTreeMap<String, Vec<Arc<WorkflowTemplate>>> = BTreeMap::new();
        for dir in fs::read_dir(&root).map_err(|e| WorkflowError::Storage(e.to_string()))? {
            let dir = dir
                .map_err(|e| WorkflowError::Storage(e.to_string()))?
                .path();
            if !dir.is_dir() {
                continue;
            }
            for file in fs::read_dir(&dir).map_err(|e| WorkflowError::Storage(e.to_string()))? {
                let path = file
                    .map_err(|e| WorkflowError::Storage(e.to_string()))?
                    .path();
                if path.extension().is_some_and(|e| e == "toml") {
                    let text = fs::read_to_string(&path)
                        .map_err(|e| WorkflowError::Storage(e.to_string()))?;
                    let t = WorkflowTemplate::from_toml(&text)?;
                    templates
                        .entry(t.name.clone())
                        .or_default()
                        .push(Arc::new(t));
                }
            }
        }
        for versions in templates.values_mut() {
            versions.sort_by_key(|t| t.version);
        }
        Ok(TemplateRegistry {
            root: Some(root),
            templates: RwLock::new(templates),
            name_locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn register(&self, mut t: WorkflowTemplate) -> Result<TemplateVersion, WorkflowError> {
        let violations = validate_template(&t);
        if !violations.is_empty() {
            return Err(WorkflowError::ValidationFailed(violations));
        }
        let lock = self
            .name_locks
            .lock()
            .entry(t.name.clone())
            .or_default()
            .clone();
        let _guard = lock.lock();

        let next = self
            .templates
            .read()
            .get(&t.name)
            .and_then(|v| v.last())
            .map_or(1, |last| last.version + 1);
        t.version = next;
        if let Some(root) = &self.root {
            persist(root, &t)?;
        }
        let version = t.version_ref();
        self.templates
            .write()
            .entry(t.name.clone())
            .or_default()
            .push(Arc::new(t));
        Ok(version)
    }

    /// Registers an ad-hoc template unless an identical one already exists.
    pub fn ensure_ad_hoc(
        &self,
        t: WorkflowTemplate,
    ) -> Result<Arc<WorkflowTemplate>, WorkflowError> {
        if let Some(existing) = self.fetch(&t.name, 1) {
            return Ok(existing);
        }
        let v = self.register(t)?;
        self.fetch(&v.name, v.version)
            .ok_or_else(|| WorkflowError::NotFound(v.to_string()))
    }

    pub fn fetch(&self, name: &str, version: u32) -> Option<Arc<WorkflowTemplate>> {
        self.templates
            .read()
            .get(name)?
            .iter()
            .find(|t| t.version == version)
            .cloned()
    }

    pub fn latest(&self, name: &str) -> Option<Arc<WorkflowTemplate>> {
        self.templates.read().get(name)?.last().cloned()
    }

    /// Latest version when `version` is `None`.
    pub fn resolve(
        &self,
        name: &str,
        version: Option<u32>,
    ) -> Result<Arc<WorkflowTemplate>, WorkflowError> {
        match version {
            Some(v) => self.fetch(name, v),
            None => self.latest(name),
        }
        .ok_or_else(|| {
            WorkflowError::NotFound(match version {
                Some(v) => format!("{name}:{v}"),
                None => name.to_string(),
            })
        })
    }

    pub fn list(&self) -> Vec<TemplateVersion> {
        self.templates
            .read()
            .values()
            .flat_map(|v| v.iter().map(|t| t.version_ref()))
            .collect()
    }
}

/// Templates shipped with the platform, unregistered (version 0).
pub const FIXTURE_TEMPLATES: [&str; 2] = [
    include_str!("../fixtures/templates/pism-greenland.toml"),
    include_str!("../fixtures/templates/icepack-ice-shelf.toml"),
];

pub fn fixture_templates() -> Vec<WorkflowTemplate> {
    FIXTURE_TEMPLATES
        .iter()
        .map(|t| WorkflowTemplate::from_toml(t).expect("shipped templates parse"))
        .collect()
}

fn persist(root: &Path, t: &WorkflowTemplate) -> Result<(), WorkflowError> {
    let dir = root.join(&t.name);
    fs::create_dir_all(&dir).map_err(|e| WorkflowError::Storage(e.to_string()))?;
    let path = dir.join(format!("{}.toml", t.version));
    if path.exists() {
        return Err(WorkflowError::Storage(format!(
            "{} already exists",
            path.display()
        )));
    }
    let tmp = dir.join(format!(".{}.toml.tmp", t.version));
    fs::write(&tmp, t.to_toml()).map_err(|e| WorkflowError::Storage(e.to_string()))?;
    fs::rename(&tmp, &path).map_err(|e| WorkflowError::Storage(e.to_string()))
}
