//! The `run` command grammar.
//!
//! ```text
//! run [--setup CMD] (RUN_COMMAND | --template NAME[:VERSION]) [flags]
//!
//!   --gpu N               minimum GPU count
//!   --ram G               minimum memory in GiB
//!   --cloud P             provider (aws, gcp, azure, ...)
//!   --num-nodes K         node count (default 1)
//!   --instance-type T     explicit instance type; capability flags become checks
//!   --param K=V           template parameter override (repeatable)
//!   --backend B           simulated (default) or local
//!   --workspace W         workspace id (default "default")
//!   --dry-run             plan and price only
//!   --wait                block until the job is terminal
//! ```
//!
//! Value flags accept `--flag value` and `--flag=value`. A bare `--` ends flag
//! parsing; the token after it is the run command.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use stratus_core::catalog::{Provider, ResourceRequirements};
use stratus_core::execution::Backend;
use thiserror::Error;

pub const DEFAULT_WORKSPACE: &str = "default";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRef {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
}

impl fmt::Display for TemplateRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.version {
            Some(v) => write!(f, "{}:{v}", self.name),
            None => f.write_str(&self.name),
        }
    }
}

impl std::str::FromStr for TemplateRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, version) = match s.rsplit_once(':') {
            Some((n, v)) => (
                n,
                Some(
                    v.parse::<u32>()
                        .map_err(|_| format!("bad version in {s:?}"))?,
                ),
            ),
            None => (s, None),
        };
        if name.is_empty() {
            return Err("empty template name".into());
        }
        Ok(TemplateRef {
            name: name.to_string(),
            version,
        })
    }
}

fn default_workspace() -> String {
    DEFAULT_WORKSPACE.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setup_command: Option<String>,
    #[serde(default)]
    pub requirements: ResourceRequirements,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_ref: Option<TemplateRef>,
    /// Parameter overrides as text; typed against the template's declarations
    /// at submission.
    #[serde(default)]
    pub overrides: BTreeMap<String, String>,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default = "default_workspace")]
    pub workspace: String,
    #[serde(default)]
    pub dry_run: bool,
    /// Client-side only: block until the job is terminal.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub wait: bool,
}

impl RunRequest {
    pub fn command(run_command: &str) -> Self {
        RunRequest {
            run_command: Some(run_command.to_string()),
            setup_command: None,
            requirements: ResourceRequirements::default(),
            template_ref: None,
            overrides: BTreeMap::new(),
            backend: Backend::default(),
            workspace: default_workspace(),
            dry_run: false,
            wait: false,
        }
    }

    pub fn template(name: &str, version: Option<u32>) -> Self {
        RunRequest {
            run_command: None,
            template_ref: Some(TemplateRef {
                name: name.to_string(),
                version,
            }),
            ..RunRequest::command("")
        }
    }

    /// Renders back to an argument vector that parses to an equal request.
    pub fn to_argv(&self) -> Vec<String> {
        let mut argv = vec!["run".to_string()];
        let mut flag = |name: &str, value: String| argv.push(format!("--{name}={value}"));
        if let Some(s) = &self.setup_command {
            flag("setup", s.clone());
        }
        if let Some(t) = &self.template_ref {
            flag("template", t.to_string());
        }
        let r = &self.requirements;
        if let Some(g) = r.min_gpus {
            flag("gpu", g.to_string());
        }
        if let Some(m) = r.min_memory_gib {
            flag("ram", m.to_string());
        }
        if let Some(v) = r.min_vcpus {
            flag("vcpus", v.to_string());
        }
        if let Some(p) = &r.provider {
            flag("cloud", p.to_string());
        }
        if r.num_nodes != 1 {
            flag("num-nodes", r.num_nodes.to_string());
        }
        if let Some(t) = &r.instance_type {
            flag("instance-type", t.clone());
        }
        for (k, v) in &self.overrides {
            flag("param", format!("{k}={v}"));
        }
        if self.backend != Backend::default() {
            flag("backend", self.backend.to_string());
        }
        if self.workspace != DEFAULT_WORKSPACE {
            flag("workspace", self.workspace.clone());
        }
        if self.dry_run {
            argv.push("--dry-run".into());
        }
        if self.wait {
            argv.push("--wait".into());
        }
        if let Some(c) = &self.run_command {
            argv.push("--".into());
            argv.push(c.clone());
        }
        argv
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("expected the `run` verb first")]
    MissingRunVerb,
    #[error("unknown flag {0}")]
    UnknownFlag(String),
    #[error("flag {0} needs a value")]
    MissingFlagValue(String),
    #[error("invalid value {value:?} for {flag}: {reason}")]
    InvalidFlagValue {
        flag: String,
        value: String,
        reason: String,
    },
    #[error("flag {0} given more than once")]
    DuplicateFlag(String),
    #[error("conflicting command sources: {0}")]
    ConflictingCommandSources(String),
    #[error("no command: give a run command or --template")]
    MissingCommand,
}

const VALUE_FLAGS: &[&str] = &[
    "--setup",
    "--gpu",
    "--ram",
    "--vcpus",
    "--cloud",
    "--num-nodes",
    "--instance-type",
    "--template",
    "--param",
    "--backend",
    "--workspace",
];
const SWITCHES: &[&str] = &["--dry-run", "--wait"];

fn invalid(flag: &str, value: &str, reason: impl Into<String>) -> ParseError {
    ParseError::InvalidFlagValue {
        flag: flag.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn parse_count(flag: &str, value: &str, min: u32) -> Result<u32, ParseError> {
    match value.parse::<u32>() {
        Ok(n) if n >= min => Ok(n),
        Ok(_) => Err(invalid(flag, value, format!("must be >= {min}"))),
        Err(_) => Err(invalid(flag, value, "not a whole number")),
    }
}

/// Parses a `run` command line. `argv[0]` must be `run`.
pub fn parse_run_command<S: AsRef<str>>(argv: &[S]) -> Result<RunRequest, ParseError> {
    let mut tokens = argv.iter().map(AsRef::as_ref);
    if tokens.next() != Some("run") {
        return Err(ParseError::MissingRunVerb);
    }
    let mut req = RunRequest::command("");
    req.run_command = None;
    let mut seen: Vec<&str> = Vec::new();
    let mut positional: Vec<String> = Vec::new();

    while let Some(tok) = tokens.next() {
        if !tok.starts_with("--") {
            positional.push(tok.to_string());
            continue;
        }
        if tok == "--" {
            // Everything after `--` is the run command. A single token is taken
            // verbatim; several are re-quoted so the shell sees the same words.
            let rest: Vec<&str> = tokens.by_ref().collect();
            match rest.as_slice() {
                [] => return Err(ParseError::MissingCommand),
                [one] => positional.push(one.to_string()),
                many => positional.push(
                    shlex::try_join(many.iter().copied())
                        .map_err(|e| invalid("--", &many.join(" "), e.to_string()))?,
                ),
            }
            break;
        }
        let (flag, inline) = match tok.split_once('=') {
            Some((f, v)) => (f, Some(v.to_string())),
            None => (tok, None),
        };
        if let Some(&switch) = SWITCHES.iter().find(|s| **s == flag) {
            if inline.is_some() {
                return Err(invalid(
                    flag,
                    inline.as_deref().unwrap_or(""),
                    "takes no value",
                ));
            }
            if seen.contains(&switch) {
                return Err(ParseError::DuplicateFlag(switch.to_string()));
            }
            seen.push(switch);
            match switch {
                "--dry-run" => req.dry_run = true,
                _ => req.wait = true,
            }
            continue;
        }
        let Some(&flag) = VALUE_FLAGS.iter().find(|f| **f == flag) else {
            return Err(ParseError::UnknownFlag(flag.to_string()));
        };
        let value = match inline {
            Some(v) => v,
            None => match tokens.next() {
                Some(v) if !(v.starts_with("--") && v.len() > 2) => v.to_string(),
                _ => return Err(ParseError::MissingFlagValue(flag.to_string())),
            },
        };
        if flag != "--param" {
            if seen.contains(&flag) {
                return Err(ParseError::DuplicateFlag(flag.to_string()));
            }
            seen.push(flag);
        }
        let r = &mut req.requirements;
        match flag {
            "--setup" => {
                if value.trim().is_empty() {
                    return Err(invalid(flag, &value, "empty command"));
                }
                req.setup_command = Some(value);
            }
            "--gpu" => r.min_gpus = Some(parse_count(flag, &value, 0)?),
            "--vcpus" => r.min_vcpus = Some(parse_count(flag, &value, 1)?),
            "--num-nodes" => r.num_nodes = parse_count(flag, &value, 1)?,
            "--ram" => match value.parse::<f64>() {
                Ok(g) if g.is_finite() && g >= 0.0 => r.min_memory_gib = Some(g),
                _ => return Err(invalid(flag, &value, "not a non-negative number of GiB")),
            },
            "--cloud" => {
                r.provider = Some(
                    value
                        .parse::<Provider>()
                        .map_err(|e| invalid(flag, &value, e.to_string()))?,
                )
            }
            "--instance-type" => {
                if value.trim().is_empty() {
                    return Err(invalid(flag, &value, "empty name"));
                }
                r.instance_type = Some(value);
            }
            "--template" => {
                req.template_ref = Some(
                    value
                        .parse()
                        .map_err(|e: String| invalid(flag, &value, e))?,
                )
            }
            "--param" => {
                let Some((k, v)) = value.split_once('=') else {
                    return Err(invalid(flag, &value, "expected NAME=VALUE"));
                };
                if k.is_empty() {
                    return Err(invalid(flag, &value, "empty parameter name"));
                }
                if req.overrides.insert(k.to_string(), v.to_string()).is_some() {
                    return Err(ParseError::DuplicateFlag(format!("--param {k}")));
                }
            }
            "--backend" => {
                req.backend = value
                    .parse()
                    .map_err(|_| invalid(flag, &value, "expected `local` or `simulated`"))?
            }
            "--workspace" => {
                if value.is_empty() {
                    return Err(invalid(flag, &value, "empty workspace id"));
                }
                req.workspace = value
            }
            _ => unreachable!("every value flag is handled"),
        }
    }

    if positional.len() > 1 {
        return Err(ParseError::ConflictingCommandSources(format!(
            "{} positional run commands; quote the command as one argument",
            positional.len()
        )));
    }
    req.run_command = positional.pop();
    if let Some(c) = &req.run_command {
        if c.trim().is_empty() {
            return Err(ParseError::MissingCommand);
        }
    }
    match (&req.run_command, &req.template_ref) {
        (Some(_), Some(_)) => Err(ParseError::ConflictingCommandSources(
            "both a run command and --template".into(),
        )),
        (None, Some(_)) if req.setup_command.is_some() => {
            Err(ParseError::ConflictingCommandSources(
                "--setup with --template; the template supplies its own setup".into(),
            ))
        }
        (None, None) => Err(ParseError::MissingCommand),
        _ => Ok(req),
    }
}
