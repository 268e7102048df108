//! Multi-provider instance catalog.
//!
//! A [`CatalogSnapshot`] is an immutable, canonically ordered list of purchasable
//! instance types. Selection is capability based: callers describe what they need
//! in a [`ResourceRequirements`] and [`select_instance`] picks the cheapest entry
//! that satisfies every constraint.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::money::Money;

/// Cloud provider identifier, normalized to lowercase (`aws`, `gcp`, `azure`, ...).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Provider(String);

impl Provider {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for Provider {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase();
        if norm.is_empty() {
            return Err("provider must not be empty".into());
        }
        if !norm
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(format!("invalid provider identifier {s:?}"));
        }
        Ok(Provider(norm))
    }
}

impl TryFrom<String> for Provider {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Provider> for String {
    fn from(p: Provider) -> String {
        p.0
    }
}

impl fmt::Display for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyClass {
    Compute,
    General,
    Memory,
    Hpc,
    Accelerated,
}

/// One purchasable machine configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceType {
    pub provider: Provider,
    pub region: String,
    pub name: String,
    pub vcpus: u32,
    pub memory_gib: f64,
    #[serde(default)]
    pub gpus: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_model: Option<String>,
    pub network_gbps: f64,
    pub price_per_hour: Money,
    pub family_class: FamilyClass,
}

impl InstanceType {
    fn key(&self) -> (&str, &str, &str) {
        (self.provider.as_str(), &self.region, &self.name)
    }

    fn validate(&self) -> Result<(), String> {
        if self.name.trim().is_empty() {
            return Err("name must not be empty".into());
        }
        if self.region.trim().is_empty() {
            return Err(format!("{}: region must not be empty", self.name));
        }
        if self.vcpus < 1 {
            return Err(format!("{}: vcpus must be >= 1", self.name));
        }
        if !(self.memory_gib.is_finite() && self.memory_gib > 0.0) {
            return Err(format!("{}: memory_gib must be > 0", self.name));
        }
        if !(self.network_gbps.is_finite() && self.network_gbps > 0.0) {
            return Err(format!("{}: network_gbps must be > 0", self.name));
        }
        if self.price_per_hour.is_negative() {
            return Err(format!("{}: price_per_hour must be >= 0", self.name));
        }
        Ok(())
    }
}

/// Capability constraints for a run. Unset fields are unconstrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceRequirements {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_gpus: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_memory_gib: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_vcpus: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<Provider>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_type: Option<String>,
    #[serde(default = "default_num_nodes")]
    pub num_nodes: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_price_per_hour: Option<Money>,
}

fn default_num_nodes() -> u32 {
    1
}

impl Default for ResourceRequirements {
    fn default() -> Self {
        ResourceRequirements {
            min_gpus: None,
            min_memory_gib: None,
            min_vcpus: None,
            provider: None,
            instance_type: None,
            num_nodes: 1,
            max_price_per_hour: None,
        }
    }
}

impl ResourceRequirements {
    /// Capability constraints violated by `entry`, as human-readable strings.
    /// The explicit `instance_type` is not checked here.
    pub fn violations(&self, entry: &InstanceType) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(g) = self.min_gpus {
            if entry.gpus < g {
                out.push(format!("gpus {} < required {g}", entry.gpus));
            }
        }
        if let Some(m) = self.min_memory_gib {
            if entry.memory_gib < m {
                out.push(format!(
                    "memory {} GiB < required {m} GiB",
                    entry.memory_gib
                ));
            }
        }
        if let Some(v) = self.min_vcpus {
            if entry.vcpus < v {
                out.push(format!("vcpus {} < required {v}", entry.vcpus));
            }
        }
        if let Some(p) = &self.provider {
            if &entry.provider != p {
                out.push(format!("provider {} != requested {p}", entry.provider));
            }
        }
        if let Some(max) = self.max_price_per_hour {
            if entry.price_per_hour > max {
                out.push(format!("price {}/h > cap {max}/h", entry.price_per_hour));
            }
        }
        out
    }

    pub fn is_satisfied_by(&self, entry: &InstanceType) -> bool {
        self.violations(entry).is_empty()
    }

    fn describe_constraints(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(g) = self.min_gpus {
            out.push(format!("gpus >= {g}"));
        }
        if let Some(m) = self.min_memory_gib {
            out.push(format!("memory >= {m} GiB"));
        }
        if let Some(v) = self.min_vcpus {
            out.push(format!("vcpus >= {v}"));
        }
        if let Some(p) = &self.provider {
            out.push(format!("provider = {p}"));
        }
        if let Some(max) = self.max_price_per_hour {
            out.push(format!("price <= {max}/h"));
        }
        out
    }
}

/// An immutable catalog of instance types, sorted by (provider, region, name).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CatalogSnapshot {
    pub snapshot_date: NaiveDate,
    pub source_label: String,
    entries: Vec<InstanceType>,
}

impl CatalogSnapshot {
    /// Builds a snapshot, sorting entries canonically and rejecting duplicates.
    pub fn new(
        snapshot_date: NaiveDate,
        source_label: impl Into<String>,
        mut entries: Vec<InstanceType>,
    ) -> Result<Self, CatalogError> {
        for e in &entries {
            e.validate().map_err(|msg| CatalogError::Malformed {
                line: None,
                message: msg,
            })?;
        }
        entries.sort_by(|a, b| a.key().cmp(&b.key()));
        if let Some(w) = entries.windows(2).find(|w| w[0].key() == w[1].key()) {
            return Err(CatalogError::DuplicateEntry {
                provider: w[0].provider.to_string(),
                region: w[0].region.clone(),
                name: w[0].name.clone(),
            });
        }
        Ok(CatalogSnapshot {
            snapshot_date,
            source_label: source_label.into(),
            entries,
        })
    }

    pub fn entries(&self) -> &[InstanceType] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, provider: Option<&Provider>, name: &str) -> Vec<&InstanceType> {
        self.entries
            .iter()
            .filter(|e| e.name == name && provider.is_none_or(|p| &e.provider == p))
            .collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CatalogError {
    #[error("malformed catalog{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Malformed {
        line: Option<usize>,
        message: String,
    },
    #[error("duplicate catalog entry ({provider}, {region}, {name})")]
    DuplicateEntry {
        provider: String,
        region: String,
        name: String,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("no catalog entry satisfies {0}")]
    NoFeasibleInstance(String),
    #[error("instance type {0:?} is not in the catalog")]
    UnknownInstanceType(String),
    #[error("instance type {name:?} exists for several providers ({providers}); pass a provider")]
    AmbiguousInstanceType { name: String, providers: String },
    #[error("instance type {name:?} violates requested capabilities: {violations}")]
    InfeasibleExplicitChoice { name: String, violations: String },
}

#[derive(Deserialize)]
struct CatalogDocument {
    snapshot_date: toml::Value,
    source_label: String,
    #[serde(default)]
    entries: Vec<InstanceType>,
}

/// Parses a catalog document (TOML with `snapshot_date`, `source_label` and an
/// `[[entries]]` array).
pub fn load_catalog(source: &str) -> Result<CatalogSnapshot, CatalogError> {
    let doc: CatalogDocument = toml::from_str(source).map_err(|e| CatalogError::Malformed {
        line: e.span().map(|s| line_of(source, s.start)),
        message: e.message().to_string(),
    })?;
    let snapshot_date =
        parse_snapshot_date(&doc.snapshot_date).ok_or_else(|| CatalogError::Malformed {
            line: key_line(source, "snapshot_date"),
            message: format!(
                "snapshot_date must be an ISO-8601 date, got {}",
                doc.snapshot_date
            ),
        })?;
    for (i, e) in doc.entries.iter().enumerate() {
        if let Err(message) = e.validate() {
            return Err(CatalogError::Malformed {
                line: entry_header_line(source, i),
                message,
            });
        }
    }
    CatalogSnapshot::new(snapshot_date, doc.source_label, doc.entries)
}

/// The catalog document shipped with the crate.
pub const FIXTURE_CATALOG: &str = include_str!("../fixtures/catalog.toml");

pub fn fixture_catalog() -> CatalogSnapshot {
    load_catalog(FIXTURE_CATALOG).expect("shipped fixture catalog is valid")
}

pub fn load_catalog_file(path: &std::path::Path) -> Result<CatalogSnapshot, CatalogError> {
    let text = std::fs::read_to_string(path).map_err(|e| CatalogError::Malformed {
        line: None,
        message: format!("{}: {e}", path.display()),
    })?;
    load_catalog(&text)
}

/// Serializes a snapshot back into the catalog document format.
pub fn to_catalog_toml(snapshot: &CatalogSnapshot) -> String {
    toml::to_string(snapshot).expect("catalog snapshot is always representable as TOML")
}

// Accepts both a TOML date literal and a quoted ISO-8601 string.
fn parse_snapshot_date(v: &toml::Value) -> Option<NaiveDate> {
    let text = match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Datetime(d) if d.time.is_none() && d.offset.is_none() => d.to_string(),
        _ => return None,
    };
    NaiveDate::parse_from_str(&text, "%Y-%m-%d").ok()
}

fn key_line(source: &str, key: &str) -> Option<usize> {
    source
        .lines()
        .position(|l| l.trim_start().starts_with(key))
        .map(|i| i + 1)
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

fn entry_header_line(source: &str, index: usize) -> Option<usize> {
    source
        .lines()
        .enumerate()
        .filter(|(_, l)| l.trim_start().starts_with("[[entries]]"))
        .nth(index)
        .map(|(i, _)| i + 1)
}

/// Entries satisfying every set constraint, in snapshot order.
pub fn filter_feasible<'a>(
    req: &ResourceRequirements,
    snapshot: &'a CatalogSnapshot,
) -> Vec<&'a InstanceType> {
    snapshot
        .entries
        .iter()
        .filter(|e| req.is_satisfied_by(e))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub instance: InstanceType,
    pub rationale: String,
}

/// Selection order: price, then fewest vcpus, then (provider, region, name).
fn selection_order(a: &InstanceType, b: &InstanceType) -> Ordering {
    a.price_per_hour
        .cmp(&b.price_per_hour)
        .then(a.vcpus.cmp(&b.vcpus))
        .then_with(|| a.key().cmp(&b.key()))
}

pub fn select_instance(
    req: &ResourceRequirements,
    snapshot: &CatalogSnapshot,
) -> Result<SelectionResult, SelectionError> {
    if let Some(name) = &req.instance_type {
        return select_explicit(req, name, snapshot);
    }
    let feasible = filter_feasible(req, snapshot);
    let count = feasible.len();
    let best = feasible
        .into_iter()
        .min_by(|a, b| selection_order(a, b))
        .ok_or_else(|| SelectionError::NoFeasibleInstance(constraint_summary(req)))?;
    let rationale = format!(
        "cheapest of {count} feasible entries for {} at {}/h",
        constraint_summary(req),
        best.price_per_hour
    );
    Ok(SelectionResult {
        instance: best.clone(),
        rationale,
    })
}

fn select_explicit(
    req: &ResourceRequirements,
    name: &str,
    snapshot: &CatalogSnapshot,
) -> Result<SelectionResult, SelectionError> {
    let candidates = snapshot.find(req.provider.as_ref(), name);
    if candidates.is_empty() {
        return Err(SelectionError::UnknownInstanceType(name.to_string()));
    }
    let providers: HashSet<&Provider> = candidates.iter().map(|e| &e.provider).collect();
    if providers.len() > 1 {
        let mut names: Vec<&str> = providers.iter().map(|p| p.as_str()).collect();
        names.sort_unstable();
        return Err(SelectionError::AmbiguousInstanceType {
            name: name.to_string(),
            providers: names.join(", "),
        });
    }
    match candidates
        .iter()
        .filter(|e| req.is_satisfied_by(e))
        .min_by(|a, b| selection_order(a, b))
    {
        Some(chosen) => {
            let mut rationale = format!("explicit instance type {name} in {}", chosen.region);
            let constraints = req.describe_constraints();
            if !constraints.is_empty() {
                rationale.push_str(&format!(", validated against {}", constraints.join(", ")));
            }
            Ok(SelectionResult {
                instance: (*chosen).clone(),
                rationale,
            })
        }
        None => Err(SelectionError::InfeasibleExplicitChoice {
            name: name.to_string(),
            violations: req.violations(candidates[0]).join("; "),
        }),
    }
}

fn constraint_summary(req: &ResourceRequirements) -> String {
    let c = req.describe_constraints();
    if c.is_empty() {
        "no constraints".to_string()
    } else {
        c.join(", ")
    }
}

/// On-demand cost prorated per second: `price × wall_hours × node_count`.
pub fn estimate_cost(instance: &InstanceType, wall_hours: f64, node_count: u32) -> Money {
    let hours = wall_hours.max(0.0);
    let micros = instance.price_per_hour.micros() as f64 * f64::from(node_count) * hours;
    Money::from_micros(micros.round() as i64)
}
