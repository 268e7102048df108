//! Provenance records and run analytics.
//!
//! A [`ProvenanceRecord`] links a run's template version, environment,
//! parameters, resources and outcome. Its `record_id` is the SHA-256 of the
//! canonical serialization of every field except `record_id` and `created_at`.

pub mod canonical;
pub mod stats;
pub mod store;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{ExecutionOutcome, ExitStatus};
use crate::execution::{Job, JobState, MpiPlan, ProvisioningPlan};
use crate::workflow::{EnvironmentSpec, ParameterSet, TemplateVersion};

pub use canonical::{canonical_digest, to_canonical_json};
pub use stats::{
    aggregate_repetitions, cost_per_run, parallel_efficiency, scaling_points_csv,
    scaling_table_csv, RunMetrics, ScalingSeries,
};
pub use store::{IndexEntry, RecordStore};

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("job is in non-terminal state {0}")]
    JobNotTerminal(JobState),
    #[error("need more than {warmup} samples, got {samples}")]
    InsufficientSamples { samples: usize, warmup: usize },
    #[error("invalid scaling series: {0}")]
    InvalidSeries(String),
    #[error("record {0} not found")]
    NotFound(String),
    #[error("record {expected} failed verification (content digests to {actual})")]
    Corrupt { expected: String, actual: String },
    #[error("record store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("record serialization: {0}")]
    Serialization(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordResources {
    #[serde(flatten)]
    pub plan: ProvisioningPlan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpi: Option<MpiPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub reference: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub final_state: JobState,
    pub exit_status: ExitStatus,
    pub wall_time_hours: f64,
    pub log_digest: String,
    pub outputs: Vec<OutputDigest>,
}

/// The digested part of a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordBody {
    pub template_version: TemplateVersion,
    pub environment: EnvironmentSpec,
    pub parameters: ParameterSet,
    pub resources: RecordResources,
    pub outcome: OutcomeSummary,
}

impl RecordBody {
    pub fn digest(&self) -> String {
        canonical_digest(self).expect("record bodies always serialize")
    }

    /// Digest of everything except the outcome: equal for repeated runs of the
    /// same configuration.
    pub fn configuration_digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("record bodies always serialize");
        if let Value::Object(map) = &mut v {
            map.remove("outcome");
        }
        canonical_digest(&v).expect("json values always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub record_id: String,
    #[serde(flatten)]
    pub body: RecordBody,
    pub created_at: DateTime<Utc>,
}

impl ProvenanceRecord {
    pub fn new(body: RecordBody, created_at: DateTime<Utc>) -> Self {
        ProvenanceRecord {
            record_id: body.digest(),
            body,
            created_at,
        }
    }

    /// Recomputes the digest and compares it to `record_id`.
    pub fn verify(&self) -> Result<(), ResultsError> {
        let actual = self.body.digest();
        if actual == self.record_id {
            Ok(())
        } else {
            Err(ResultsError::Corrupt {
                expected: self.record_id.clone(),
                actual,
            })
        }
    }

    pub fn to_document(&self) -> String {
        to_canonical_json(self).expect("records always serialize")
    }

    pub fn from_document(text: &str) -> Result<Self, ResultsError> {
        let rec: ProvenanceRecord = serde_json::from_str(text)?;
        rec.verify()?;
        Ok(rec)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Builds the provenance record for a terminal job. Output digests are taken
/// from `output_digests`, which callers compute from the artifacts they own;
/// references without a digest are hashed by name.
pub fn record_run(
    job: &Job,
    outcome: &ExecutionOutcome,
    output_digests: &[OutputDigest],
    created_at: DateTime<Utc>,
) -> Result<ProvenanceRecord, ResultsError> {
    if !job.is_terminal() {
        return Err(ResultsError::JobNotTerminal(job.state));
    }
    let outputs = outcome
        .output_refs
        .iter()
        .map(|r| {
            output_digests
                .iter()
                .find(|d| &d.reference == r)
                .cloned()
                .unwrap_or_else(|| OutputDigest {
                    reference: r.clone(),
                    digest: sha256_hex(r.as_bytes()),
                })
        })
        .collect();
    let body = RecordBody {
        template_version: job.template_version.clone(),
        environment: job.environment.clone(),
        parameters: job.parameters.clone(),
        resources: RecordResources {
            plan: job.plan.clone(),
            mpi: job.mpi.clone(),
        },
        outcome: OutcomeSummary {
            final_state: job.state,
            exit_status: outcome.exit_status,
            wall_time_hours: outcome.wall_time_hours,
            log_digest: sha256_hex(outcome.log_text.as_bytes()),
            outputs,
        },
    };
    Ok(ProvenanceRecord::new(body, created_at))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffEntry {
    pub path: String,
    pub left: Option<Value>,
    pub right: Option<Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunDiff {
    pub entries: Vec<DiffEntry>,
}

impl RunDiff {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn paths(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.path.as_str()).collect()
    }
}

/// Every leaf path where the two records' digested content differs.
pub fn compare_runs(a: &ProvenanceRecord, b: &ProvenanceRecord) -> RunDiff {
    let left = serde_json::to_value(&a.body).expect("record bodies always serialize");
    let right = serde_json::to_value(&b.body).expect("record bodies always serialize");
    let mut entries = Vec::new();
    diff_values("", Some(&left), Some(&right), &mut entries);
    RunDiff { entries }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn diff_values(path: &str, l: Option<&Value>, r: Option<&Value>, out: &mut Vec<DiffEntry>) {
    match (l, r) {
        (Some(Value::Object(lm)), Some(Value::Object(rm))) => {
            let mut keys: Vec<&String> = lm.keys().chain(rm.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                diff_values(&join(path, k), lm.get(k), rm.get(k), out);
            }
        }
        (Some(Value::Array(la)), Some(Value::Array(ra))) if la.len() == ra.len() => {
            for (i, (x, y)) in la.iter().zip(ra).enumerate() {
                diff_values(&format!("{path}[{i}]"), Some(x), Some(y), out);
            }
        }
        (l, r) if l != r => out.push(DiffEntry {
            path: path.to_string(),
            left: l.cloned(),
            right: r.cloned(),
        }),
        _ => {}
    }
}
