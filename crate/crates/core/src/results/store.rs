//! Append-only, content-addressed record store.
//!
//! Layout under the root directory:
//! - `records/<record_id>.json`: the canonical record document
//! - `index.jsonl`: one line per stored record, for lookups without parsing
//!   every document
//!
//! Documents are written to a temporary file and renamed into place, so a
//! reader never observes a half-written record.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{ProvenanceRecord, ResultsError};
use crate::execution::JobId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub record_id: String,
    pub template: String,
    pub template_version: u32,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<JobId>,
}

pub struct RecordStore {
    root: PathBuf,
    index: Mutex<Vec<IndexEntry>>,
}

impl RecordStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ResultsError> {
        let root = root.into();
        fs::create_dir_all(root.join("records"))?;
        let mut index = Vec::new();
        let path = root.join("index.jsonl");
        if path.exists() {
            for line in BufReader::new(fs::File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                index.push(serde_json::from_str(&line)?);
            }
        }
        Ok(RecordStore {
            root,
            index: Mutex::new(index),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn record_path(&self, id: &str) -> PathBuf {
        self.root.join("records").join(format!("{id}.json"))
    }

    /// Stores a record, verifying its digest first. Storing the same content
    /// again adds an index line (another run) but leaves the document as is.
    pub fn put(
        &self,
        record: &ProvenanceRecord,
        job_id: Option<&JobId>,
    ) -> Result<IndexEntry, ResultsError> {
        record.verify()?;
        let mut index = self.index.lock();
        let path = self.record_path(&record.record_id);
        if !path.exists() {
            let tmp = path.with_extension(format!("json.tmp-{}", uuid::Uuid::new_v4().simple()));
            fs::write(&tmp, record.to_document())?;
            fs::rename(&tmp, &path)?;
        }
        let entry = IndexEntry {
            record_id: record.record_id.clone(),
            template: record.body.template_version.name.clone(),
            template_version: record.body.template_version.version,
            created_at: record.created_at,
            job_id: job_id.cloned(),
        };
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join("index.jsonl"))?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        index.push(entry.clone());
        Ok(entry)
    }

    /// Reads and verifies a record.
    pub fn get(&self, record_id: &str) -> Result<ProvenanceRecord, ResultsError> {
        let path = self.record_path(record_id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ResultsError::NotFound(record_id.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        let rec = ProvenanceRecord::from_document(&text)?;
        if rec.record_id != record_id {
            return Err(ResultsError::Corrupt {
                expected: record_id.to_string(),
                actual: rec.record_id,
            });
        }
        Ok(rec)
    }

    pub fn list(&self) -> Vec<IndexEntry> {
        self.index.lock().clone()
    }

    /// Index entries for a template created within `[from, to)`, either bound
    /// optional.
    pub fn by_template(
        &self,
        template: &str,
        from: Option<DateTime<Utc>>,
        to: Option<DateTime<Utc>>,
    ) -> Vec<IndexEntry> {
        self.index
            .lock()
            .iter()
            .filter(|e| e.template == template)
            .filter(|e| from.is_none_or(|f| e.created_at >= f))
            .filter(|e| to.is_none_or(|t| e.created_at < t))
            .cloned()
            .collect()
    }

    pub fn by_job(&self, job_id: &JobId) -> Option<IndexEntry> {
        self.index
            .lock()
            .iter()
            .rev()
            .find(|e| e.job_id.as_ref() == Some(job_id))
            .cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ExitStatus;
    use crate::catalog::fixture_catalog;
    use crate::execution::{Backend, JobState, ProvisioningPlan};
    use crate::results::{OutcomeSummary, RecordBody, RecordResources};
    use crate::workflow::{EnvironmentSpec, ParameterSet, TemplateVersion};
    use chrono::TimeZone;

    fn record(name: &str, q: f64, at: i64) -> ProvenanceRecord {
        let cat = fixture_catalog();
        let inst = cat.entries()[0].clone();
        let mut parameters = ParameterSet::default();
        parameters
            .values
            .insert("q".into(), crate::workflow::ParamValue::Number(q));
        let body = RecordBody {
            template_version: TemplateVersion {
                name: name.into(),
                version: 1,
            },
            environment: EnvironmentSpec::default(),
            parameters,
            resources: RecordResources {
                plan: ProvisioningPlan {
                    total_slots: inst.vcpus,
                    instance: inst,
                    num_nodes: 1,
                    backend: Backend::Simulated,
                    rationale: String::new(),
                },
                mpi: None,
            },
            outcome: OutcomeSummary {
                final_state: JobState::Succeeded,
                exit_status: ExitStatus::Success,
                wall_time_hours: 1.25,
                log_digest: String::new(),
                outputs: vec![],
            },
        };
        ProvenanceRecord::new(body, Utc.timestamp_opt(at, 0).unwrap())
    }

    #[test]
    fn put_get_roundtrip_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::open(dir.path()).unwrap();
        let r = record("pism", 0.25, 100);
        store.put(&r, None).unwrap();
        assert_eq!(store.get(&r.record_id).unwrap(), r);
        drop(store);
        let store = RecordStore::open(dir.path()).unwrap();
        assert_eq!(store.list().len(), 1);
        assert_eq!(store.get(&r.record_id).unwrap(), r);
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::open(dir.path()).unwrap();
        let r = record("pism", 0.25, 100);
        store.put(&r, None).unwrap();
        let path = store.record_path(&r.record_id);
        let text = fs::read_to_string(&path).unwrap().replace("1.25", "1.5");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            store.get(&r.record_id),
            Err(ResultsError::Corrupt { .. })
        ));
    }

    #[test]
    fn missing_record() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::open(dir.path()).unwrap();
        assert!(matches!(store.get("abc"), Err(ResultsError::NotFound(_))));
    }

    #[test]
    fn template_time_range_query() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::open(dir.path()).unwrap();
        for (i, at) in [100, 200, 300].iter().enumerate() {
            store.put(&record("pism", i as f64, *at), None).unwrap();
        }
        store.put(&record("icepack", 0.0, 150), None).unwrap();
        let from = Utc.timestamp_opt(150, 0).unwrap();
        let to = Utc.timestamp_opt(300, 0).unwrap();
        let hits = store.by_template("pism", Some(from), Some(to));
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].created_at.timestamp(), 200);
        assert_eq!(store.by_template("pism", None, None).len(), 3);
    }

    #[test]
    fn lookup_by_job() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::open(dir.path()).unwrap();
        let r = record("pism", 0.25, 100);
        let id = JobId::new();
        store.put(&r, Some(&id)).unwrap();
        assert_eq!(store.by_job(&id).unwrap().record_id, r.record_id);
        assert!(store.by_job(&JobId::new()).is_none());
    }
}
