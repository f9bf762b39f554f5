//! File-backed job store.
//!
//! Layout: `<root>/jobs/<id>/record.json` plus the uploaded inputs and, once
//! finished, `result.png`. All writes go through one mutex and land via
//! write-to-temp-then-rename.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use makeup_core::pipeline::Timings;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Cancelled)
    }

    /// Allowed moves: queued -> running -> {done, failed, cancelled}, and a
    /// queued job may also be cancelled or failed before it starts.
    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Queued, Running) | (Queued, Cancelled) | (Queued, Failed) | (Running, Done) | (Running, Failed) | (Running, Cancelled)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub state: JobState,
    pub backend: String,
    /// Spec document as submitted (after defaults are filled in).
    pub spec: serde_json::Value,
    pub created_ms: u64,
    pub started_ms: Option<u64>,
    pub finished_ms: Option<u64>,
    pub progress: f64,
    pub stage: Option<String>,
    pub error: Option<JobFailure>,
    /// File name of the result image inside the job directory.
    pub result: Option<String>,
    /// Debug images kept next to the result.
    #[serde(default)]
    pub artifacts: Vec<String>,
    pub timings: Option<Timings>,
}

impl JobRecord {
    pub fn new(id: String, backend: String, spec: serde_json::Value) -> Self {
        Self {
            id,
            state: JobState::Queued,
            backend,
            spec,
            created_ms: now_ms(),
            started_ms: None,
            finished_ms: None,
            progress: 0.0,
            stage: None,
            error: None,
            result: None,
            artifacts: Vec::new(),
            timings: None,
        }
    }
}

/// Uploaded job inputs, stored verbatim.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JobInputs {
    pub image: Vec<u8>,
    pub labels: Option<Vec<u8>>,
    pub mapping: Option<String>,
    pub fixture: Option<String>,
    pub reference: Option<Vec<u8>>,
    pub reference_labels: Option<Vec<u8>>,
    pub reference_fixture: Option<String>,
    pub spec: String,
    pub backend: Option<String>,
    pub debug: bool,
}

const BLOBS: &[&str] = &["image", "labels", "reference", "reference_labels"];
const TEXTS: &[&str] = &["mapping", "fixture", "reference_fixture", "spec", "backend"];

impl JobInputs {
    fn blob(&self, name: &str) -> Option<&[u8]> {
        match name {
            "image" => Some(&self.image),
            "labels" => self.labels.as_deref(),
            "reference" => self.reference.as_deref(),
            "reference_labels" => self.reference_labels.as_deref(),
            _ => None,
        }
    }

    fn text(&self, name: &str) -> Option<&str> {
        match name {
            "mapping" => self.mapping.as_deref(),
            "fixture" => self.fixture.as_deref(),
            "reference_fixture" => self.reference_fixture.as_deref(),
            "spec" => Some(&self.spec),
            "backend" => self.backend.as_deref(),
            _ => None,
        }
    }
}

/// What to do with jobs found queued or running when the store is opened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestartPolicy {
    Requeue,
    Fail,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown job {0}")]
    NotFound(String),
    #[error("job {id} cannot move from {from:?} to {to:?}")]
    Transition { id: String, from: JobState, to: JobState },
    #[error("store I/O: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt record: {0}")]
    Corrupt(#[from] serde_json::Error),
}

pub struct Store {
    root: PathBuf,
    records: Mutex<HashMap<String, JobRecord>>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

impl Store {
    /// Opens (or creates) a store and applies `policy` to interrupted jobs.
    /// Returns the store and the ids that must be queued again, oldest first.
    pub fn open(root: impl Into<PathBuf>, policy: RestartPolicy) -> Result<(Self, Vec<String>), StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("jobs"))?;
        let mut records = HashMap::new();
        for entry in fs::read_dir(root.join("jobs"))? {
            let path = entry?.path().join("record.json");
            let Ok(bytes) = fs::read(&path) else { continue };
            match serde_json::from_slice::<JobRecord>(&bytes) {
                Ok(r) => {
                    records.insert(r.id.clone(), r);
                }
                Err(e) => tracing::warn!("skipping unreadable record {}: {e}", path.display()),
            }
        }
        let store = Self {
            root,
            records: Mutex::new(records),
        };
        let mut pending: Vec<(u64, String)> = Vec::new();
        {
            let mut guard = store.lock();
            for rec in guard.values_mut() {
                if rec.state.is_terminal() {
                    continue;
                }
                match policy {
                    RestartPolicy::Requeue => {
                        rec.state = JobState::Queued;
                        rec.started_ms = None;
                        rec.progress = 0.0;
                        rec.stage = None;
                        pending.push((rec.created_ms, rec.id.clone()));
                    }
                    RestartPolicy::Fail => {
                        rec.state = JobState::Failed;
                        rec.finished_ms = Some(now_ms());
                        rec.error = Some(JobFailure {
                            stage: None,
                            message: "interrupted by a service restart".into(),
                        });
                    }
                }
                store.persist(rec)?;
            }
        }
        pending.sort();
        Ok((store, pending.into_iter().map(|(_, id)| id).collect()))
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, JobRecord>> {
        self.records.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn job_dir(&self, id: &str) -> PathBuf {
        self.root.join("jobs").join(id)
    }

    fn persist(&self, rec: &JobRecord) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec_pretty(rec)?;
        write_atomic(&self.job_dir(&rec.id).join("record.json"), &bytes)?;
        Ok(())
    }

    pub fn create(&self, record: JobRecord, inputs: &JobInputs) -> Result<(), StoreError> {
        let mut guard = self.lock();
        let dir = self.job_dir(&record.id);
        fs::create_dir_all(&dir)?;
        for name in BLOBS {
            if let Some(b) = inputs.blob(name) {
                write_atomic(&dir.join(format!("{name}.bin")), b)?;
            }
        }
        for name in TEXTS {
            if let Some(t) = inputs.text(name) {
                write_atomic(&dir.join(format!("{name}.txt")), t.as_bytes())?;
            }
        }
        if inputs.debug {
            write_atomic(&dir.join("debug.flag"), b"1")?;
        }
        self.persist(&record)?;
        guard.insert(record.id.clone(), record);
        Ok(())
    }

    pub fn inputs(&self, id: &str) -> Result<JobInputs, StoreError> {
        let dir = self.job_dir(id);
        let blob = |n: &str| fs::read(dir.join(format!("{n}.bin"))).ok();
        let text = |n: &str| fs::read_to_string(dir.join(format!("{n}.txt"))).ok();
        Ok(JobInputs {
            image: fs::read(dir.join("image.bin"))?,
            labels: blob("labels"),
            mapping: text("mapping"),
            fixture: text("fixture"),
            reference: blob("reference"),
            reference_labels: blob("reference_labels"),
            reference_fixture: text("reference_fixture"),
            spec: fs::read_to_string(dir.join("spec.txt"))?,
            backend: text("backend"),
            debug: dir.join("debug.flag").exists(),
        })
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        self.lock().get(id).cloned()
    }

    pub fn list(&self) -> Vec<JobRecord> {
        let mut v: Vec<JobRecord> = self.lock().values().cloned().collect();
        v.sort_by_key(|r| (r.created_ms, r.id.clone()));
        v
    }

    /// Applies `f` and persists. A state change made by `f` must be a legal
    /// transition, otherwise nothing is written.
    pub fn update(&self, id: &str, f: impl FnOnce(&mut JobRecord)) -> Result<JobRecord, StoreError> {
        let mut guard = self.lock();
        let rec = guard.get_mut(id).ok_or_else(|| StoreError::NotFound(id.to_string()))?;
        let mut next = rec.clone();
        f(&mut next);
        if next.state != rec.state && !rec.state.can_become(next.state) {
            return Err(StoreError::Transition {
                id: id.to_string(),
                from: rec.state,
                to: next.state,
            });
        }
        self.persist(&next)?;
        *rec = next.clone();
        Ok(next)
    }

    pub fn write_blob(&self, id: &str, name: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let _guard = self.lock();
        write_atomic(&self.job_dir(id).join(name), bytes)?;
        Ok(())
    }

    pub fn read_blob(&self, id: &str, name: &str) -> Result<Vec<u8>, StoreError> {
        Ok(fs::read(self.job_dir(id).join(name))?)
    }
}
