//! Job queue, bounded workers, cancellation and progress fan-out.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::time::{Duration, Instant};

use makeup_core::backend::BackendSettings;
use makeup_core::pipeline::{run_makeup, JobControl, JobResult, ProgressEvent};
use makeup_core::Error;
use serde::Serialize;
use tokio::sync::{broadcast, mpsc, Semaphore};

use crate::prepare::{prepare, BackendPool, Limits, Rejection};
use crate::store::{now_ms, JobFailure, JobInputs, JobRecord, JobState, RestartPolicy, Store, StoreError};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub store_dir: PathBuf,
    pub default_backend: String,
    pub workers: usize,
    pub job_timeout: Duration,
    pub limits: Limits,
    pub max_body_bytes: usize,
    pub restart_policy: RestartPolicy,
    pub backends: BackendSettings,
}

impl ServiceConfig {
    pub fn new(store_dir: impl Into<PathBuf>) -> Self {
        Self {
            store_dir: store_dir.into(),
            default_backend: "toy".into(),
            workers: 2,
            job_timeout: Duration::from_secs(600),
            limits: Limits::default(),
            max_body_bytes: 32 * 1024 * 1024,
            restart_policy: RestartPolicy::Requeue,
            backends: BackendSettings::default(),
        }
    }
}

/// One message on a job's progress stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobEvent {
    pub state: JobState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    pub fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl JobEvent {
    pub fn snapshot(rec: &JobRecord) -> Self {
        Self {
            state: rec.state,
            stage: rec.stage.clone(),
            fraction: rec.progress,
            step: None,
            error: rec.error.as_ref().map(|e| e.message.clone()),
        }
    }
}

#[derive(Debug)]
pub enum CancelError {
    NotFound,
    AlreadyFinished(JobState),
    Store(StoreError),
}

pub struct Service {
    pub store: Store,
    pub pool: BackendPool,
    pub config: ServiceConfig,
    queue: mpsc::UnboundedSender<String>,
    cancels: Mutex<HashMap<String, Arc<AtomicBool>>>,
    /// Progress channels of unfinished jobs. Terminal transitions happen
    /// while this lock is held so a subscriber never misses the last event.
    channels: Mutex<HashMap<String, broadcast::Sender<JobEvent>>>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Service {
    /// Opens the store, requeues interrupted jobs and starts the dispatcher.
    /// Must be called inside a tokio runtime.
    pub fn start(config: ServiceConfig) -> Result<Arc<Self>, StoreError> {
        let (store, pending) = Store::open(&config.store_dir, config.restart_policy)?;
        let (tx, rx) = mpsc::unbounded_channel();
        let svc = Arc::new(Self {
            store,
            pool: BackendPool::new(config.backends.clone()),
            config,
            queue: tx,
            cancels: Mutex::new(HashMap::new()),
            channels: Mutex::new(HashMap::new()),
        });
        for id in pending {
            svc.enqueue(id);
        }
        tokio::spawn(dispatch(Arc::downgrade(&svc), rx, svc.config.workers.max(1)));
        Ok(svc)
    }

    fn enqueue(&self, id: String) {
        lock(&self.cancels).insert(id.clone(), Arc::new(AtomicBool::new(false)));
        // The receiver lives as long as the dispatcher, which outlives us.
        let _ = self.queue.send(id);
    }

    /// Validates and stores a job, then queues it. Blocking.
    pub fn submit(&self, inputs: JobInputs) -> Result<String, SubmitError> {
        let prepared = prepare(&inputs, &self.pool, &self.config.default_backend, &self.config.limits)
            .map_err(SubmitError::Rejected)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let spec = serde_json::to_value(&prepared.document).unwrap_or(serde_json::Value::Null);
        let record = JobRecord::new(id.clone(), prepared.job.backend_id.clone(), spec);
        self.store.create(record, &inputs).map_err(SubmitError::Store)?;
        self.enqueue(id.clone());
        Ok(id)
    }

    pub fn cancel(&self, id: &str) -> Result<JobRecord, CancelError> {
        let rec = self.store.get(id).ok_or(CancelError::NotFound)?;
        if rec.state.is_terminal() {
            return Err(CancelError::AlreadyFinished(rec.state));
        }
        if let Some(flag) = lock(&self.cancels).get(id) {
            flag.store(true, Ordering::SeqCst);
        }
        let channels = lock(&self.channels);
        match self.store.update(id, |r| {
            if r.state == JobState::Queued {
                r.state = JobState::Cancelled;
                r.finished_ms = Some(now_ms());
            }
        }) {
            Ok(rec) if rec.state == JobState::Cancelled => {
                self.finish_locked(channels, &rec);
                Ok(rec)
            }
            // Already running: the worker sees the flag and finishes the job.
            Ok(rec) => Ok(rec),
            Err(e) => Err(CancelError::Store(e)),
        }
    }

    /// Current record plus a receiver for later events; no receiver when the
    /// job has already finished.
    pub fn subscribe(&self, id: &str) -> Option<(JobRecord, Option<broadcast::Receiver<JobEvent>>)> {
        let mut channels = lock(&self.channels);
        let rec = self.store.get(id)?;
        if rec.state.is_terminal() {
            return Some((rec, None));
        }
        let rx = channels
            .entry(id.to_string())
            .or_insert_with(|| broadcast::channel(1024).0)
            .subscribe();
        Some((rec, Some(rx)))
    }

    fn publish(&self, id: &str, event: JobEvent) {
        if let Some(tx) = lock(&self.channels).get(id) {
            let _ = tx.send(event);
        }
    }

    fn finish_locked(&self, mut channels: std::sync::MutexGuard<'_, HashMap<String, broadcast::Sender<JobEvent>>>, rec: &JobRecord) {
        if let Some(tx) = channels.remove(&rec.id) {
            let _ = tx.send(JobEvent::snapshot(rec));
        }
        lock(&self.cancels).remove(&rec.id);
    }

    fn finish(&self, id: &str, f: impl FnOnce(&mut JobRecord)) {
        let channels = lock(&self.channels);
        match self.store.update(id, |r| {
            f(r);
            r.finished_ms = Some(now_ms());
        }) {
            Ok(rec) => self.finish_locked(channels, &rec),
            Err(e) => tracing::error!("job {id}: cannot record final state: {e}"),
        }
    }

    fn fail(&self, id: &str, stage: Option<String>, message: String) {
        tracing::warn!("job {id} failed: {message}");
        self.finish(id, |r| {
            r.state = JobState::Failed;
            r.error = Some(JobFailure { stage, message });
        });
    }

    fn run_job(self: &Arc<Self>, id: &str) {
        let started = self.store.update(id, |r| {
            if r.state == JobState::Queued {
                r.state = JobState::Running;
                r.started_ms = Some(now_ms());
            }
        });
        match started {
            Ok(rec) if rec.state == JobState::Running => self.publish(id, JobEvent::snapshot(&rec)),
            _ => return,
        }
        let inputs = match self.store.inputs(id) {
            Ok(i) => i,
            Err(e) => return self.fail(id, None, format!("cannot read job inputs: {e}")),
        };
        let prepared = match prepare(&inputs, &self.pool, &self.config.default_backend, &self.config.limits) {
            Ok(p) => p,
            Err(r) => return self.fail(id, None, r.to_string()),
        };
        let cancel = lock(&self.cancels)
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(AtomicBool::new(false)))
            .clone();
        let weak = Arc::downgrade(self);
        let job_id = id.to_string();
        let control = JobControl {
            cancel,
            deadline: Some(Instant::now() + self.config.job_timeout),
            progress: Some(Arc::new(move |ev: ProgressEvent| {
                if let Some(svc) = weak.upgrade() {
                    svc.on_progress(&job_id, ev);
                }
            })),
        };
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            run_makeup(&prepared.job, prepared.backend.as_ref(), &control)
        }));
        match outcome {
            Ok(Ok(result)) => self.complete(id, result),
            Ok(Err(Error::Cancelled)) => self.finish(id, |r| r.state = JobState::Cancelled),
            Ok(Err(Error::Timeout)) => self.fail(id, None, "job exceeded its time budget".into()),
            Ok(Err(e)) => self.fail(id, e.stage().map(str::to_string), e.to_string()),
            Err(_) => self.fail(id, None, "internal error while running the job".into()),
        }
    }

    fn on_progress(&self, id: &str, ev: ProgressEvent) {
        let _ = self.store.update(id, |r| {
            r.progress = r.progress.max(ev.fraction);
            r.stage = Some(ev.stage.clone());
        });
        self.publish(
            id,
            JobEvent {
                state: JobState::Running,
                stage: Some(ev.stage),
                fraction: ev.fraction,
                step: ev.step,
                error: None,
            },
        );
    }

    fn complete(&self, id: &str, result: JobResult) {
        let write = || -> Result<Vec<String>, String> {
            let png = result.output.encode_png().map_err(|e| e.to_string())?;
            self.store.write_blob(id, "result.png", &png).map_err(|e| e.to_string())?;
            let mut artifacts = Vec::new();
            if let Some(inter) = &result.intermediates {
                let mut blobs = vec![
                    ("x0_hat.png".to_string(), inter.x0_hat.encode_png()),
                    ("x_new.png".to_string(), inter.x_new.encode_png()),
                ];
                for mask in inter.masks.iter() {
                    blobs.push((format!("mask-{}.png", mask.region), mask.encode_png()));
                }
                for (name, bytes) in blobs {
                    let bytes = bytes.map_err(|e| e.to_string())?;
                    self.store.write_blob(id, &name, &bytes).map_err(|e| e.to_string())?;
                    artifacts.push(name);
                }
            }
            Ok(artifacts)
        };
        match write() {
            Ok(artifacts) => self.finish(id, |r| {
                r.state = JobState::Done;
                r.progress = 1.0;
                r.stage = Some("done".into());
                r.result = Some("result.png".into());
                r.artifacts = artifacts;
                r.timings = Some(result.timings.clone());
            }),
            Err(e) => self.fail(id, None, format!("cannot store the result: {e}")),
        }
    }
}

#[derive(Debug)]
pub enum SubmitError {
    Rejected(Rejection),
    Store(StoreError),
}

async fn dispatch(svc: Weak<Service>, mut rx: mpsc::UnboundedReceiver<String>, workers: usize) {
    let slots = Arc::new(Semaphore::new(workers));
    while let Some(id) = rx.recv().await {
        let Ok(permit) = slots.clone().acquire_owned().await else { break };
        let Some(svc) = svc.upgrade() else { break };
        tokio::task::spawn_blocking(move || {
            svc.run_job(&id);
            drop(permit);
        });
    }
}
