use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use protosplit::bundle::{read_log, replay, LogRecord, PatchBundle, Replay, SessionEvent, SessionLog};
use protosplit::detect::{top_activated_patches, DetectionConfig, DetectionReport, TopPatches};
use protosplit::pipeline::{split_seed, SplitConfig, SplitRecord};
use protosplit::split::Progress;
use protosplit::{corpus_activations, ActivationVector, Execution};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::error::{ApiError, ApiResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub split: SplitConfig,
    pub detection: DetectionConfig,
    /// Maximum number of jobs executing at once.
    pub workers: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            split: SplitConfig::default(),
            detection: DetectionConfig::default(),
            workers: 2,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Detect,
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: u64,
    pub kind: JobKind,
    pub status: JobStatus,
    pub session: Option<String>,
    pub prototype: Option<usize>,
    pub progress: Option<Progress>,
    /// Path of the resource holding the result once done.
    pub result: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchView {
    pub patch: usize,
    pub image_id: String,
    pub h: u32,
    pub w: u32,
    pub activation: f64,
    pub thumbnail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelView {
    pub channel: usize,
    pub patches: Vec<PatchView>,
}

/// Outcome of a finished split, kept for the assessment phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitView {
    pub session: String,
    pub prototype: usize,
    pub job: u64,
    pub record: SplitRecord,
    pub channels: Vec<ChannelView>,
}

/// Shared service state. The bundle is read-only; splits run against the
/// bundle's bank, one independent result per session and prototype.
pub struct AppState {
    pub bundle: Arc<PatchBundle>,
    pub config: ServerConfig,
    activations: Vec<ActivationVector>,
    detection: RwLock<Option<Arc<DetectionReport>>>,
    jobs: Mutex<BTreeMap<u64, Job>>,
    next_job: AtomicU64,
    active_splits: Mutex<HashSet<usize>>,
    results: Mutex<HashMap<(String, usize), Arc<SplitView>>>,
    journal: Mutex<Vec<LogRecord>>,
    log: SessionLog,
    pub(crate) workers: Arc<Semaphore>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl AppState {
    /// Loads the existing session log at `log_path` (if any) and appends to
    /// it from then on.
    pub fn new(
        bundle: PatchBundle,
        config: ServerConfig,
        detection: Option<DetectionReport>,
        log_path: &Path,
    ) -> protosplit::Result<Self> {
        if config.workers == 0 {
            return Err(protosplit::Error::InvalidConfig("worker count must be >= 1".into()));
        }
        config.detection.validate()?;
        config.split.hyper.validate()?;
        let activations = corpus_activations(&bundle.corpus, &bundle.bank, config.execution)?;
        let records = read_log(log_path)?;
        let last_job = records
            .iter()
            .filter_map(|r| match r.event {
                SessionEvent::SplitStarted { job, .. } => Some(job),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let log = SessionLog::open(log_path)?;
        Ok(Self {
            workers: Arc::new(Semaphore::new(config.workers)),
            bundle: Arc::new(bundle),
            config,
            activations,
            detection: RwLock::new(detection.map(Arc::new)),
            jobs: Mutex::new(BTreeMap::new()),
            next_job: AtomicU64::new(last_job + 1),
            active_splits: Mutex::new(HashSet::new()),
            results: Mutex::new(HashMap::new()),
            journal: Mutex::new(records),
            log,
        })
    }

    pub fn activations(&self) -> &[ActivationVector] {
        &self.activations
    }

    pub fn detection(&self) -> Option<Arc<DetectionReport>> {
        self.detection.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub(crate) fn set_detection(&self, report: DetectionReport) {
        *self.detection.write().unwrap_or_else(|p| p.into_inner()) = Some(Arc::new(report));
    }

    pub fn check_prototype(&self, id: usize) -> ApiResult<()> {
        if id < self.bundle.bank.num_prototypes() {
            Ok(())
        } else {
            Err(ApiError::NotFound(format!("unknown prototype {id}")))
        }
    }

    /// Top-`k` patches of channel `d` on the bundle's bank.
    pub fn served(&self, d: usize, k: usize) -> ApiResult<TopPatches> {
        self.check_prototype(d)?;
        Ok(top_activated_patches(
            &self.bundle.corpus,
            &self.activations,
            d,
            k,
            self.config.detection.dedup_per_image,
        )?)
    }

    pub fn patch_view(&self, patch: usize, activation: f64) -> PatchView {
        let p = &self.bundle.corpus.patches[patch];
        let thumbnail = p
            .thumbnail_ref
            .as_ref()
            .filter(|t| self.bundle.thumbnails.contains_key(*t))
            .map(|_| format!("/v1/thumbnails/{patch}"));
        PatchView {
            patch,
            image_id: p.image_id.clone(),
            h: p.location.h,
            w: p.location.w,
            activation,
            thumbnail,
        }
    }

    /// Appends records to the session log, then to the in-memory journal.
    pub fn record(&self, records: &[LogRecord]) -> ApiResult<()> {
        let mut journal = lock(&self.journal);
        let written = match records {
            [one] => self.log.append(one),
            many => self.log.append_batch(many),
        };
        written.map_err(|e| ApiError::LogWrite(e.to_string()))?;
        journal.extend_from_slice(records);
        Ok(())
    }

    pub fn replay(&self) -> Replay {
        replay(&lock(&self.journal))
    }

    pub fn job(&self, id: u64) -> Option<Job> {
        lock(&self.jobs).get(&id).cloned()
    }

    pub(crate) fn create_job(
        &self,
        kind: JobKind,
        session: Option<String>,
        prototype: Option<usize>,
    ) -> u64 {
        let id = self.next_job.fetch_add(1, Ordering::SeqCst);
        lock(&self.jobs).insert(
            id,
            Job {
                id,
                kind,
                status: JobStatus::Queued,
                session,
                prototype,
                progress: None,
                result: None,
                error: None,
            },
        );
        id
    }

    pub(crate) fn remove_job(&self, id: u64) {
        lock(&self.jobs).remove(&id);
    }

    /// Applies `f` to a job unless it already reached a terminal state.
    pub(crate) fn update_job(&self, id: u64, f: impl FnOnce(&mut Job)) {
        if let Some(job) = lock(&self.jobs).get_mut(&id) {
            if !job.status.is_terminal() {
                f(job);
            }
        }
    }

    pub(crate) fn report_progress(&self, id: u64, progress: Progress) {
        self.update_job(id, |job| {
            if job.progress.is_none_or(|p| progress.step > p.step) {
                job.progress = Some(progress);
            }
        });
    }

    pub(crate) fn claim_prototype(&self, id: usize) -> ApiResult<()> {
        if lock(&self.active_splits).insert(id) {
            Ok(())
        } else {
            Err(ApiError::Conflict(format!("a split of prototype {id} is already running")))
        }
    }

    pub(crate) fn release_prototype(&self, id: usize) {
        lock(&self.active_splits).remove(&id);
    }

    pub fn split_running(&self, id: usize) -> bool {
        lock(&self.active_splits).contains(&id)
    }

    pub(crate) fn store_result(&self, view: SplitView) {
        lock(&self.results).insert((view.session.clone(), view.prototype), Arc::new(view));
    }

    pub fn result(&self, session: &str, prototype: usize) -> Option<Arc<SplitView>> {
        lock(&self.results).get(&(session.to_string(), prototype)).cloned()
    }

    pub fn split_seed(&self, prototype: usize) -> u64 {
        split_seed(self.config.seed, prototype)
    }
}
