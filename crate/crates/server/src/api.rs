use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::Json;
use protosplit::bundle::{Aggregates, LogRecord, SessionEvent, SessionState, Verdict};
use protosplit::detect::detect_with_activations;
use protosplit::pipeline::{heuristic_concepts, split_prototype};
use protosplit::split::{concepts_from_labels, ConceptLabel, ConceptSets};
use protosplit::{corpus_activations, detect::top_activated_patches};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};
use crate::state::{AppState, ChannelView, Job, JobKind, JobStatus, PatchView, SplitView};

type AppRef = State<Arc<AppState>>;

#[derive(Debug, Deserialize)]
pub struct Page {
    #[serde(default)]
    pub offset: usize,
    #[serde(default = "default_limit")]
    pub limit: usize,
}

fn default_limit() -> usize {
    50
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PrototypeSummary {
    pub id: usize,
    /// Position in the inconsistency ranking, for flagged prototypes.
    pub rank: Option<usize>,
    pub dissimilarity: f64,
    pub flagged: bool,
    /// `none`, or the status of the latest split job on this prototype.
    pub split_status: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PrototypeList {
    pub delta_star: f64,
    pub total: usize,
    pub flagged: usize,
    pub offset: usize,
    pub items: Vec<PrototypeSummary>,
}

/// Flagged prototypes in ranking order, then the rest by id.
pub async fn list_prototypes(State(app): AppRef, Query(page): Query<Page>) -> ApiResult<Json<PrototypeList>> {
    let report = app
        .detection()
        .ok_or_else(|| ApiError::Conflict("run detection first".into()))?;
    let d = app.bundle.bank.num_prototypes();
    let mut order = report.ranking.clone();
    order.extend((0..d).filter(|i| !report.ranking.contains(i)));
    let items = order
        .iter()
        .enumerate()
        .skip(page.offset)
        .take(page.limit)
        .map(|(pos, &id)| {
            let r = report.report(id);
            PrototypeSummary {
                id,
                rank: (pos < report.ranking.len()).then_some(pos),
                dissimilarity: r.map_or(0.0, |r| r.dissimilarity),
                flagged: r.is_some_and(|r| r.flagged),
                split_status: app.split_status(id),
            }
        })
        .collect();
    Ok(Json(PrototypeList {
        delta_star: report.delta_star,
        total: d,
        flagged: report.ranking.len(),
        offset: page.offset,
        items,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JobRef {
    pub job: u64,
}

pub async fn start_detection(State(app): AppRef) -> ApiResult<(StatusCode, Json<JobRef>)> {
    let id = app.create_job(JobKind::Detect, None, None);
    let worker = app.clone();
    tokio::spawn(async move {
        let Ok(_permit) = worker.workers.clone().acquire_owned().await else { return };
        worker.update_job(id, |j| j.status = JobStatus::Running);
        let inner = worker.clone();
        let outcome = tokio::task::spawn_blocking(move || {
            detect_with_activations(
                &inner.bundle.corpus,
                inner.activations(),
                &inner.bundle.bank,
                &inner.config.detection,
                inner.config.execution,
            )
        })
        .await;
        match outcome {
            Ok(Ok(report)) => {
                worker.set_detection(report);
                worker.update_job(id, |j| {
                    j.status = JobStatus::Done;
                    j.result = Some("/v1/prototypes".into());
                });
            }
            Ok(Err(e)) => worker.update_job(id, |j| fail(j, e.to_string())),
            Err(e) => worker.update_job(id, |j| fail(j, format!("detection task panicked: {e}"))),
        }
    });
    Ok((StatusCode::ACCEPTED, Json(JobRef { job: id })))
}

fn fail(job: &mut Job, error: String) {
    job.status = JobStatus::Failed;
    job.error = Some(error);
}

#[derive(Debug, Deserialize)]
pub struct PatchQuery {
    pub k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PatchList {
    pub prototype: usize,
    pub short: bool,
    pub patches: Vec<PatchView>,
}

pub async fn get_patches(
    State(app): AppRef,
    Path(id): Path<usize>,
    Query(q): Query<PatchQuery>,
) -> ApiResult<Json<PatchList>> {
    let k = q.k.unwrap_or(app.config.detection.patches_per_prototype);
    let top = app.served(id, k)?;
    Ok(Json(PatchList {
        prototype: id,
        short: top.short,
        patches: top
            .patches
            .iter()
            .zip(&top.activations)
            .map(|(&i, &a)| app.patch_view(i, a))
            .collect(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JudgmentBody {
    pub session: String,
    pub inconsistent: bool,
}

pub async fn submit_judgment(
    State(app): AppRef,
    Path(id): Path<usize>,
    Json(body): Json<JudgmentBody>,
) -> ApiResult<StatusCode> {
    app.check_prototype(id)?;
    check_session(&body.session)?;
    app.record(&[LogRecord::new(
        body.session,
        id,
        SessionEvent::Phase1Judgment {
            inconsistent: body.inconsistent,
        },
    )])?;
    Ok(StatusCode::NO_CONTENT)
}

fn check_session(session: &str) -> ApiResult<()> {
    if session.trim().is_empty() {
        return Err(ApiError::BadRequest("session id must not be empty".into()));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelsBody {
    pub session: String,
    pub labels: BTreeMap<usize, ConceptLabel>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelVerdict {
    pub accepted: bool,
    pub submission: u32,
    pub concept_a: usize,
    pub concept_b: usize,
    pub reference: usize,
}

impl AppState {
    fn label_sets(&self, id: usize, labels: &BTreeMap<usize, ConceptLabel>) -> ApiResult<ConceptSets> {
        let cfg = &self.config.split;
        Ok(concepts_from_labels(
            &self.bundle.corpus,
            self.activations(),
            &self.bundle.bank,
            id,
            labels,
            cfg.min_concept,
            cfg.pool_something_else,
        )?)
    }

    fn split_status(&self, id: usize) -> String {
        if self.split_running(id) {
            return "running".into();
        }
        let replay = self.replay();
        let latest = replay
            .sessions
            .values()
            .filter_map(|s| s.prototypes.get(&id))
            .flat_map(|p| p.splits.iter())
            .max_by_key(|s| s.job);
        match latest {
            None => "none".into(),
            Some(s) if !s.finished => "interrupted".into(),
            Some(s) if s.error.is_some() => "failed".into(),
            Some(_) => "done".into(),
        }
    }
}

pub async fn submit_labels(
    State(app): AppRef,
    Path(id): Path<usize>,
    Json(body): Json<LabelsBody>,
) -> ApiResult<Json<LabelVerdict>> {
    check_session(&body.session)?;
    let served = app.served(id, app.config.detection.patches_per_prototype)?;
    if let Some(p) = body.labels.keys().find(|p| !served.patches.contains(p)) {
        return Err(ApiError::Rejected(format!(
            "patch {p} is not among the patches served for prototype {id}"
        )));
    }
    let sets = app.label_sets(id, &body.labels)?;
    let submission = app
        .replay()
        .sessions
        .get(&body.session)
        .and_then(|s| s.prototypes.get(&id))
        .and_then(|p| p.submission)
        .map_or(1, |s| s + 1);
    let records: Vec<LogRecord> = body
        .labels
        .iter()
        .map(|(&patch, &label)| {
            LogRecord::new(
                body.session.clone(),
                id,
                SessionEvent::PatchLabel {
                    submission,
                    patch,
                    label,
                },
            )
        })
        .collect();
    app.record(&records)?;
    Ok(Json(LabelVerdict {
        accepted: true,
        submission,
        concept_a: sets.s1.len(),
        concept_b: sets.s2.len(),
        reference: sets.sr.len(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitBody {
    pub session: String,
    /// Use the detector's cliques instead of submitted labels.
    #[serde(default)]
    pub auto: bool,
}

pub async fn start_split(
    State(app): AppRef,
    Path(id): Path<usize>,
    Json(body): Json<SplitBody>,
) -> ApiResult<(StatusCode, Json<JobRef>)> {
    check_session(&body.session)?;
    app.check_prototype(id)?;
    let sets = if body.auto {
        let report = app
            .detection()
            .ok_or_else(|| ApiError::Conflict("run detection first".into()))?;
        heuristic_concepts(&app.bundle.corpus, app.activations(), &app.bundle.bank, &report, id)?
    } else {
        let labels = app
            .replay()
            .sessions
            .get(&body.session)
            .and_then(|s| s.prototypes.get(&id))
            .map(|p| p.labels.clone())
            .filter(|l| !l.is_empty())
            .ok_or_else(|| ApiError::Conflict(format!("no accepted labels for prototype {id}")))?;
        app.label_sets(id, &labels)?
    };

    app.claim_prototype(id)?;
    let job = app.create_job(JobKind::Split, Some(body.session.clone()), Some(id));
    let started = LogRecord::new(body.session.clone(), id, SessionEvent::SplitStarted { job, auto: body.auto });
    if let Err(e) = app.record(&[started]) {
        app.remove_job(job);
        app.release_prototype(id);
        return Err(e);
    }

    let worker = app.clone();
    let session = body.session;
    tokio::spawn(async move {
        let permit = worker.workers.clone().acquire_owned().await;
        worker.update_job(job, |j| j.status = JobStatus::Running);
        let inner = worker.clone();
        let s = session.clone();
        let outcome = tokio::task::spawn_blocking(move || run_split_job(&inner, &s, id, job, sets)).await;
        drop(permit);
        let outcome = match outcome {
            Ok(r) => r,
            Err(e) => Err(format!("split task panicked: {e}")),
        };
        let (converged, duplicate, error) = match &outcome {
            Ok(v) => (v.record.converged, Some(v.record.duplicate), None),
            Err(e) => (false, None, Some(e.clone())),
        };
        let finished = LogRecord::new(
            session,
            id,
            SessionEvent::SplitFinished {
                job,
                converged,
                duplicate,
                error: error.clone(),
            },
        );
        let logged = worker.record(&[finished]);
        match (outcome, logged) {
            (Ok(view), Ok(())) => {
                let path = format!("/v1/prototypes/{id}/split?session={}", view.session);
                worker.store_result(view);
                worker.update_job(job, |j| {
                    j.status = JobStatus::Done;
                    j.result = Some(path);
                });
            }
            (Err(e), _) | (Ok(_), Err(ApiError::LogWrite(e))) => worker.update_job(job, |j| fail(j, e)),
            (Ok(_), Err(e)) => worker.update_job(job, |j| fail(j, e.to_string())),
        }
        worker.release_prototype(id);
    });
    Ok((StatusCode::ACCEPTED, Json(JobRef { job })))
}

fn run_split_job(app: &AppState, session: &str, e: usize, job: u64, sets: ConceptSets) -> Result<SplitView, String> {
    let on_progress = |p: protosplit::split::Progress| {
        app.report_progress(job, p);
        // progress lines are advisory; a failed write must not stop training
        let _ = app.record(&[LogRecord::new(
            session,
            e,
            SessionEvent::SplitProgress {
                job,
                step: p.step,
                loss: p.loss,
                accuracy: p.accuracy,
            },
        )]);
    };
    let corpus = &app.bundle.corpus;
    let exec = app.config.execution;
    let (bank, record) = split_prototype(
        corpus,
        &app.bundle.bank,
        e,
        sets,
        &app.config.split,
        app.split_seed(e),
        exec,
        on_progress,
    )
    .map_err(|err| err.to_string())?;
    let acts = corpus_activations(corpus, &bank, exec).map_err(|err| err.to_string())?;
    let k = app.config.detection.patches_per_prototype;
    let channels = [record.prototype, record.duplicate]
        .into_iter()
        .map(|c| {
            let top = top_activated_patches(corpus, &acts, c, k, app.config.detection.dedup_per_image)?;
            Ok(ChannelView {
                channel: c,
                patches: top
                    .patches
                    .iter()
                    .zip(&top.activations)
                    .map(|(&i, &a)| app.patch_view(i, a))
                    .collect(),
            })
        })
        .collect::<protosplit::Result<Vec<_>>>()
        .map_err(|err| err.to_string())?;
    Ok(SplitView {
        session: session.to_string(),
        prototype: e,
        job,
        record,
        channels,
    })
}

pub async fn get_job(State(app): AppRef, Path(id): Path<u64>) -> ApiResult<Json<Job>> {
    app.job(id)
        .map(Json)
        .ok_or_else(|| ApiError::NotFound(format!("unknown job {id}")))
}

#[derive(Debug, Deserialize)]
pub struct SessionQuery {
    pub session: String,
}

pub async fn get_split(
    State(app): AppRef,
    Path(id): Path<usize>,
    Query(q): Query<SessionQuery>,
) -> ApiResult<Json<SplitView>> {
    app.check_prototype(id)?;
    app.result(&q.session, id)
        .map(|v| Json(v.as_ref().clone()))
        .ok_or_else(|| ApiError::NotFound(format!("no split result for prototype {id} in this session")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AssessmentBody {
    pub session: String,
    pub channel: usize,
    pub verdict: Verdict,
}

/// Accepts one verdict per result channel of the session's latest
/// successful split of the prototype.
pub async fn submit_assessment(
    State(app): AppRef,
    Path(id): Path<usize>,
    Json(body): Json<AssessmentBody>,
) -> ApiResult<StatusCode> {
    check_session(&body.session)?;
    app.check_prototype(id)?;
    let replay = app.replay();
    let split = replay
        .sessions
        .get(&body.session)
        .and_then(|s| s.prototypes.get(&id))
        .and_then(|p| p.splits.iter().rev().find(|s| s.finished && s.error.is_none()))
        .ok_or_else(|| ApiError::Conflict(format!("prototype {id} has no split result to assess")))?;
    let duplicate = split.duplicate.unwrap_or(usize::MAX);
    if body.channel != id && body.channel != duplicate {
        return Err(ApiError::Rejected(format!(
            "channel {} is not a result of splitting prototype {id} (expected {id} or {duplicate})",
            body.channel
        )));
    }
    app.record(&[LogRecord::new(
        body.session,
        id,
        SessionEvent::Phase3Assessment {
            channel: body.channel,
            verdict: body.verdict,
        },
    )])?;
    Ok(StatusCode::NO_CONTENT)
}

pub async fn get_aggregates(State(app): AppRef) -> Json<Aggregates> {
    Json(app.replay().aggregates)
}

pub async fn get_session(State(app): AppRef, Path(session): Path<String>) -> Json<SessionState> {
    Json(app.replay().sessions.remove(&session).unwrap_or_default())
}

pub async fn get_thumbnail(State(app): AppRef, Path(patch): Path<usize>) -> ApiResult<impl IntoResponse> {
    let bytes = app
        .bundle
        .corpus
        .patches
        .get(patch)
        .and_then(|p| p.thumbnail_ref.as_ref())
        .and_then(|t| app.bundle.thumbnails.get(t))
        .ok_or_else(|| ApiError::NotFound(format!("no thumbnail for patch {patch}")))?;
    let content_type = if bytes.starts_with(b"P5") {
        "image/x-portable-graymap"
    } else {
        "application/octet-stream"
    };
    Ok(([(header::CONTENT_TYPE, content_type)], bytes.clone()))
}
