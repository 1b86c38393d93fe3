//! Append-only session log (JSON lines) and its replay.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::split::ConceptLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    More,
    Less,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Phase1Judgment {
        inconsistent: bool,
    },
    /// One label of a submission; a new `submission` number replaces the
    /// prototype's earlier labels.
    PatchLabel {
        submission: u32,
        patch: usize,
        label: ConceptLabel,
    },
    SplitStarted {
        job: u64,
        auto: bool,
    },
    SplitProgress {
        job: u64,
        step: usize,
        loss: f64,
        accuracy: (f64, f64, f64),
    },
    SplitFinished {
        job: u64,
        converged: bool,
        duplicate: Option<usize>,
        error: Option<String>,
    },
    Phase3Assessment {
        channel: usize,
        verdict: Verdict,
    },
}

impl SessionEvent {
    /// Events that end a phase are flushed to disk before `append` returns.
    pub fn is_phase_boundary(&self) -> bool {
        !matches!(
            self,
            SessionEvent::PatchLabel { .. } | SessionEvent::SplitProgress { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub session: String,
    pub prototype: usize,
    #[serde(flatten)]
    pub event: SessionEvent,
}

impl LogRecord {
    pub fn new(session: impl Into<String>, prototype: usize, event: SessionEvent) -> Self {
        Self {
            session: session.into(),
            prototype,
            event,
        }
    }
}

/// Shared handle to a log file. Each record is written with a single
/// `write_all` under the lock, so concurrent writers never interleave
/// within a line.
#[derive(Debug)]
pub struct SessionLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl SessionLog {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &LogRecord) -> Result<()> {
        self.append_all(std::slice::from_ref(record), record.event.is_phase_boundary())
    }

    /// Appends a batch of records and syncs once at the end.
    pub fn append_batch(&self, records: &[LogRecord]) -> Result<()> {
        self.append_all(records, true)
    }

    fn append_all(&self, records: &[LogRecord], sync: bool) -> Result<()> {
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
        file.write_all(&buf).map_err(|e| Error::io(&self.path, e))?;
        if sync {
            file.sync_data().map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Parses a log file. A missing file is an empty log; a torn final line
/// (from a crash mid-write) is ignored.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    parse_log(&text)
}

pub fn parse_log(text: &str) -> Result<Vec<LogRecord>> {
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !complete => break,
            Err(e) => {
                return Err(Error::Validation(format!("session log line {}: {e}", i + 1)));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub job: u64,
    pub auto: bool,
    pub last_step: usize,
    pub finished: bool,
    pub converged: bool,
    pub duplicate: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeState {
    pub judgment: Option<bool>,
    pub submission: Option<u32>,
    pub labels: BTreeMap<usize, ConceptLabel>,
    pub splits: Vec<SplitOutcome>,
    pub assessments: BTreeMap<usize, Verdict>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub prototypes: BTreeMap<usize, PrototypeState>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub sessions: usize,
    pub judgments: usize,
    pub judged_inconsistent: usize,
    pub patch_labels: usize,
    pub splits_started: usize,
    pub splits_finished: usize,
    pub assessments: usize,
    pub more_consistent: usize,
    /// Share of assessments with verdict "more consistent" (0 when none).
    pub more_consistent_fraction: f64,
    /// Judgments + patch labels + assessments.
    pub decisions: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Replay {
    pub sessions: BTreeMap<String, SessionState>,
    pub aggregates: Aggregates,
}

/// Folds records in order into per-session state and global counts.
pub fn replay(records: &[LogRecord]) -> Replay {
    let mut out = Replay::default();
    let agg = &mut out.aggregates;
    for r in records {
        let state = out
            .sessions
            .entry(r.session.clone())
            .or_default()
            .prototypes
            .entry(r.prototype)
            .or_default();
        match &r.event {
            SessionEvent::Phase1Judgment { inconsistent } => {
                state.judgment = Some(*inconsistent);
                agg.judgments += 1;
                agg.judged_inconsistent += usize::from(*inconsistent);
            }
            SessionEvent::PatchLabel {
                submission,
                patch,
                label,
            } => {
                if state.submission != Some(*submission) {
                    state.submission = Some(*submission);
                    state.labels.clear();
                }
                state.labels.insert(*patch, *label);
                agg.patch_labels += 1;
            }
            SessionEvent::SplitStarted { job, auto } => {
                state.splits.push(SplitOutcome {
                    job: *job,
                    auto: *auto,
                    last_step: 0,
                    finished: false,
                    converged: false,
                    duplicate: None,
                    error: None,
                });
                agg.splits_started += 1;
            }
            SessionEvent::SplitProgress { job, step, .. } => {
                if let Some(s) = state.splits.iter_mut().rev().find(|s| s.job == *job) {
                    s.last_step = s.last_step.max(*step);
                }
            }
            SessionEvent::SplitFinished {
                job,
                converged,
                duplicate,
                error,
            } => {
                if let Some(s) = state.splits.iter_mut().rev().find(|s| s.job == *job) {
                    s.finished = true;
                    s.converged = *converged;
                    s.duplicate = *duplicate;
                    s.error = error.clone();
                }
                agg.splits_finished += 1;
            }
            SessionEvent::Phase3Assessment { channel, verdict } => {
                state.assessments.insert(*channel, *verdict);
                agg.assessments += 1;
                agg.more_consistent += usize::from(*verdict == Verdict::More);
            }
        }
    }
    agg.sessions = out.sessions.len();
    agg.decisions = agg.judgments + agg.patch_labels + agg.assessments;
    agg.more_consistent_fraction = if agg.assessments == 0 {
        0.0
    } else {
        agg.more_consistent as f64 / agg.assessments as f64
    };
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn label(session: &str, proto: usize, sub: u32, patch: usize, l: ConceptLabel) -> LogRecord {
        LogRecord::new(
            session,
            proto,
            SessionEvent::PatchLabel {
                submission: sub,
                patch,
                label: l,
            },
        )
    }

    #[test]
    fn empty_log_is_empty_state() {
        let dir = tempfile::tempdir().unwrap();
        let r = replay(&read_log(&dir.path().join("none.jsonl")).unwrap());
        assert!(r.sessions.is_empty());
        assert_eq!(r.aggregates, Aggregates::default());
    }

    #[test]
    fn resubmission_replaces_labels() {
        let recs = vec![
            label("s", 3, 0, 1, ConceptLabel::A),
            label("s", 3, 0, 2, ConceptLabel::B),
            label("s", 3, 1, 5, ConceptLabel::A),
        ];
        let r = replay(&recs);
        let labels = &r.sessions["s"].prototypes[&3].labels;
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[&5], ConceptLabel::A);
        assert_eq!(r.aggregates.patch_labels, 3);
        assert_eq!(replay(&recs), r);
    }

    #[test]
    fn aggregates_count_decisions() {
        let recs = vec![
            LogRecord::new("u", 0, SessionEvent::Phase1Judgment { inconsistent: true }),
            label("u", 0, 0, 4, ConceptLabel::A),
            LogRecord::new("u", 0, SessionEvent::Phase3Assessment { channel: 0, verdict: Verdict::More }),
            LogRecord::new("u", 0, SessionEvent::Phase3Assessment { channel: 9, verdict: Verdict::Less }),
        ];
        let a = replay(&recs).aggregates;
        assert_eq!(a.decisions, 4);
        assert_eq!(a.assessments, 2);
        assert_eq!(a.more_consistent_fraction, 0.5);
    }

    #[test]
    fn torn_tail_is_ignored_but_middle_corruption_is_not() {
        let good = serde_json::to_string(&label("s", 0, 0, 1, ConceptLabel::A)).unwrap();
        assert_eq!(parse_log(&format!("{good}\n{{\"sess")).unwrap().len(), 1);
        assert!(parse_log(&format!("{{\"sess\n{good}\n")).is_err());
    }

    #[test]
    fn concurrent_writers_do_not_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let log = Arc::new(SessionLog::open(&path).unwrap());
        let threads: Vec<_> = (0..8)
            .map(|t| {
                let log = Arc::clone(&log);
                std::thread::spawn(move || {
                    for i in 0..200 {
                        let rec = label(&format!("s{t}"), t, 0, i, ConceptLabel::B);
                        if i % 50 == 0 {
                            log.append_batch(&[rec]).unwrap();
                        } else {
                            log.append(&rec).unwrap();
                        }
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        let recs = read_log(&path).unwrap();
        assert_eq!(recs.len(), 1600);
        let r = replay(&recs);
        for t in 0..8 {
            let labels = &r.sessions[&format!("s{t}")].prototypes[&t].labels;
            assert_eq!(labels.keys().copied().collect::<Vec<_>>(), (0..200).collect::<Vec<_>>());
        }
    }
}
