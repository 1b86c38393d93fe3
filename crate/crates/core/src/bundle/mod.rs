//! Persistence: patch bundles, binary blocks, session logs and JSON
//! reports.

pub mod block;
mod log;
mod patch_bundle;

pub use log::{
    parse_log, read_log, replay, Aggregates, LogRecord, PrototypeState, Replay, SessionEvent,
    SessionLog, SessionState, SplitOutcome, Verdict,
};
pub use patch_bundle::{
    read_bundle, read_json, read_manifest, write_bundle, write_json, FileEntry, Manifest,
    PatchBundle, SplitLineage, BUNDLE_FORMAT, SCHEMA_VERSION,
};

use std::path::Path;

use crate::error::Result;
use crate::split::SplitSession;

/// Saves an in-flight or finished split session.
pub fn save_checkpoint(session: &SplitSession, path: &Path) -> Result<()> {
    write_json(session, path)
}

pub fn load_checkpoint(path: &Path) -> Result<SplitSession> {
    read_json(path)
}
