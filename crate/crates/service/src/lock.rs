//! Per-session write serialization shared by pipeline runs and curation edits.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};

static LOCKS: OnceLock<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>> = OnceLock::new();

fn key(session: &Path) -> PathBuf {
    std::fs::canonicalize(session).unwrap_or_else(|_| session.to_path_buf())
}

/// Lock handle for one session directory. Hold the guard from
/// [`SessionLock::lock`] for the whole read-modify-write sequence.
pub struct SessionLock(Arc<Mutex<()>>);

impl SessionLock {
    pub fn for_session(session: &Path) -> Self {
        let map = LOCKS.get_or_init(Default::default);
        let mut map = map.lock().unwrap_or_else(|e| e.into_inner());
        Self(map.entry(key(session)).or_default().clone())
    }

    pub fn lock(&self) -> MutexGuard<'_, ()> {
        // a panic while holding the lock leaves files consistent thanks to
        // atomic writes, so a poisoned lock is still usable
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }
}
