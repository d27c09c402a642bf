//! Clinician edits to detections. Removal is a soft delete: the detection
//! stays in `detections.json` with `removed = true`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use skinmap_core::detect::{detections_from_json, DetectionSet};
use skinmap_core::fuse3d::read_registry;
use skinmap_core::io;
use skinmap_core::session::SessionLayout;

use crate::lock::SessionLock;
use crate::manifest::{SessionManifest, Stage};
use crate::{Result, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditAction {
    Remove,
    Restore,
    Annotate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationEdit {
    pub image_id: String,
    pub det_id: u32,
    pub action: EditAction,
    #[serde(default)]
    pub notes: Option<String>,
    /// Filled with the current time when absent.
    #[serde(default)]
    pub edited_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditAck {
    pub image_id: String,
    pub det_id: u32,
    pub action: EditAction,
    pub removed: bool,
    pub notes: String,
    pub edited_at: String,
    /// The edit changed the inputs of existing fuse results.
    pub fused_stale: bool,
}

pub fn apply_edit(session: &Path, edit: &CurationEdit) -> Result<EditAck> {
    apply_edit_with(session, edit, |_| Ok(()))
}

/// [`apply_edit`] with a hook that runs after the new `detections.json` is
/// written to its temporary file and before it replaces the old one.
pub fn apply_edit_with<F>(session: &Path, edit: &CurationEdit, before_rename: F) -> Result<EditAck>
where
    F: FnOnce(&Path) -> std::io::Result<()>,
{
    let lock = SessionLock::for_session(session);
    let _guard = lock.lock();
    let layout = SessionLayout::new(session);
    let path = layout.detections();
    if !path.exists() {
        return Err(ServiceError::NotFound(format!("session {} has no detections", layout.id())));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| skinmap_core::Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let mut set: DetectionSet = detections_from_json(&text).map_err(|e| ServiceError::MalformedSession {
        path: layout.root.clone(),
        msg: e.to_string(),
    })?;
    let det = set
        .get_mut(&edit.image_id)
        .and_then(|v| v.iter_mut().find(|d| d.det_id == edit.det_id))
        .ok_or_else(|| ServiceError::NotFound(format!("detection {}/{}", edit.image_id, edit.det_id)))?;
    let was_removed = det.removed;
    match edit.action {
        EditAction::Remove => det.removed = true,
        EditAction::Restore => det.removed = false,
        EditAction::Annotate => {}
    }
    if let Some(n) = &edit.notes {
        det.notes = n.clone();
    }
    let ack_removed = det.removed;
    let ack_notes = det.notes.clone();
    let edited_at = edit
        .edited_at
        .clone()
        .unwrap_or_else(|| chrono::Utc::now().to_rfc3339());

    let json = serde_json::to_string_pretty(&set).map_err(skinmap_core::Error::from)? + "\n";
    io::write_atomic_with(&path, json.as_bytes(), before_rename)?;

    // staleness: fuse results depend on the set of non-removed detections
    let mut fused_stale = false;
    if was_removed != ack_removed && layout.manifest().exists() {
        let mut manifest = SessionManifest::load(&layout)?;
        if manifest.stages.fused {
            fused_stale = if ack_removed {
                read_registry(&layout.lesions())
                    .map(|r| r.lesion_of(&edit.image_id, edit.det_id).is_some())
                    .unwrap_or(true)
            } else {
                true
            };
            if fused_stale {
                manifest.stale.insert(Stage::Fuse);
                if manifest.stages.tracked {
                    manifest.stale.insert(Stage::Track);
                }
                manifest.save(&layout)?;
            }
        }
    }

    let ack = EditAck {
        image_id: edit.image_id.clone(),
        det_id: edit.det_id,
        action: edit.action,
        removed: ack_removed,
        notes: ack_notes,
        edited_at: edited_at.clone(),
        fused_stale,
    };
    append_log(&layout, edit, &edited_at)?;
    Ok(ack)
}

fn append_log(layout: &SessionLayout, edit: &CurationEdit, edited_at: &str) -> Result<()> {
    let entry = CurationEdit {
        edited_at: Some(edited_at.to_string()),
        ..edit.clone()
    };
    let line = serde_json::to_string(&entry).map_err(skinmap_core::Error::from)?;
    let path = layout.curation_log();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| skinmap_core::Error::Io { path: path.clone(), source: e })?;
    writeln!(f, "{line}").map_err(|e| skinmap_core::Error::Io { path, source: e })?;
    Ok(())
}
