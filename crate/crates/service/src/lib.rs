//! Session persistence, pipeline orchestration and the HTTP API used by the
//! review UI. Sessions are plain directories of flat files; every write goes
//! through an atomic rename so readers never observe a partial file.

pub mod config;
pub mod curation;
pub mod eval;
pub mod lock;
pub mod manifest;
pub mod pipeline;
pub mod server;

use std::path::PathBuf;

pub use config::PipelineConfig;
pub use curation::{apply_edit, CurationEdit, EditAck, EditAction};
pub use manifest::{SessionManifest, Stage, StageFlags};
pub use pipeline::{run_pipeline, synthesize};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] skinmap_core::Error),
    #[error("stage `{stage}` requires stage `{missing}` to have run first")]
    MissingPrerequisite { stage: Stage, missing: Stage },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error("malformed session {path}: {msg}")]
    MalformedSession { path: PathBuf, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ServiceError>;
