//! `manifest.json`: what a session contains and which pipeline stages have
//! produced their artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use skinmap_core::camgeom::read_cameras;
use skinmap_core::io;
use skinmap_core::rigsim::parse_camera_id;
use skinmap_core::session::SessionLayout;

use crate::{Result, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Preprocess,
    Detect,
    Fuse,
    Track,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Preprocess, Stage::Detect, Stage::Fuse, Stage::Track];

    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Preprocess => None,
            Stage::Detect => Some(Stage::Preprocess),
            Stage::Fuse => Some(Stage::Detect),
            Stage::Track => Some(Stage::Fuse),
        }
    }

    pub fn downstream(self) -> impl Iterator<Item = Stage> {
        Stage::ALL.into_iter().filter(move |s| *s > self)
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Detect => "detect",
            Stage::Fuse => "fuse",
            Stage::Track => "track",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| ServiceError::BadRequest(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub rendered: bool,
    pub detected: bool,
    pub fused: bool,
    pub tracked: bool,
}

impl StageFlags {
    pub fn get(&self, stage: Stage) -> bool {
        match stage {
            Stage::Preprocess => self.rendered,
            Stage::Detect => self.detected,
            Stage::Fuse => self.fused,
            Stage::Track => self.tracked,
        }
    }

    pub fn set(&mut self, stage: Stage, value: bool) {
        match stage {
            Stage::Preprocess => self.rendered = value,
            Stage::Detect => self.detected = value,
            Stage::Fuse => self.fused = value,
            Stage::Track => self.tracked = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub path: String,
    /// Pole letter, `A` is the subject's front.
    pub pole: String,
    /// 1-based ring index counted from the floor.
    pub height_index: u32,
}

/// Provenance of one stage run: the tool, its parameters and the SHA-256
/// of every artifact it wrote (keyed by session-relative path).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub tool: String,
    pub version: String,
    pub parameters: serde_json::Value,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub session_id: String,
    pub subject_id: String,
    pub captured_at: String,
    pub cameras: String,
    pub mesh: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture: Option<String>,
    pub images: Vec<ImageEntry>,
    pub stages: StageFlags,
    /// Stages whose artifacts exist but whose inputs changed since (e.g. a
    /// curated-away cluster member).
    #[serde(default)]
    pub stale: BTreeSet<Stage>,
    #[serde(default)]
    pub runs: BTreeMap<Stage, StageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| skinmap_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(sha256_hex(&bytes))
}

impl SessionManifest {
    /// Builds a manifest for a session directory that has cameras and a mesh
    /// but no manifest yet (ingested data). No stage is marked complete until
    /// [`SessionManifest::reconcile`] finds its artifacts.
    pub fn discover(layout: &SessionLayout, subject_id: &str, captured_at: &str) -> Result<Self> {
        let cams = read_cameras(&layout.cameras())?;
        if !layout.mesh().exists() {
            return Err(ServiceError::MalformedSession {
                path: layout.root.clone(),
                msg: "mesh/body.obj is missing".into(),
            });
        }
        let images = cams
            .iter()
            .map(|c| {
                let (pole, height_index) = parse_camera_id(&c.id).unwrap_or(('?', 0));
                ImageEntry {
                    image_id: c.id.clone(),
                    path: c.image_path.clone(),
                    pole: pole.to_string(),
                    height_index,
                }
            })
            .collect();
        Ok(Self {
            session_id: layout.id(),
            subject_id: subject_id.to_string(),
            captured_at: captured_at.to_string(),
            cameras: layout.relative(&layout.cameras()),
            mesh: layout.relative(&layout.mesh()),
            texture: layout.texture().exists().then(|| layout.relative(&layout.texture())),
            images,
            stages: StageFlags::default(),
            stale: BTreeSet::new(),
            runs: BTreeMap::new(),
        })
    }

    pub fn load(layout: &SessionLayout) -> Result<Self> {
        let path = layout.manifest();
        if !path.exists() {
            return Err(ServiceError::NotFound(format!("{} has no manifest", layout.root.display())));
        }
        io::read_json(&path).map_err(|e| ServiceError::MalformedSession {
            path: layout.root.clone(),
            msg: e.to_string(),
        })
    }

    /// Loads the manifest, or discovers one for a session that has none, and
    /// brings the stage flags in line with the artifacts on disk.
    pub fn load_or_discover(layout: &SessionLayout, subject_id: &str) -> Result<Self> {
        let mut m = if layout.manifest().exists() {
            Self::load(layout)?
        } else {
            Self::discover(layout, subject_id, &chrono::Utc::now().to_rfc3339())?
        };
        m.reconcile(layout);
        Ok(m)
    }

    pub fn save(&self, layout: &SessionLayout) -> Result<()> {
        io::write_json(&layout.manifest(), self)?;
        Ok(())
    }

    /// Artifact files a completed stage must have left behind.
    pub fn artifacts(&self, layout: &SessionLayout, stage: Stage) -> Vec<std::path::PathBuf> {
        match stage {
            Stage::Preprocess => self
                .images
                .iter()
                .flat_map(|i| [layout.depth(&i.image_id), layout.mask(&i.image_id)])
                .collect(),
            Stage::Detect => vec![layout.detections()],
            Stage::Fuse => vec![layout.lesions()],
            Stage::Track => vec![layout.tracks()],
        }
    }

    /// Clears every flag whose artifacts are missing or whose prerequisite is
    /// not complete. Returns true when something changed.
    pub fn reconcile(&mut self, layout: &SessionLayout) -> bool {
        let before = (self.stages, self.stale.clone());
        let mut upstream_ok = true;
        for stage in Stage::ALL {
            let present = self.artifacts(layout, stage).iter().all(|p| p.exists());
            let ok = upstream_ok && self.stages.get(stage) && present;
            self.stages.set(stage, ok);
            if !ok {
                self.stale.remove(&stage);
                self.runs.remove(&stage);
            }
            upstream_ok = ok;
        }
        before != (self.stages, self.stale.clone())
    }

    /// True when the stage has completed and is not stale.
    pub fn is_current(&self, stage: Stage) -> bool {
        self.stages.get(stage) && !self.stale.contains(&stage)
    }
}
