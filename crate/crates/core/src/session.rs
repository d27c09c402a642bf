//! File layout of a capture session directory.

use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionLayout {
    pub root: PathBuf,
}

impl SessionLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn id(&self) -> String {
        self.root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn image(&self, camera_id: &str) -> PathBuf {
        self.images_dir().join(format!("{camera_id}.png"))
    }

    /// Relative image path as recorded in `cameras.json`.
    pub fn image_rel(camera_id: &str) -> String {
        format!("images/{camera_id}.png")
    }

    pub fn depth_dir(&self) -> PathBuf {
        self.root.join("depth")
    }

    pub fn depth(&self, camera_id: &str) -> PathBuf {
        self.depth_dir().join(format!("{camera_id}.pfm"))
    }

    pub fn masks_dir(&self) -> PathBuf {
        self.root.join("masks")
    }

    pub fn mask(&self, camera_id: &str) -> PathBuf {
        self.masks_dir().join(format!("{camera_id}.png"))
    }

    pub fn cameras(&self) -> PathBuf {
        self.root.join("cameras.json")
    }

    pub fn mesh_dir(&self) -> PathBuf {
        self.root.join("mesh")
    }

    pub fn mesh(&self) -> PathBuf {
        self.mesh_dir().join("body.obj")
    }

    pub fn texture(&self) -> PathBuf {
        self.mesh_dir().join("texture.png")
    }

    pub fn gt_dir(&self) -> PathBuf {
        self.root.join("gt")
    }

    pub fn gt_detections(&self) -> PathBuf {
        self.gt_dir().join("detections.json")
    }

    pub fn gt_lesions(&self) -> PathBuf {
        self.gt_dir().join("lesions3d.json")
    }

    pub fn detections(&self) -> PathBuf {
        self.root.join("detections.json")
    }

    pub fn lesions(&self) -> PathBuf {
        self.root.join("lesions3d.json")
    }

    pub fn tracks(&self) -> PathBuf {
        self.root.join("tracks.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn curation_log(&self) -> PathBuf {
        self.root.join("curation_log.jsonl")
    }

    /// Path of `p` relative to the session root, with `/` separators.
    pub fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .unwrap_or(p)
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }
}
