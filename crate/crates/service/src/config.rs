//! Pipeline parameters, loaded from a JSON file. Every field has a default,
//! so `{}` is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skinmap_core::detect::{self, LogParams};
use skinmap_core::fuse3d::FuseParams;
use skinmap_core::rigsim::{BendParams, LesionPlacement, PhantomConfig, RigConfig};
use skinmap_core::track;

use crate::{Result, ServiceError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub subject_id: String,
    pub rig: RigConfig,
    pub synth: SynthConfig,
    pub detect: DetectConfig,
    pub fuse: FuseParams,
    pub track: TrackConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            subject_id: "phantom".into(),
            rig: RigConfig::default(),
            synth: SynthConfig::default(),
            detect: DetectConfig::default(),
            fuse: FuseParams::default(),
            track: TrackConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub phantom: PhantomConfig,
    pub lesion_count: usize,
    pub placement: LesionPlacement,
    /// Pose change applied after lesion placement; lesions stay attached to
    /// the same surface points.
    pub pose: Option<BendParams>,
    pub captured_at: Option<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            lesion_count: 20,
            placement: LesionPlacement::default(),
            pose: None,
            captured_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DetectorSource {
    LogBaseline,
    /// Boxes produced by an external detector, in the detections file format.
    External { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub source: DetectorSource,
    /// Tile size and LoG scales are given for full-resolution images and are
    /// scaled by `image width / rig.width`.
    pub tile_size: u32,
    pub overlap: f64,
    pub soft_nms_sigma: f64,
    pub score_floor: f64,
    pub log: LogParams,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            source: DetectorSource::LogBaseline,
            tile_size: detect::DEFAULT_TILE_SIZE,
            overlap: detect::DEFAULT_OVERLAP,
            soft_nms_sigma: detect::DEFAULT_SOFT_NMS_SIGMA,
            score_floor: detect::DEFAULT_SCORE_FLOOR,
            log: LogParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CorrespondenceSource {
    /// Both meshes share topology; vertex i maps to vertex i.
    Identity,
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    /// Earlier session whose lesions are matched into the current one.
    pub previous_session: Option<PathBuf>,
    pub correspondence: CorrespondenceSource,
    pub max_geodesic: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            previous_session: None,
            correspondence: CorrespondenceSource::Identity,
            max_geodesic: track::DEFAULT_MAX_GEODESIC,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let cfg: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn partial_overrides() {
        let cfg: PipelineConfig = serde_json::from_str(
            r#"{"seed": 7, "rig": {"image_scale": 0.25}, "detect": {"source": {"kind": "external", "path": "d.json"}},
                "track": {"previous_session": "../s1", "correspondence": {"kind": "file", "path": "c.json"}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.rig.image_scale, 0.25);
        assert_eq!(cfg.rig.n_poles, 15);
        assert_eq!(cfg.detect.source, DetectorSource::External { path: "d.json".into() });
        assert_eq!(cfg.track.correspondence, CorrespondenceSource::File { path: "c.json".into() });
    }
}
