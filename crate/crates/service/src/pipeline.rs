//! Stage orchestration: preprocess (depth and masks) → detect → fuse → track.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde_json::json;
use skinmap_core::camgeom::{read_cameras, CameraRecord};
use skinmap_core::detect::{self, read_detections, write_detections, Detection2D, DetectionSet, DetectionSource};
use skinmap_core::fuse3d::{self, read_registry, write_registry, ViewData};
use skinmap_core::io;
use skinmap_core::meshops::obj::read_obj;
use skinmap_core::rigsim::{self, bend, phantom_mesh, random_lesions, SyntheticLesionSpec};
use skinmap_core::session::SessionLayout;
use skinmap_core::track::{self, match_lesions, read_correspondence, CorrespondenceMap, TracksFile};
use skinmap_core::render;

use crate::config::{CorrespondenceSource, DetectorSource, PipelineConfig};
use crate::lock::SessionLock;
use crate::manifest::{hash_file, SessionManifest, Stage, StageFlags, StageRecord};
use crate::{Result, ServiceError};

const TOOL: &str = env!("CARGO_PKG_NAME");
const VERSION: &str = env!("CARGO_PKG_VERSION");

fn record(layout: &SessionLayout, tool: &str, parameters: serde_json::Value, outputs: &[std::path::PathBuf]) -> Result<StageRecord> {
    let outputs = outputs
        .iter()
        .map(|p| Ok((layout.relative(p), hash_file(p)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(StageRecord {
        tool: tool.to_string(),
        version: VERSION.to_string(),
        parameters,
        outputs,
    })
}

/// Renders a synthetic phantom session with ground truth into `dir`. The
/// session starts with depth and masks in place, so `rendered` is set.
pub fn synthesize(dir: &Path, cfg: &PipelineConfig) -> Result<SessionManifest> {
    let lock = SessionLock::for_session(dir);
    let _guard = lock.lock();
    let rest = phantom_mesh(&cfg.synth.phantom);
    let placed = random_lesions(&rest, cfg.synth.lesion_count, &cfg.synth.placement, cfg.seed)?;
    let mesh = match &cfg.synth.pose {
        Some(p) => bend(&rest, p),
        None => rest,
    };
    let lesions: Vec<SyntheticLesionSpec> = placed
        .iter()
        .map(|(anchor, spec)| SyntheticLesionSpec {
            surface_point: anchor.point(&mesh),
            ..spec.clone()
        })
        .collect();
    rigsim::synthesize_session(&mesh, &cfg.rig, &lesions, cfg.seed, dir)?;

    let layout = SessionLayout::new(dir);
    let captured_at = cfg
        .synth
        .captured_at
        .clone()
        .unwrap_or_else(|| chrono::Utc::now().to_rfc3339());
    let mut manifest = SessionManifest::discover(&layout, &cfg.subject_id, &captured_at)?;
    manifest.stages = StageFlags {
        rendered: true,
        ..Default::default()
    };
    let params = json!({ "seed": cfg.seed, "rig": cfg.rig, "synth": cfg.synth });
    let outputs = manifest.artifacts(&layout, Stage::Preprocess);
    manifest
        .runs
        .insert(Stage::Preprocess, record(&layout, "rigsim", params, &outputs)?);
    manifest.save(&layout)?;
    Ok(manifest)
}

/// Runs the requested stages in pipeline order. A stage whose prerequisite
/// is neither complete nor requested fails before anything is written.
/// Running a stage clears every downstream stage and removes its artifacts.
pub fn run_pipeline(session: &Path, stages: &[Stage], cfg: &PipelineConfig) -> Result<SessionManifest> {
    let lock = SessionLock::for_session(session);
    let _guard = lock.lock();
    let layout = SessionLayout::new(session);
    let mut manifest = SessionManifest::load_or_discover(&layout, &cfg.subject_id)?;
    let mut requested: Vec<Stage> = stages.to_vec();
    requested.sort();
    requested.dedup();
    for &stage in &requested {
        if let Some(pre) = stage.prerequisite() {
            if !manifest.is_current(pre) && !requested.contains(&pre) {
                return Err(ServiceError::MissingPrerequisite { stage, missing: pre });
            }
        }
    }
    for stage in requested {
        invalidate_downstream(&layout, &mut manifest, stage)?;
        let rec = match stage {
            Stage::Preprocess => preprocess(&layout, &manifest, cfg)?,
            Stage::Detect => detect_stage(&layout, cfg)?,
            Stage::Fuse => fuse_stage(&layout, cfg)?,
            Stage::Track => track_stage(&layout, cfg)?,
        };
        manifest.stages.set(stage, true);
        manifest.stale.remove(&stage);
        manifest.runs.insert(stage, rec);
        manifest.save(&layout)?;
    }
    Ok(manifest)
}

fn invalidate_downstream(layout: &SessionLayout, manifest: &mut SessionManifest, stage: Stage) -> Result<()> {
    for down in stage.downstream() {
        for p in manifest.artifacts(layout, down) {
            match std::fs::remove_file(&p) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(skinmap_core::Error::Io { path: p, source: e }.into()),
            }
        }
        manifest.stages.set(down, false);
        manifest.stale.remove(&down);
        manifest.runs.remove(&down);
    }
    manifest.save(layout)
}

fn preprocess(layout: &SessionLayout, manifest: &SessionManifest, cfg: &PipelineConfig) -> Result<StageRecord> {
    cfg.rig.capture.validate()?;
    let mesh = read_obj(&layout.mesh())?;
    let cams = read_cameras(&layout.cameras())?;
    for d in [layout.depth_dir(), layout.masks_dir()] {
        std::fs::create_dir_all(&d).map_err(|e| skinmap_core::Error::Io { path: d.clone(), source: e })?;
    }
    cams.par_iter()
        .map(|cam| -> Result<()> {
            let (_, depth) = render::rasterize(&mesh, cam);
            let mask = render::subject_mask(&depth, cam, &cfg.rig.capture);
            io::write_pfm(&layout.depth(&cam.id), &depth)?;
            io::write_png(&layout.mask(&cam.id), &io::mask_to_png(&mask))?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    let outputs = manifest.artifacts(layout, Stage::Preprocess);
    record(layout, TOOL, json!({ "capture": cfg.rig.capture }), &outputs)
}

fn detect_camera(layout: &SessionLayout, cam: &CameraRecord, cfg: &PipelineConfig) -> Result<Vec<Detection2D>> {
    let img = image::open(layout.root.join(&cam.image_path))
        .map_err(skinmap_core::Error::from)?
        .to_rgb8();
    let mask = io::read_mask(&layout.mask(&cam.id))?;
    let scale = f64::from(img.width()) / f64::from(cfg.rig.width);
    let tile_size = ((f64::from(cfg.detect.tile_size) * scale).round() as u32).max(1);
    let grid = detect::tile(img.width(), img.height(), tile_size, cfg.detect.overlap)?;
    Ok(detect::detect_tiled(
        &cam.id,
        &detect::luma(&img),
        Some(&mask),
        &cfg.detect.log.scaled(scale),
        &grid,
        cfg.detect.soft_nms_sigma,
        cfg.detect.score_floor,
    )?)
}

/// Checks externally produced boxes against the session's cameras.
fn ingest_external(path: &Path, cams: &[CameraRecord]) -> Result<DetectionSet> {
    let mut set = read_detections(path)?;
    let by_id: HashMap<&str, &CameraRecord> = cams.iter().map(|c| (c.id.as_str(), c)).collect();
    for (image_id, dets) in set.iter_mut() {
        let cam = by_id
            .get(image_id.as_str())
            .ok_or_else(|| ServiceError::Config(format!("detections reference unknown image `{image_id}`")))?;
        let mut seen = std::collections::BTreeSet::new();
        for d in dets.iter_mut() {
            if !seen.insert(d.det_id) {
                return Err(ServiceError::Config(format!("duplicate det_id {} in image {image_id}", d.det_id)));
            }
            if !(0.0..=1.0).contains(&d.score) || !(d.bbox.w > 0.0 && d.bbox.h > 0.0) {
                return Err(ServiceError::Config(format!("invalid detection {} in image {image_id}", d.det_id)));
            }
            d.bbox = d.bbox.clamped(cam.intrinsics.width, cam.intrinsics.height);
            d.source = DetectionSource::External;
        }
    }
    for cam in cams {
        set.entry(cam.id.clone()).or_default();
    }
    Ok(set)
}

fn detect_stage(layout: &SessionLayout, cfg: &PipelineConfig) -> Result<StageRecord> {
    let cams = read_cameras(&layout.cameras())?;
    let set: DetectionSet = match &cfg.detect.source {
        DetectorSource::LogBaseline => {
            cfg.detect.log.validate()?;
            cams.par_iter()
                .map(|cam| Ok((cam.id.clone(), detect_camera(layout, cam, cfg)?)))
                .collect::<Result<_>>()?
        }
        DetectorSource::External { path } => ingest_external(path, &cams)?,
    };
    write_detections(&layout.detections(), &set)?;
    record(layout, TOOL, json!({ "detect": cfg.detect }), &[layout.detections()])
}

fn fuse_stage(layout: &SessionLayout, cfg: &PipelineConfig) -> Result<StageRecord> {
    let cams = read_cameras(&layout.cameras())?;
    let mesh = read_obj(&layout.mesh())?;
    let dets = read_detections(&layout.detections())?;
    let views = cams
        .into_iter()
        .map(|cam| {
            let depth = io::read_pfm(&layout.depth(&cam.id))?;
            let mask = io::read_mask(&layout.mask(&cam.id))?;
            Ok((cam.id.clone(), ViewData { camera: cam, depth, mask }))
        })
        .collect::<Result<HashMap<_, _>>>()?;
    let registry = fuse3d::fuse(&dets, &views, &mesh, &cfg.fuse)?;
    write_registry(&layout.lesions(), &registry)?;
    record(layout, TOOL, json!({ "fuse": cfg.fuse }), &[layout.lesions()])
}

fn track_stage(layout: &SessionLayout, cfg: &PipelineConfig) -> Result<StageRecord> {
    let prev = cfg
        .track
        .previous_session
        .as_ref()
        .ok_or_else(|| ServiceError::Config("tracking needs track.previous_session".into()))?;
    let prev = SessionLayout::new(prev);
    let prev_manifest = SessionManifest::load_or_discover(&prev, &cfg.subject_id)?;
    if !prev_manifest.is_current(Stage::Fuse) {
        return Err(ServiceError::Config(format!(
            "previous session {} has no current fuse results",
            prev.root.display()
        )));
    }
    let lesions_t = read_registry(&prev.lesions())?;
    let lesions_t1 = read_registry(&layout.lesions())?;
    let mesh_t = read_obj(&prev.mesh())?;
    let mesh_t1 = read_obj(&layout.mesh())?;
    let corr = match &cfg.track.correspondence {
        CorrespondenceSource::Identity => {
            if mesh_t.vertices.len() != mesh_t1.vertices.len() {
                return Err(ServiceError::Config(
                    "identity correspondence needs meshes with equal vertex counts".into(),
                ));
            }
            CorrespondenceMap::identity(prev.id(), layout.id(), mesh_t.vertices.len())
        }
        CorrespondenceSource::File { path } => read_correspondence(path)?,
    };
    corr.validate(mesh_t.vertices.len(), mesh_t1.vertices.len())?;
    let pairs = match_lesions(&lesions_t, &lesions_t1, &corr, &mesh_t1, cfg.track.max_geodesic)?;
    let tracks = TracksFile {
        pairs,
        accuracy: None,
        session_t: Some(prev.id()),
        session_t1: Some(layout.id()),
        max_geodesic: cfg.track.max_geodesic,
    };
    track::write_tracks(&layout.tracks(), &tracks)?;
    record(
        layout,
        TOOL,
        json!({ "track": cfg.track, "previous_session_id": prev.id() }),
        &[layout.tracks()],
    )
}
