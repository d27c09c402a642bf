#![allow(dead_code)]

use std::path::{Path, PathBuf};

use skinmap_core::rigsim::{PhantomConfig, RigConfig};
use skinmap_service::manifest::Stage;
use skinmap_service::{run_pipeline, synthesize, PipelineConfig};

/// A coarse, low-resolution phantom session that runs in a few seconds.
pub fn small_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed,
        rig: RigConfig {
            image_scale: 0.15,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.synth.phantom = PhantomConfig {
        rings: 160,
        segments: 96,
        texture_size: 1024,
        ..Default::default()
    };
    cfg.synth.lesion_count = 4;
    cfg.synth.placement.diameter_mm = (11.0, 12.0);
    cfg.synth.captured_at = Some("2024-05-01T09:30:00Z".into());
    cfg
}

pub fn synth_session(root: &Path, name: &str, cfg: &PipelineConfig) -> PathBuf {
    let dir = root.join(name);
    synthesize(&dir, cfg).unwrap();
    dir
}

/// Synthesized and processed through fuse.
pub fn fused_session(root: &Path, name: &str, cfg: &PipelineConfig) -> PathBuf {
    let dir = synth_session(root, name, cfg);
    run_pipeline(&dir, &[Stage::Detect, Stage::Fuse], cfg).unwrap();
    dir
}
