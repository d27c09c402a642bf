//! Scoring a processed synthetic session against its ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use skinmap_core::detect::{evaluate, read_detections, EvalReport};
use skinmap_core::fuse3d::{read_registry, LesionRegistry};
use skinmap_core::io;
use skinmap_core::rigsim::{read_ground_truth, GroundTruthFile};
use skinmap_core::session::SessionLayout;
use skinmap_core::track::{longitudinal_accuracy, read_tracks, LesionMatch};

use crate::Result;

/// Global lesions farther than this from every ground-truth lesion count as spurious.
pub const ASSOCIATION_RADIUS_M: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionEval {
    /// Ground-truth lesions seen in at least `min_views` images.
    pub expected: usize,
    pub recovered: usize,
    pub spurious: usize,
    pub recall: f64,
    pub max_centroid_error_m: f64,
    /// Ground-truth lesion id → global id.
    pub assignment: BTreeMap<u32, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEval {
    pub detection: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionEval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub longitudinal_accuracy: Option<f64>,
}

/// One-to-one association of ground-truth lesions to global lesions by
/// increasing centroid distance, up to [`ASSOCIATION_RADIUS_M`].
pub fn associate(gt: &GroundTruthFile, registry: &LesionRegistry) -> BTreeMap<u32, (u32, f64)> {
    let mut candidates: Vec<(f64, u32, u32)> = Vec::new();
    for l in &gt.lesions {
        for g in &registry.lesions {
            let d = (g.centroid - l.surface_point).norm();
            if d <= ASSOCIATION_RADIUS_M {
                candidates.push((d, l.id, g.global_id));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = BTreeMap::new();
    let mut used = std::collections::BTreeSet::new();
    for (d, l, g) in candidates {
        if !out.contains_key(&l) && used.insert(g) {
            out.insert(l, (g, d));
        }
    }
    out
}

pub fn fusion_eval(gt: &GroundTruthFile, registry: &LesionRegistry, min_views: usize) -> FusionEval {
    let assoc = associate(gt, registry);
    let expected = gt.lesions.iter().filter(|l| l.visible_in.len() >= min_views).count();
    let recovered = assoc.len();
    FusionEval {
        expected,
        recovered,
        spurious: registry.lesions.len() - recovered,
        recall: if expected == 0 { 1.0 } else { recovered as f64 / expected as f64 },
        max_centroid_error_m: assoc.values().map(|a| a.1).fold(0.0, f64::max),
        assignment: assoc.into_iter().map(|(l, (g, _))| (l, g)).collect(),
    }
}

/// Ground-truth pairs between two sessions of the same lesion set: lesions
/// recovered in both sessions, paired by their shared synthetic id.
pub fn ground_truth_pairs(a: &FusionEval, b: &FusionEval) -> Vec<LesionMatch> {
    a.assignment
        .iter()
        .filter_map(|(l, &ga)| {
            b.assignment.get(l).map(|&gb| LesionMatch {
                lesion_t: ga,
                lesion_t1: Some(gb),
                geodesic_residual: None,
                matched: true,
            })
        })
        .collect()
}

/// Scores detections, fused lesions and (when present) tracks of a session.
/// The result is also written to `eval.json` in the session.
pub fn evaluate_session(session: &Path, min_views: usize) -> Result<SessionEval> {
    let layout = SessionLayout::new(session);
    let gt_dets = read_detections(&layout.gt_detections())?;
    let dets = read_detections(&layout.detections())?;
    let detection = evaluate(&dets, &gt_dets, 0.5, 0.0)?;
    let gt = read_ground_truth(&layout.gt_lesions())?;
    let fusion = if layout.lesions().exists() {
        Some(fusion_eval(&gt, &read_registry(&layout.lesions())?, min_views))
    } else {
        None
    };
    let mut longitudinal = None;
    if let (Some(f_b), true) = (&fusion, layout.tracks().exists()) {
        let tracks = read_tracks(&layout.tracks())?;
        if let Some(prev_id) = &tracks.session_t {
            let prev = SessionLayout::new(session.parent().unwrap_or(Path::new(".")).join(prev_id));
            if prev.gt_lesions().exists() && prev.lesions().exists() {
                let f_a = fusion_eval(&read_ground_truth(&prev.gt_lesions())?, &read_registry(&prev.lesions())?, min_views);
                let truth = ground_truth_pairs(&f_a, f_b);
                longitudinal = Some(longitudinal_accuracy(&tracks.pairs, &truth)?);
            }
        }
    }
    let out = SessionEval {
        detection,
        fusion,
        longitudinal_accuracy: longitudinal,
    };
    io::write_json(&layout.root.join("eval.json"), &out)?;
    Ok(out)
}
