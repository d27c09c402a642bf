//! Canonical alignment: stand center to the origin, ground normal to +y,
//! physical scale from the stand's known diameter, then cropping to the
//! capture region.

use nalgebra::{Matrix3, Matrix4, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use super::fit::FitSummary;
use super::{Circle3D, CircleFit, Plane, PlaneFit, TriMesh};
use crate::error::{Error, Result};
use crate::render::CaptureCylinder;

/// Tolerance below the ground plane before a vertex counts as platform.
const GROUND_SLACK: f64 = 1e-9;

/// `p ↦ scale · R · (p − center)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalTransform {
    pub rotation: Matrix3<f64>,
    pub center: Point3<f64>,
    pub scale: f64,
}

impl CanonicalTransform {
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * (p - self.center) * self.scale)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn apply_plane(&self, plane: &Plane) -> Plane {
        let normal = self.apply_vector(&plane.normal);
        let p = self.apply(&plane.anchor());
        Plane {
            normal,
            offset: normal.dot(&p.coords),
        }
    }

    pub fn apply_circle(&self, circle: &Circle3D) -> Circle3D {
        Circle3D {
            center: self.apply(&circle.center),
            radius: circle.radius * self.scale,
            plane: self.apply_plane(&circle.plane),
        }
    }

    /// Homogeneous 4x4 matrix (similarity transform).
    pub fn matrix(&self) -> Matrix4<f64> {
        let sr = self.rotation * self.scale;
        let t = -(sr * self.center.coords);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&sr);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }
}

/// JSON sidecar written next to a canonicalized mesh.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CanonicalizationSidecar {
    /// Row-major 4x4 similarity transform from input to canonical frame.
    pub transform: Vec<f64>,
    pub scale_factor: f64,
    pub stand_diameter_m: f64,
    pub ground_fit: Option<FitSummary>,
    pub stand_fit: Option<FitSummary>,
    pub vertices_in: usize,
    pub vertices_out: usize,
}

impl CanonicalizationSidecar {
    pub fn new(
        transform: &CanonicalTransform,
        stand_diameter_m: f64,
        ground_fit: Option<&PlaneFit>,
        stand_fit: Option<&CircleFit>,
        vertices_in: usize,
        vertices_out: usize,
    ) -> Self {
        let m = transform.matrix();
        Self {
            transform: (0..16).map(|i| m[(i / 4, i % 4)]).collect(),
            scale_factor: transform.scale,
            stand_diameter_m,
            ground_fit: ground_fit.map(FitSummary::from),
            stand_fit: stand_fit.map(FitSummary::from),
            vertices_in,
            vertices_out,
        }
    }
}

fn rotation_to_up(normal: &Vector3<f64>) -> Matrix3<f64> {
    let up = Vector3::y();
    match Rotation3::rotation_between(normal, &up) {
        Some(r) => r.into_inner(),
        // antiparallel: half turn about x
        None => Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI).into_inner(),
    }
}

/// Canonicalizes with the default capture cylinder.
pub fn canonicalize(
    mesh: &TriMesh,
    ground: &Plane,
    stand: &Circle3D,
    stand_diameter_m: f64,
) -> Result<(TriMesh, CanonicalTransform)> {
    canonicalize_with(mesh, ground, stand, stand_diameter_m, &CaptureCylinder::default())
}

pub fn canonicalize_with(
    mesh: &TriMesh,
    ground: &Plane,
    stand: &Circle3D,
    stand_diameter_m: f64,
    cylinder: &CaptureCylinder,
) -> Result<(TriMesh, CanonicalTransform)> {
    if !(stand.radius > 0.0) {
        return Err(Error::param(format!("stand radius must be positive, got {}", stand.radius)));
    }
    if !(stand_diameter_m > 0.0) {
        return Err(Error::param(format!(
            "stand diameter must be positive, got {stand_diameter_m}"
        )));
    }
    let transform = CanonicalTransform {
        rotation: rotation_to_up(&ground.normal),
        // keep the origin exactly on the ground plane
        center: ground.project(&stand.center),
        scale: stand_diameter_m / (2.0 * stand.radius),
    };
    let moved = mesh.map_vertices(|p| transform.apply(p));
    let (cropped, _) = moved.retain_vertices(|p| p.y >= -GROUND_SLACK && cylinder.contains(p));
    Ok((cropped, transform))
}
