//! Pinhole camera model shared by every 2D/3D mapping step.
//!
//! Conventions: right-handed world with +y up. The camera frame has +x to
//! the right, +y down and +z along the viewing direction. Pixel `(0, 0)` is
//! the *center* of the top-left pixel, and "depth" always means the
//! camera-frame z coordinate in meters. No lens distortion is modelled.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sensor width assumed when only a focal length is known (APS-C class body).
pub const DEFAULT_SENSOR_WIDTH_MM: f64 = 22.3;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Converts a physical focal length to pixel units and centers the
    /// principal point.
    pub fn from_rig(focal_mm: f64, sensor_width_mm: f64, width: u32, height: u32) -> Result<Self> {
        if !(focal_mm > 0.0) || !(sensor_width_mm > 0.0) || width == 0 || height == 0 {
            return Err(Error::param(format!(
                "intrinsics_from_rig needs positive inputs (focal {focal_mm} mm, sensor {sensor_width_mm} mm, {width}x{height} px)"
            )));
        }
        let f = focal_mm / sensor_width_mm * f64::from(width);
        Self::new(
            f,
            f,
            (f64::from(width) - 1.0) / 2.0,
            (f64::from(height) - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && self.cx >= 0.0
            && self.cx < f64::from(self.width)
            && self.cy >= 0.0
            && self.cy < f64::from(self.height);
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Intrinsics of the same camera after resampling the image by `factor`.
    ///
    /// Pixel edges (not centers) scale, so `c' = factor * (c + 0.5) - 0.5`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return Err(Error::param(format!("scale factor must be positive, got {factor}")));
        }
        let width = (f64::from(self.width) * factor).round().max(1.0) as u32;
        let height = (f64::from(self.height) * factor).round().max(1.0) as u32;
        Self::new(
            self.fx * factor,
            self.fy * factor,
            factor * (self.cx + 0.5) - 0.5,
            factor * (self.cy + 0.5) - 0.5,
            width,
            height,
        )
    }

    pub fn contains(&self, pixel: &Point2<f64>) -> bool {
        pixel.x >= -0.5
            && pixel.y >= -0.5
            && pixel.x < f64::from(self.width) - 0.5
            && pixel.y < f64::from(self.height) - 0.5
    }
}

/// A ray in world coordinates with a unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Point3<f64> {
        self.origin + self.direction * t
    }
}

/// Intrinsics plus rigid pose of one rig camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRecord {
    pub id: String,
    pub intrinsics: Intrinsics,
    /// Rotation block of `world_from_camera`; columns are the camera axes in world.
    rotation: Matrix3<f64>,
    /// Camera center in world coordinates.
    center: Point3<f64>,
    pub image_path: String,
}

impl CameraRecord {
    pub fn new(
        id: impl Into<String>,
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
        center: Point3<f64>,
        image_path: impl Into<String>,
    ) -> Result<Self> {
        intrinsics.validate()?;
        check_rotation(&rotation)?;
        Ok(Self {
            id: id.into(),
            intrinsics,
            rotation,
            center,
            image_path: image_path.into(),
        })
    }

    /// Builds a camera from a 4x4 `world_from_camera` rigid transform.
    pub fn from_matrix(
        id: impl Into<String>,
        intrinsics: Intrinsics,
        world_from_camera: &Matrix4<f64>,
        image_path: impl Into<String>,
    ) -> Result<Self> {
        let bottom = world_from_camera.fixed_view::<1, 4>(3, 0);
        if (bottom[(0, 0)].abs() + bottom[(0, 1)].abs() + bottom[(0, 2)].abs()) > ORTHONORMAL_TOL
            || (bottom[(0, 3)] - 1.0).abs() > ORTHONORMAL_TOL
        {
            return Err(Error::param("world_from_camera bottom row must be [0, 0, 0, 1]"));
        }
        let rotation: Matrix3<f64> = world_from_camera.fixed_view::<3, 3>(0, 0).into_owned();
        let t = world_from_camera.fixed_view::<3, 1>(0, 3);
        Self::new(
            id,
            intrinsics,
            rotation,
            Point3::new(t[0], t[1], t[2]),
            image_path,
        )
    }

    /// Camera at `eye` looking at `target`, with image rows running along
    /// world `-up` (portrait rig cameras use world +y as `up`).
    pub fn look_at(
        id: impl Into<String>,
        intrinsics: Intrinsics,
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
        image_path: impl Into<String>,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() == 0.0 {
            return Err(Error::param("look_at target coincides with eye"));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::param("look_at up vector is parallel to the view direction"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(id, intrinsics, rotation, eye, image_path)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn center(&self) -> Point3<f64> {
        self.center
    }

    /// Unit viewing direction (camera +z) in world coordinates.
    pub fn view_axis(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn world_from_camera(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.center.coords);
        m
    }

    /// Applies a rigid world transform to the camera pose.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Result<Self> {
        Self::new(
            self.id.clone(),
            self.intrinsics,
            rotation * self.rotation,
            Point3::from(rotation * self.center.coords + translation),
            self.image_path.clone(),
        )
    }

    pub fn to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(&(p - self.center))
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Point3<f64> {
        self.center + self.rotation * p
    }

    /// Projects a world point to `(pixel, depth)`. The pixel may fall outside
    /// the image; callers filter.
    pub fn project(&self, point: &Point3<f64>) -> Result<(Point2<f64>, f64)> {
        let pc = self.to_camera(point);
        if !(pc.z > 0.0) {
            return Err(Error::BehindCamera(pc.z));
        }
        let k = &self.intrinsics;
        Ok((
            Point2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy),
            pc.z,
        ))
    }

    /// Camera-frame point at `depth` along the pixel's line of sight.
    pub fn unproject_camera(&self, pixel: &Point2<f64>, depth: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        Vector3::new(
            (pixel.x - k.cx) / k.fx * depth,
            (pixel.y - k.cy) / k.fy * depth,
            depth,
        )
    }

    /// World point seen at `pixel` with camera-frame depth `depth`.
    pub fn unproject(&self, pixel: &Point2<f64>, depth: f64) -> Result<Point3<f64>> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(Error::param(format!("unproject needs a positive finite depth, got {depth}")));
        }
        Ok(self.to_world(&self.unproject_camera(pixel, depth)))
    }

    pub fn pixel_ray(&self, pixel: &Point2<f64>) -> Ray {
        let dir_cam = self.unproject_camera(pixel, 1.0).normalize();
        Ray {
            origin: self.center,
            direction: self.rotation * dir_cam,
        }
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if !(err <= ORTHONORMAL_TOL) {
        return Err(Error::param(format!(
            "camera rotation is not orthonormal (max |RᵀR - I| = {err:e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ORTHONORMAL_TOL * 10.0 {
        return Err(Error::param(format!("camera rotation has determinant {det}, expected +1")));
    }
    Ok(())
}

/// One entry of `cameras.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraFileEntry {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4x4.
    pub world_from_camera: Vec<f64>,
    pub image: String,
}

impl From<&CameraRecord> for CameraFileEntry {
    fn from(cam: &CameraRecord) -> Self {
        let m = cam.world_from_camera();
        let world_from_camera = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| m[(r, c)])
            .collect();
        let k = &cam.intrinsics;
        Self {
            id: cam.id.clone(),
            width: k.width,
            height: k.height,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            world_from_camera,
            image: cam.image_path.clone(),
        }
    }
}

impl TryFrom<CameraFileEntry> for CameraRecord {
    type Error = Error;

    fn try_from(e: CameraFileEntry) -> Result<Self> {
        if e.world_from_camera.len() != 16 {
            return Err(Error::param(format!(
                "camera {}: world_from_camera needs 16 numbers, got {}",
                e.id,
                e.world_from_camera.len()
            )));
        }
        let m = Matrix4::from_row_slice(&e.world_from_camera);
        let k = Intrinsics::new(e.fx, e.fy, e.cx, e.cy, e.width, e.height)?;
        CameraRecord::from_matrix(e.id, k, &m, e.image)
    }
}

pub fn cameras_to_json(cams: &[CameraRecord]) -> Result<String> {
    let entries: Vec<CameraFileEntry> = cams.iter().map(CameraFileEntry::from).collect();
    Ok(serde_json::to_string_pretty(&entries)?)
}

pub fn cameras_from_json(text: &str) -> Result<Vec<CameraRecord>> {
    let entries: Vec<CameraFileEntry> = serde_json::from_str(text)?;
    entries.into_iter().map(CameraRecord::try_from).collect()
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    cameras_from_json(&text).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_cameras(path: &Path, cams: &[CameraRecord]) -> Result<()> {
    crate::io::write_atomic(path, cameras_to_json(cams)?.as_bytes())
}
