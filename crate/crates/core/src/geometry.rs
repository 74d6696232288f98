//! World/camera/pixel coordinate handling and 2D box arithmetic.
//!
//! World frame: right-handed, `z` up, meters. Camera frame: `x` along the
//! optical axis, `y` toward the camera's left, `z` toward the camera's up, so
//! a camera with zero azimuth and elevation shares the world axes. Pixel `u`
//! grows with `y`, pixel `v` grows with `z`, unit pixel pitch (the focal
//! length is expressed in pixels) and the principal point at the image
//! center. Images are therefore indexed from their lower-right corner as seen
//! by the camera.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is not in front of the camera (depth {depth:.6} m)")]
    NotInFrontOfCamera { depth: f64 },
    #[error("invalid camera rig: {0}")]
    InvalidRig(String),
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n == 0.0 {
            self
        } else {
            self * (1.0 / n)
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }
}

/// Position and yaw of an object in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldPose {
    pub position: Vec3,
    /// Yaw in radians, counter-clockwise from +x, wrapped to `[-pi, pi)`.
    pub heading: f64,
}

impl WorldPose {
    pub fn new(position: Vec3, heading: f64) -> Self {
        Self {
            position,
            heading: wrap_angle(heading),
        }
    }

    pub fn direction(&self) -> Vec3 {
        Vec3::new(self.heading.cos(), self.heading.sin(), 0.0)
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Pinhole camera with extrinsics in the world frame.
///
/// `azimuth` follows the yaw convention of the deployment table: the
/// horizontal viewing direction is `(cos a, -sin a, 0)`, i.e. yaw grows
/// clockwise seen from above. `elevation` is the pitch, negative when the
/// camera looks down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub position: Vec3,
    pub azimuth: f64,
    pub elevation: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub fov: f64,
    pub focal: f64,
    pub principal_point: (f64, f64),
}

impl CameraRig {
    /// Builds a rig; the focal length follows from the horizontal field of view.
    pub fn new(
        position: Vec3,
        azimuth: f64,
        elevation: f64,
        image_width: u32,
        image_height: u32,
        fov: f64,
    ) -> Result<Self, GeometryError> {
        if !(position.is_finite() && azimuth.is_finite() && elevation.is_finite()) {
            return Err(GeometryError::InvalidRig("non-finite pose".into()));
        }
        if image_width == 0 || image_height == 0 {
            return Err(GeometryError::InvalidRig("empty image".into()));
        }
        if !(fov > 0.0 && fov < std::f64::consts::PI) {
            return Err(GeometryError::InvalidRig(format!(
                "fov {fov} outside (0, pi)"
            )));
        }
        let focal = (image_width as f64 / 2.0) / (fov / 2.0).tan();
        Ok(Self {
            position,
            azimuth,
            elevation,
            image_width,
            image_height,
            fov,
            focal,
            principal_point: (image_width as f64 / 2.0, image_height as f64 / 2.0),
        })
    }

    /// Yaw rotation: world axes onto (horizontal forward, left, up).
    pub fn azimuth_rotation(&self) -> Mat3 {
        let (s, c) = self.azimuth.sin_cos();
        Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Pitch rotation about the intermediate left axis.
    pub fn elevation_rotation(&self) -> Mat3 {
        let (s, c) = self.elevation.sin_cos();
        Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    /// World-to-camera rotation, azimuth applied first.
    pub fn rotation(&self) -> Mat3 {
        self.elevation_rotation().mul_mat(&self.azimuth_rotation())
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vec3 {
        let r = self.rotation().0;
        Vec3::new(r[0][0], r[0][1], r[0][2])
    }

    /// Camera-left direction in world coordinates (always horizontal).
    pub fn left(&self) -> Vec3 {
        let r = self.rotation().0;
        Vec3::new(r[1][0], r[1][1], r[1][2])
    }

    pub fn in_image(&self, pixel: (f64, f64)) -> bool {
        pixel.0 >= 0.0
            && pixel.1 >= 0.0
            && pixel.0 < self.image_width as f64
            && pixel.1 < self.image_height as f64
    }

    pub fn image_bounds(&self) -> BoundingBox {
        BoundingBox {
            center: self.principal_point,
            width: self.image_width as f64,
            height: self.image_height as f64,
        }
    }
}

/// Rigid world-to-camera transform `R (p - c)`.
pub fn world_to_camera(point: Vec3, rig: &CameraRig) -> Vec3 {
    rig.rotation().mul_vec(point - rig.position)
}

pub fn camera_to_world(point_cam: Vec3, rig: &CameraRig) -> Vec3 {
    rig.rotation().transpose().mul_vec(point_cam) + rig.position
}

/// Pinhole projection of a camera-frame point to pixel coordinates.
pub fn camera_to_pixel(point_cam: Vec3, rig: &CameraRig) -> Result<(f64, f64), GeometryError> {
    if !(point_cam.x > 0.0) {
        return Err(GeometryError::NotInFrontOfCamera { depth: point_cam.x });
    }
    let (u0, v0) = rig.principal_point;
    Ok((
        u0 + rig.focal * point_cam.y / point_cam.x,
        v0 + rig.focal * point_cam.z / point_cam.x,
    ))
}

/// Back-projects a pixel at a known depth (distance along the optical axis).
pub fn pixel_to_camera(pixel: (f64, f64), depth: f64, rig: &CameraRig) -> Vec3 {
    let (u0, v0) = rig.principal_point;
    Vec3::new(
        depth,
        (pixel.0 - u0) * depth / rig.focal,
        (pixel.1 - v0) * depth / rig.focal,
    )
}

pub fn project(point: Vec3, rig: &CameraRig) -> Result<(f64, f64), GeometryError> {
    camera_to_pixel(world_to_camera(point, rig), rig)
}

/// Small-hole range estimate `h * f / q` from an object's physical and pixel heights.
pub fn estimate_distance_from_height(
    bbox: &BoundingBox,
    physical_height: f64,
    rig: &CameraRig,
) -> f64 {
    physical_height * rig.focal / bbox.height
}

/// Axis-aligned pixel box given by center and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center: (f64, f64),
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn new(center: (f64, f64), width: f64, height: f64) -> Result<Self, GeometryError> {
        if !(width > 0.0 && height > 0.0) {
            return Err(GeometryError::InvalidBox(format!("size {width}x{height}")));
        }
        Ok(Self {
            center,
            width,
            height,
        })
    }

    pub fn from_corners(min: (f64, f64), max: (f64, f64)) -> Result<Self, GeometryError> {
        Self::new(
            ((min.0 + max.0) / 2.0, (min.1 + max.1) / 2.0),
            max.0 - min.0,
            max.1 - min.1,
        )
    }

    pub fn min(&self) -> (f64, f64) {
        (
            self.center.0 - self.width / 2.0,
            self.center.1 - self.height / 2.0,
        )
    }

    pub fn max(&self) -> (f64, f64) {
        (
            self.center.0 + self.width / 2.0,
            self.center.1 + self.height / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let (a0, a1) = (self.min(), self.max());
        let (b0, b1) = (other.min(), other.max());
        let w = a1.0.min(b1.0) - a0.0.max(b0.0);
        let h = a1.1.min(b1.1) - a0.1.max(b0.1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection with `bounds`, or `None` when nothing is left.
    pub fn clipped_to(&self, bounds: &BoundingBox) -> Option<BoundingBox> {
        let (a0, a1) = (self.min(), self.max());
        let (b0, b1) = (bounds.min(), bounds.max());
        let lo = (a0.0.max(b0.0), a0.1.max(b0.1));
        let hi = (a1.0.min(b1.0), a1.1.min(b1.1));
        BoundingBox::from_corners(lo, hi).ok()
    }

    pub fn translated(&self, du: f64, dv: f64) -> BoundingBox {
        BoundingBox {
            center: (self.center.0 + du, self.center.1 + dv),
            ..*self
        }
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Axis-aligned 3D box, used for vehicle bodies and building blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self {
            min: Vec3::new(min.x.min(max.x), min.y.min(max.y), min.z.min(max.z)),
            max: Vec3::new(min.x.max(max.x), min.y.max(max.y), min.z.max(max.z)),
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (a, b) = (self.min, self.max);
        [
            Vec3::new(a.x, a.y, a.z),
            Vec3::new(b.x, a.y, a.z),
            Vec3::new(a.x, b.y, a.z),
            Vec3::new(b.x, b.y, a.z),
            Vec3::new(a.x, a.y, b.z),
            Vec3::new(b.x, a.y, b.z),
            Vec3::new(a.x, b.y, b.z),
            Vec3::new(b.x, b.y, b.z),
        ]
    }

    /// Slab test: parameter interval `[t0, t1]` of `a + t (b - a)`, `t` in
    /// `[0, 1]`, that lies inside the box.
    pub fn segment_overlap(&self, a: Vec3, b: Vec3) -> Option<(f64, f64)> {
        let d = b - a;
        let mut t0 = 0.0f64;
        let mut t1 = 1.0f64;
        for (o, dir, lo, hi) in [
            (a.x, d.x, self.min.x, self.max.x),
            (a.y, d.y, self.min.y, self.max.y),
            (a.z, d.z, self.min.z, self.max.z),
        ] {
            if dir.abs() < 1e-15 {
                if o < lo || o > hi {
                    return None;
                }
            } else {
                let (mut ta, mut tb) = ((lo - o) / dir, (hi - o) / dir);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some((t0, t1))
    }

    /// True when the open segment crosses the box interior by more than `eps`
    /// of its parameter range; grazing contacts at the end points are ignored.
    pub fn blocks_segment(&self, a: Vec3, b: Vec3, eps: f64) -> bool {
        match self.segment_overlap(a, b) {
            Some((t0, t1)) => t1 - t0 > eps && t1 > eps && t0 < 1.0 - eps,
            None => false,
        }
    }
}

/// Physical state fed back by a vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bsm {
    pub user_id: u32,
    pub position: Vec3,
    pub width: f64,
    pub height: f64,
}
