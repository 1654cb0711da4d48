//! Oriented boxes, rigid frames and pinhole projection.
//!
//! Boxes carry yaw only: roll and pitch are not representable, so any frame
//! change that would tilt a box's vertical axis is rejected with
//! [`GeomError::GimbalRisk`] instead of being silently flattened.

use core::f64::consts::PI;

use libm::{atan2, cos, sin, sqrt};
use nalgebra::{Matrix3, Matrix4, Point3, Quaternion, Rotation3, UnitQuaternion, Vector3};

/// Tolerance on `|q| - 1` accepted by [`Pose::new`].
pub const UNIT_QUATERNION_TOLERANCE: f64 = 1e-9;

/// Largest tilt of a box's vertical axis (radians) that [`transform_box`] accepts.
pub const MAX_TILT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeomError {
    #[error("box field `{field}` is invalid: {value}")]
    InvalidBox { field: &'static str, value: f64 },
    #[error("quaternion norm {norm} is not 1 within {UNIT_QUATERNION_TOLERANCE}")]
    NonUnitQuaternion { norm: f64 },
    #[error("pose translation is not finite")]
    NonFiniteTranslation,
    #[error("camera intrinsics field `{field}` is invalid")]
    InvalidIntrinsics { field: &'static str },
    #[error("pose tilts the box vertical axis by {tilt} rad; yaw-only boxes cannot represent it")]
    GimbalRisk { tilt: f64 },
}

/// Wraps an angle into `(-pi, pi]`. Angles already in range are returned unchanged.
pub fn normalize_yaw(yaw: f64) -> f64 {
    if yaw > -PI && yaw <= PI {
        return yaw;
    }
    let two_pi = 2.0 * PI;
    let mut r = yaw - two_pi * libm::floor((yaw + PI) / two_pi);
    if r <= -PI {
        r += two_pi;
    }
    if r > PI {
        r -= two_pi;
    }
    r
}

/// Oriented 3D box: center `(x, y, z)`, size `(l, w, h)` and heading `yaw`
/// about the vertical axis. `l` runs along the heading direction.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "Box7Repr", into = "Box7Repr"))]
pub struct Box7 {
    x: f64,
    y: f64,
    z: f64,
    l: f64,
    w: f64,
    h: f64,
    yaw: f64,
}

impl Box7 {
    pub const FIELDS: [&'static str; 7] = ["x", "y", "z", "l", "w", "h", "yaw"];

    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self, GeomError> {
        Self::from_array([center[0], center[1], center[2], size[0], size[1], size[2], yaw])
    }

    /// Builds a box from `[x, y, z, l, w, h, yaw]`, normalizing yaw.
    pub fn from_array(p: [f64; 7]) -> Result<Self, GeomError> {
        for (i, v) in p.iter().enumerate() {
            if !v.is_finite() {
                return Err(GeomError::InvalidBox { field: Self::FIELDS[i], value: *v });
            }
        }
        for (i, v) in p.iter().enumerate().take(6).skip(3) {
            if *v <= 0.0 {
                return Err(GeomError::InvalidBox { field: Self::FIELDS[i], value: *v });
            }
        }
        Ok(Self { x: p[0], y: p[1], z: p[2], l: p[3], w: p[4], h: p[5], yaw: normalize_yaw(p[6]) })
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.l, self.w, self.h, self.yaw]
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::new(self.x, self.y, self.z)
    }

    pub fn size(&self) -> [f64; 3] {
        [self.l, self.w, self.h]
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn bottom(&self) -> f64 {
        self.z - 0.5 * self.h
    }

    pub fn top(&self) -> f64 {
        self.z + 0.5 * self.h
    }

    /// Bird's-eye footprint corners, counter-clockwise, matching the bottom
    /// face order of [`Box7::corners`].
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = (sin(self.yaw), cos(self.yaw));
        let (hl, hw) = (0.5 * self.l, 0.5 * self.w);
        let local = [[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]];
        local.map(|[a, b]| [self.x + c * a - s * b, self.y + s * a + c * b])
    }

    /// The eight corners in canonical order.
    ///
    /// Indices 0..4 are the bottom face, counter-clockwise seen from above,
    /// starting at the front-right corner `(+l/2, -w/2)` in the box frame.
    /// Indices 4..8 are the top face in the same order, so corner `i + 4`
    /// sits directly above corner `i`.
    pub fn corners(&self) -> CornerSet {
        let fp = self.footprint();
        let (bot, top) = (self.bottom(), self.top());
        let mut out = [Point3::origin(); 8];
        for (i, [x, y]) in fp.into_iter().enumerate() {
            out[i] = Point3::new(x, y, bot);
            out[i + 4] = Point3::new(x, y, top);
        }
        CornerSet(out)
    }

    /// True when `p` lies inside or on the boundary of the box.
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        let (s, c) = (sin(self.yaw), cos(self.yaw));
        let (dx, dy, dz) = (p.x - self.x, p.y - self.y, p.z - self.z);
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= 0.5 * self.l && ly.abs() <= 0.5 * self.w && dz.abs() <= 0.5 * self.h
    }
}

#[cfg(feature = "serde")]
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct Box7Repr {
    x: f64,
    y: f64,
    z: f64,
    l: f64,
    w: f64,
    h: f64,
    yaw: f64,
}

#[cfg(feature = "serde")]
impl TryFrom<Box7Repr> for Box7 {
    type Error = GeomError;
    fn try_from(r: Box7Repr) -> Result<Self, GeomError> {
        Box7::from_array([r.x, r.y, r.z, r.l, r.w, r.h, r.yaw])
    }
}

#[cfg(feature = "serde")]
impl From<Box7> for Box7Repr {
    fn from(b: Box7) -> Self {
        Box7Repr { x: b.x, y: b.y, z: b.z, l: b.l, w: b.w, h: b.h, yaw: b.yaw }
    }
}

/// Eight box corners in the order documented on [`Box7::corners`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSet(pub [Point3<f64>; 8]);

impl CornerSet {
    pub fn points(&self) -> &[Point3<f64>; 8] {
        &self.0
    }

    pub fn centroid(&self) -> Point3<f64> {
        let sum = self.0.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Point3::from(sum / 8.0)
    }

    pub fn transformed(&self, pose: &Pose) -> CornerSet {
        CornerSet(self.0.map(|p| pose.transform_point(&p)))
    }

    pub fn max_distance(&self, other: &CornerSet) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }
}

/// Rigid transform `p -> R p + t` with `R` stored as a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    translation: Vector3<f64>,
    rotation: UnitQuaternion<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { translation: Vector3::zeros(), rotation: UnitQuaternion::identity() }
    }

    /// `rotation` is `[w, x, y, z]`. Quaternions already unit to machine
    /// precision keep their exact bits; others within
    /// [`UNIT_QUATERNION_TOLERANCE`] are renormalized.
    pub fn new(translation: [f64; 3], rotation: [f64; 4]) -> Result<Self, GeomError> {
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFiniteTranslation);
        }
        let q = Quaternion::new(rotation[0], rotation[1], rotation[2], rotation[3]);
        let norm = sqrt(q.norm_squared());
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_QUATERNION_TOLERANCE {
            return Err(GeomError::NonUnitQuaternion { norm });
        }
        Ok(Self { translation: Vector3::from(translation), rotation: unit(q) })
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self { translation: Vector3::from(t), rotation: UnitQuaternion::identity() }
    }

    /// Rotation by `yaw` about +z followed by translation `t`.
    pub fn from_yaw(t: [f64; 3], yaw: f64) -> Self {
        let half = 0.5 * yaw;
        let q = Quaternion::new(cos(half), 0.0, 0.0, sin(half));
        Self { translation: Vector3::from(t), rotation: unit(q) }
    }

    /// Builds a pose from a rotation matrix whose columns are orthonormal.
    pub fn from_rotation_matrix(t: [f64; 3], r: &Matrix3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*r);
        Self { translation: Vector3::from(t), rotation: unit(*UnitQuaternion::from_rotation_matrix(&rot).quaternion()) }
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    /// Rotation as `[w, x, y, z]`.
    pub fn rotation_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let q = self.rotation.quaternion() * other.rotation.quaternion();
        Pose {
            translation: self.translation + self.rotation * other.translation,
            rotation: UnitQuaternion::new_normalize(q),
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose { translation: -(inv * self.translation), rotation: inv }
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn rotate_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Homogeneous 4x4 matrix `[R t; 0 1]`.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        self.rotation.to_homogeneous().append_translation(&self.translation)
    }

    /// Heading of the rotated +x axis projected onto the ground plane.
    pub fn heading(&self) -> f64 {
        let ex = self.rotation * Vector3::x();
        atan2(ex.y, ex.x)
    }

    /// Angle between the rotated +z axis and +z.
    pub fn tilt(&self) -> f64 {
        let ez = self.rotation * Vector3::z();
        let cross = sqrt(ez.x * ez.x + ez.y * ez.y);
        atan2(cross, ez.z)
    }
}

fn unit(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    if (q.norm_squared() - 1.0).abs() <= 4.0 * f64::EPSILON {
        UnitQuaternion::new_unchecked(q)
    } else {
        UnitQuaternion::new_normalize(q)
    }
}

/// Re-expresses `b` through `pose`: the center is mapped as a point, the
/// size is kept, and the yaw gains the pose heading.
pub fn transform_box(b: &Box7, pose: &Pose) -> Result<Box7, GeomError> {
    let tilt = pose.tilt();
    if tilt > MAX_TILT {
        return Err(GeomError::GimbalRisk { tilt });
    }
    let c = pose.transform_point(&b.center());
    Box7::new([c.x, c.y, c.z], b.size(), b.yaw() + pose.heading())
}

/// Pinhole intrinsics with the image extent used for visibility tests.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeomError> {
        let cam = Self { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.fx.is_finite() && self.fx > 0.0) {
            return Err(GeomError::InvalidIntrinsics { field: "fx" });
        }
        if !(self.fy.is_finite() && self.fy > 0.0) {
            return Err(GeomError::InvalidIntrinsics { field: "fy" });
        }
        if !self.cx.is_finite() {
            return Err(GeomError::InvalidIntrinsics { field: "cx" });
        }
        if !self.cy.is_finite() {
            return Err(GeomError::InvalidIntrinsics { field: "cy" });
        }
        if self.width == 0 {
            return Err(GeomError::InvalidIntrinsics { field: "width" });
        }
        if self.height == 0 {
            return Err(GeomError::InvalidIntrinsics { field: "height" });
        }
        Ok(())
    }

    /// Projects a camera-frame point (x right, y down, z forward).
    pub fn project(&self, p: &Point3<f64>) -> CornerProjection {
        if p.z <= 0.0 {
            return CornerProjection::BehindCamera;
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        let inside = u >= 0.0 && u < f64::from(self.width) && v >= 0.0 && v < f64::from(self.height);
        if inside {
            CornerProjection::Visible { u, v }
        } else {
            CornerProjection::OutOfBounds { u, v }
        }
    }
}

/// Outcome of projecting one corner.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "state", rename_all = "snake_case"))]
pub enum CornerProjection {
    Visible { u: f64, v: f64 },
    BehindCamera,
    OutOfBounds { u: f64, v: f64 },
}

impl CornerProjection {
    pub fn is_visible(&self) -> bool {
        matches!(self, CornerProjection::Visible { .. })
    }

    pub fn pixel(&self) -> Option<(f64, f64)> {
        match *self {
            CornerProjection::Visible { u, v } => Some((u, v)),
            _ => None,
        }
    }
}

/// Projects camera-frame corners; visibility requires positive depth and a
/// pixel inside `[0, width) x [0, height)`.
pub fn project_corners(corners: &CornerSet, cam: &CameraIntrinsics) -> [CornerProjection; 8] {
    corners.0.map(|p| cam.project(&p))
}
