//! Pinhole cameras, rigid poses, perspective projection and the shared
//! projection validity operator.
//!
//! Conventions: camera frame is x right, y down, z forward. A pixel index
//! `(i, j)` has its center at continuous image coordinate `(i, j)`, and a
//! continuous coordinate is assigned to a pixel by rounding half away from
//! zero. Depth is the camera-frame z coordinate.

use std::cell::Cell;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gar::ColoredPointCloud;

/// Tolerance for the orthonormality check on rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel camera with the principal point at the image center and
    /// the given horizontal field of view.
    pub fn with_fov(width: usize, height: usize, horizontal_fov_degrees: f64) -> Result<Self> {
        let half = (horizontal_fov_degrees.to_radians() / 2.0).tan();
        let f = (width as f64 / 2.0) / half;
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidIntrinsics("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics(format!(
                "image size must be at least 1x1 (got {}x{})",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// `(height, width)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Camera-frame point at `depth` behind continuous pixel `(px, py)`.
    #[inline]
    pub fn back_project(&self, px: f64, py: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (px - self.cx) / self.fx * depth,
            (py - self.cy) / self.fy * depth,
            depth,
        )
    }
}

/// Rigid world→camera transform `x_c = R·x_w + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation
            .iter()
            .chain(translation.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("camera pose"));
        }
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if deviation > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::NotOrthonormal { deviation, det });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds the pose from a camera→world rotation and the camera center.
    pub fn from_camera_to_world(rotation_c2w: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        let rotation = rotation_c2w.transpose();
        let translation = -(rotation * center);
        Self::new(rotation, translation)
    }

    /// Level camera for a z-up world, looking along the horizontal heading
    /// `yaw_degrees` (0 = +x, 90 = +y).
    pub fn driving(center: Vector3<f64>, yaw_degrees: f64) -> Result<Self> {
        let (s, c) = yaw_degrees.to_radians().sin_cos();
        let right = Vector3::new(s, -c, 0.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let forward = Vector3::new(c, s, 0.0);
        Self::from_camera_to_world(Matrix3::from_columns(&[right, down, forward]), center)
    }

    /// World→camera rotation.
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    /// World→camera translation.
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn camera_to_world_rotation(&self) -> Matrix3<f64> {
        self.rotation.transpose()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// The camera's right axis expressed in world coordinates.
    pub fn right_axis(&self) -> Vector3<f64> {
        self.rotation.row(0).transpose()
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Same center, heading turned by `degrees` about the camera's up axis.
    /// For a level camera in a z-up world, positive turns left.
    pub fn turned(&self, degrees: f64) -> Result<Self> {
        let up_turn = Rotation3::from_axis_angle(&Vector3::y_axis(), -degrees.to_radians());
        let c2w = self.camera_to_world_rotation() * up_turn.matrix();
        Self::from_camera_to_world(c2w, self.center())
    }

    /// Row-major 4×4 world→camera matrix.
    pub fn to_extrinsic(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    /// Parses a row-major 4×4 world→camera matrix; the last row must be `0 0 0 1`.
    pub fn from_extrinsic(m: &[f64; 16]) -> Result<Self> {
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::InvalidIntrinsics(
                "extrinsic last row must be [0, 0, 0, 1]".into(),
            ));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        Self::new(rotation, translation)
    }
}

/// A cloud point after perspective projection. Validity is not decided here.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub pixel_x: f64,
    pub pixel_y: f64,
    pub depth: f64,
    pub color: [f64; 3],
    pub source_index: usize,
}

/// The z-buffer entry that currently owns a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthWinner {
    pub depth: f64,
    pub source_index: usize,
}

impl DepthWinner {
    /// Front-most ordering: smaller depth first, exact ties by smaller index.
    #[inline]
    pub fn precedes(&self, other: &DepthWinner) -> bool {
        self.depth < other.depth
            || (self.depth == other.depth && self.source_index < other.source_index)
    }
}

/// Projects every cloud point through `(k, pose)`, preserving cloud order.
///
/// Points with non-positive depth are still emitted (their pixel coordinates
/// may be non-finite); [`validity_test`] rejects them.
pub fn project_points(
    cloud: &ColoredPointCloud,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> Vec<ProjectedPoint> {
    cloud
        .positions()
        .iter()
        .zip(cloud.colors())
        .enumerate()
        .map(|(source_index, (p, color))| {
            let pc = pose.world_to_camera(&Vector3::from(*p));
            ProjectedPoint {
                pixel_x: k.fx * pc.x / pc.z + k.cx,
                pixel_y: k.fy * pc.y / pc.z + k.cy,
                depth: pc.z,
                color: *color,
                source_index,
            }
        })
        .collect()
}

/// Pixel `(x, y)` that a continuous coordinate falls into, if inside the frame.
#[inline]
pub fn pixel_of(pixel_x: f64, pixel_y: f64, k: &CameraIntrinsics) -> Option<(usize, usize)> {
    if !pixel_x.is_finite() || !pixel_y.is_finite() {
        return None;
    }
    let x = pixel_x.round();
    let y = pixel_y.round();
    if x < 0.0 || y < 0.0 || x >= k.width as f64 || y >= k.height as f64 {
        return None;
    }
    Some((x as usize, y as usize))
}

thread_local! {
    static VALIDITY_EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`validity_test`] evaluations performed on the calling thread.
///
/// Lets tests audit that reprojection, mask generation and sparse-reference
/// construction all run through the same predicate.
pub fn validity_evaluations() -> u64 {
    VALIDITY_EVALUATIONS.with(Cell::get)
}

/// The projection validity operator: positive depth, in-frame after
/// rounding, and, when a z-buffer winner is given for the pixel, being that
/// winner (minimum depth, exact ties to the smallest source index).
///
/// This is the only validity definition in the crate.
pub fn validity_test(
    pt: &ProjectedPoint,
    k: &CameraIntrinsics,
    winner: Option<DepthWinner>,
) -> bool {
    VALIDITY_EVALUATIONS.with(|c| c.set(c.get() + 1));
    if pt.depth.is_nan() || pt.depth <= 0.0 {
        return false;
    }
    if pixel_of(pt.pixel_x, pt.pixel_y, k).is_none() {
        return false;
    }
    match winner {
        None => true,
        Some(w) => w.depth == pt.depth && w.source_index == pt.source_index,
    }
}

/// Builds a virtual camera between two observed ones.
///
/// Camera-to-world rotations are slerped at `angle_fraction` and camera
/// centers are lerped; the center is then moved `lateral_offset` meters along
/// the interpolated camera's right axis (positive = right).
pub fn make_extrapolated_pose(
    pose_a: &CameraPose,
    pose_b: &CameraPose,
    angle_fraction: f64,
    lateral_offset: f64,
) -> Result<CameraPose> {
    if !lateral_offset.is_finite() {
        return Err(Error::NonFinite("lateral_offset"));
    }
    if !(0.0..=1.0).contains(&angle_fraction) {
        return Err(Error::OutOfRange {
            what: "angle_fraction",
            value: angle_fraction,
        });
    }
    if lateral_offset == 0.0 {
        if angle_fraction == 0.0 {
            return Ok(pose_a.clone());
        }
        if angle_fraction == 1.0 {
            return Ok(pose_b.clone());
        }
    }

    let c2w = if angle_fraction == 0.0 {
        pose_a.camera_to_world_rotation()
    } else if angle_fraction == 1.0 {
        pose_b.camera_to_world_rotation()
    } else {
        let qa = UnitQuaternion::from_matrix(&pose_a.camera_to_world_rotation());
        let qb = UnitQuaternion::from_matrix(&pose_b.camera_to_world_rotation());
        let q = qa
            .try_slerp(&qb, angle_fraction, 1e-12)
            // Antipodal orientations: any great circle is a valid path.
            .unwrap_or_else(|| qa.nlerp(&qb, angle_fraction));
        q.to_rotation_matrix().into_inner()
    };
    let center = pose_a.center() * (1.0 - angle_fraction) + pose_b.center() * angle_fraction;
    let right = c2w.column(0).into_owned();
    CameraPose::from_camera_to_world(c2w, center + right * lateral_offset)
}

/// Geodesic angle between two camera orientations, in degrees within `[0, 180]`.
pub fn pose_offset_degrees(pose_a: &CameraPose, pose_b: &CameraPose) -> f64 {
    let r = pose_a.rotation().transpose() * pose_b.rotation();
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let sin = 0.5
        * Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        )
        .norm();
    sin.atan2(cos).to_degrees().clamp(0.0, 180.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn single(p: [f64; 3]) -> ColoredPointCloud {
        ColoredPointCloud::new(vec![p], vec![[0.5; 3]]).unwrap()
    }

    fn yaw_pose(deg: f64) -> CameraPose {
        CameraPose::driving(Vector3::new(0.0, 0.0, 1.5), deg).unwrap()
    }

    #[test]
    fn projects_on_axis_point_to_principal_point() {
        let pts = project_points(&single([0.0, 0.0, 1.0]), &k100(), &CameraPose::identity());
        assert_eq!(
            (pts[0].pixel_x, pts[0].pixel_y, pts[0].depth),
            (50.0, 50.0, 1.0)
        );
    }

    #[test]
    fn behind_camera_point_keeps_negative_depth() {
        let pts = project_points(&single([0.0, 0.0, -1.0]), &k100(), &CameraPose::identity());
        assert_eq!(pts[0].depth, -1.0);
        assert!(!validity_test(&pts[0], &k100(), None));
    }

    #[test]
    fn projects_offset_point() {
        let pts = project_points(&single([1.0, 2.0, 4.0]), &k100(), &CameraPose::identity());
        // Scalar re-evaluation of the pinhole formula.
        let (x, y, z) = (1.0_f64, 2.0_f64, 4.0_f64);
        assert_eq!(pts[0].pixel_x, 100.0 * x / z + 50.0);
        assert_eq!(pts[0].pixel_y, 100.0 * y / z + 50.0);
        assert_eq!(
            (pts[0].pixel_x, pts[0].pixel_y, pts[0].depth),
            (75.0, 100.0, 4.0)
        );
    }

    #[test]
    fn validity_clauses() {
        let k = k100();
        let mut pt = ProjectedPoint {
            pixel_x: 50.0,
            pixel_y: 50.0,
            depth: 1.0,
            color: [0.0; 3],
            source_index: 0,
        };
        assert!(validity_test(&pt, &k, None));
        pt.depth = -1.0;
        assert!(!validity_test(&pt, &k, None));
        pt.depth = 2.0;
        let front = DepthWinner {
            depth: 1.0,
            source_index: 7,
        };
        assert!(!validity_test(&pt, &k, Some(front)));
        // Rounding half away from zero at the frame edges.
        pt.pixel_x = -0.49;
        assert!(validity_test(&pt, &k, None));
        pt.pixel_x = -0.5;
        assert!(!validity_test(&pt, &k, None));
        pt.pixel_x = 99.49;
        assert!(validity_test(&pt, &k, None));
        pt.pixel_x = 99.5;
        assert!(!validity_test(&pt, &k, None));
        pt.pixel_x = f64::NAN;
        assert!(!validity_test(&pt, &k, None));
    }

    #[test]
    fn rejects_reflection() {
        let r = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matches!(
            CameraPose::new(r, Vector3::zeros()),
            Err(Error::NotOrthonormal { .. })
        ));
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0, 4).is_err());
    }

    #[test]
    fn extrapolated_pose_endpoints_are_exact() {
        let a = yaw_pose(0.0);
        let b = CameraPose::driving(Vector3::new(1.0, 2.0, 1.5), 45.0).unwrap();
        assert_eq!(make_extrapolated_pose(&a, &b, 0.0, 0.0).unwrap(), a);
        assert_eq!(make_extrapolated_pose(&a, &b, 1.0, 0.0).unwrap(), b);
        assert!(make_extrapolated_pose(&a, &b, 0.5, f64::NAN).is_err());
        assert!(make_extrapolated_pose(&a, &b, 1.5, 0.0).is_err());
    }

    #[test]
    fn extrapolated_pose_midway_with_lateral_shift() {
        let a = yaw_pose(0.0);
        let b = yaw_pose(45.0);
        let v = make_extrapolated_pose(&a, &b, 0.5, 1.0).unwrap();
        let expected = yaw_pose(22.5);
        assert_abs_diff_eq!(v.rotation(), expected.rotation(), epsilon = 1e-12);

        // Independent quaternion arithmetic: yaw is a rotation about world z,
        // so the half-angle quaternion composition gives the right axis.
        let half = 22.5_f64.to_radians() / 2.0;
        let (qw, qz) = (half.cos(), half.sin());
        // Rotate the yaw-0 right axis (0, -1, 0) by q = (qw, 0, 0, qz).
        let v0 = [0.0, -1.0, 0.0];
        let rotated = [
            (1.0 - 2.0 * qz * qz) * v0[0] - 2.0 * qw * qz * v0[1],
            2.0 * qw * qz * v0[0] + (1.0 - 2.0 * qz * qz) * v0[1],
            v0[2],
        ];
        let shift = v.center() - a.center();
        for i in 0..3 {
            assert_abs_diff_eq!(shift[i], rotated[i], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(pose_offset_degrees(&a, &v), 22.5, epsilon = 1e-9);
    }

    #[test]
    fn pose_offsets() {
        let a = yaw_pose(0.0);
        assert_eq!(pose_offset_degrees(&a, &a), 0.0);
        let b = yaw_pose(22.5);
        let via_trace = {
            let r = a.rotation().transpose() * b.rotation();
            ((r.trace() - 1.0) / 2.0).acos().to_degrees()
        };
        assert_abs_diff_eq!(pose_offset_degrees(&a, &b), 22.5, epsilon = 1e-9);
        assert_abs_diff_eq!(pose_offset_degrees(&a, &b), via_trace, epsilon = 1e-6);
        assert_abs_diff_eq!(
            pose_offset_degrees(&a, &yaw_pose(180.0)),
            180.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn turned_is_yaw_for_level_cameras() {
        let a = yaw_pose(10.0);
        let b = a.turned(45.0).unwrap();
        assert_abs_diff_eq!(b.rotation(), yaw_pose(55.0).rotation(), epsilon = 1e-12);
        assert_abs_diff_eq!(b.center(), a.center(), epsilon = 1e-12);
    }

    #[test]
    fn extrinsic_round_trip() {
        let p = CameraPose::driving(Vector3::new(3.0, -1.0, 1.6), 33.0).unwrap();
        assert_eq!(CameraPose::from_extrinsic(&p.to_extrinsic()).unwrap(), p);
    }
}
