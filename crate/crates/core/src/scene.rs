//! Procedural scenes rendered by exact ray casting.
//!
//! These scenes are the ground-truth oracle for everything downstream: they
//! provide dense RGB and depth at any camera, so reprojection, masks and
//! metrics can be checked against exact answers.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gar::PointMap;
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::raster::{DepthMap, Grid, Mask, RgbImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Infinite plane `{p : normal · p = offset}` with a unit normal.
    Plane {
        normal: [f64; 3],
        offset: f64,
    },
    /// Axis-aligned box.
    Cuboid {
        min: [f64; 3],
        max: [f64; 3],
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    primitives: Vec<Primitive>,
    background_color: [f64; 3],
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>, background_color: [f64; 3]) -> Result<Self> {
        let scene = Self {
            primitives,
            background_color,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidScene("no primitives".into()));
        }
        if !in_unit_range(&self.background_color) {
            return Err(Error::InvalidScene(
                "background color outside [0, 1]".into(),
            ));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if !in_unit_range(&p.albedo) {
                return Err(Error::InvalidScene(format!(
                    "primitive {i}: albedo outside [0, 1]"
                )));
            }
            let ok = match &p.shape {
                Shape::Plane { normal, offset } => {
                    all_finite(normal)
                        && offset.is_finite()
                        && (Vector3::from(*normal).norm() - 1.0).abs() < 1e-9
                }
                Shape::Cuboid { min, max } => {
                    all_finite(min) && all_finite(max) && (0..3).all(|a| min[a] < max[a])
                }
                Shape::Sphere { center, radius } => {
                    all_finite(center) && radius.is_finite() && *radius > 0.0
                }
            };
            if !ok {
                return Err(Error::InvalidScene(format!("primitive {i}: bad geometry")));
            }
        }
        Ok(())
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn background_color(&self) -> [f64; 3] {
        self.background_color
    }

    /// Nearest hit along `origin + s·dir` for `s > 0`: `(s, primitive index)`.
    /// Exact ties go to the earlier primitive.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(s) = intersect_shape(&p.shape, origin, dir) {
                if best.is_none_or(|(b, _)| s < b) {
                    best = Some((s, i));
                }
            }
        }
        best
    }
}

fn in_unit_range(c: &[f64; 3]) -> bool {
    c.iter().all(|v| (0.0..=1.0).contains(v))
}

fn all_finite(v: &[f64; 3]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Smallest positive ray parameter at which the ray meets the shape.
pub fn intersect_shape(shape: &Shape, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    let s = match shape {
        Shape::Plane { normal, offset } => {
            let n = Vector3::from(*normal);
            let denom = n.dot(dir);
            if denom == 0.0 {
                return None;
            }
            (offset - n.dot(origin)) / denom
        }
        Shape::Cuboid { min, max } => {
            let mut near = f64::NEG_INFINITY;
            let mut far = f64::INFINITY;
            for a in 0..3 {
                if dir[a] == 0.0 {
                    if origin[a] < min[a] || origin[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let t0 = (min[a] - origin[a]) / dir[a];
                let t1 = (max[a] - origin[a]) / dir[a];
                let (lo, hi) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
                near = near.max(lo);
                far = far.min(hi);
            }
            if near > far || far <= 0.0 {
                return None;
            }
            if near > 0.0 {
                near
            } else {
                far
            }
        }
        Shape::Sphere { center, radius } => {
            let oc = origin - Vector3::from(*center);
            let a = dir.dot(dir);
            let half_b = oc.dot(dir);
            let c = oc.dot(&oc) - radius * radius;
            let disc = half_b * half_b - a * c;
            if disc < 0.0 {
                return None;
            }
            let root = disc.sqrt();
            let s0 = (-half_b - root) / a;
            if s0 > 0.0 {
                s0
            } else {
                (-half_b + root) / a
            }
        }
    };
    (s > 0.0 && s.is_finite()).then_some(s)
}

/// A dense oracle rendering: RGB, camera-frame depth (`+∞` on misses) and
/// the camera it was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl RenderedView {
    /// Pixels with finite depth.
    pub fn finite_depth_mask(&self) -> Mask {
        self.depth.map(|d| d.is_finite())
    }
}

/// Deterministic scene: a ground plane (z = 0, z up) plus `complexity`
/// boxes and spheres resting on it in front of the origin along +x.
pub fn generate_scene(seed: u64, complexity: usize) -> Result<Scene> {
    if complexity == 0 {
        return Err(Error::InvalidScene("complexity must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ground_level = rng.random_range(0.30..0.55);
    let ground = [
        ground_level * rng.random_range(0.85..1.0),
        ground_level,
        ground_level * rng.random_range(0.75..0.95),
    ];
    let background = [
        rng.random_range(0.55..0.70),
        rng.random_range(0.70..0.85),
        rng.random_range(0.88..0.98),
    ];
    let mut primitives = vec![Primitive {
        shape: Shape::Plane {
            normal: [0.0, 0.0, 1.0],
            offset: 0.0,
        },
        albedo: ground,
    }];

    let hue0: f64 = rng.random();
    for i in 0..complexity {
        let hue = (hue0 + i as f64 / complexity as f64).fract();
        let saturation = rng.random_range(0.55..0.95);
        let value = rng.random_range(0.55..0.95);
        let albedo = hsv_to_rgb(hue, saturation, value);
        let x = rng.random_range(5.0..16.0);
        let y = rng.random_range(-7.0..7.0);
        let shape = if rng.random_bool(0.5) {
            let half_w = rng.random_range(0.4..1.3);
            let half_d = rng.random_range(0.4..1.3);
            let height = rng.random_range(0.8..2.6);
            Shape::Cuboid {
                min: [x - half_d, y - half_w, 0.0],
                max: [x + half_d, y + half_w, height],
            }
        } else {
            let radius = rng.random_range(0.5..1.3);
            Shape::Sphere {
                center: [x, y, radius],
                radius,
            }
        };
        primitives.push(Primitive { shape, albedo });
    }
    Scene::new(primitives, background)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Ray-casts the scene through every pixel center with flat albedo shading.
///
/// The ray direction has unit camera-frame z, so the hit parameter is the
/// camera-frame depth.
pub fn render_scene(scene: &Scene, k: &CameraIntrinsics, pose: &CameraPose) -> RenderedView {
    let origin = pose.center();
    let c2w = pose.camera_to_world_rotation();
    let mut rgb = Grid::filled(k.width, k.height, scene.background_color);
    let mut depth = Grid::filled(k.width, k.height, f64::INFINITY);
    for y in 0..k.height {
        for x in 0..k.width {
            let dir_cam = k.back_project(x as f64, y as f64, 1.0);
            let dir = c2w * dir_cam;
            if let Some((s, i)) = scene.intersect(&origin, &dir) {
                *rgb.get_mut(x, y) = scene.primitives[i].albedo;
                *depth.get_mut(x, y) = s;
            }
        }
    }
    RenderedView {
        rgb,
        depth,
        intrinsics: *k,
        pose: pose.clone(),
    }
}

/// Back-projects every finite-depth pixel center to world coordinates.
pub fn view_to_point_map(view: &RenderedView) -> Result<PointMap> {
    let k = &view.intrinsics;
    let valid = view.finite_depth_mask();
    if valid.count_true() == 0 {
        return Err(Error::NoFiniteDepth);
    }
    let points = Grid::from_fn(k.width, k.height, |x, y| {
        let d = *view.depth.get(x, y);
        if d.is_finite() {
            let pc = k.back_project(x as f64, y as f64, d);
            view.pose.camera_to_world(&pc).into()
        } else {
            [0.0; 3]
        }
    });
    PointMap::new(points, valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gar::ColoredPointCloud;
    use crate::geometry::project_points;
    use approx::assert_abs_diff_eq;

    fn k64() -> CameraIntrinsics {
        CameraIntrinsics::new(40.0, 40.0, 32.0, 32.0, 65, 65).unwrap()
    }

    #[test]
    fn scene_generation_is_deterministic_and_seeded() {
        let a = generate_scene(7, 3).unwrap();
        assert_eq!(a, generate_scene(7, 3).unwrap());
        assert_ne!(a, generate_scene(8, 3).unwrap());
        let s = generate_scene(1, 5).unwrap();
        assert_eq!(s.primitives().len(), 6);
        assert!(matches!(s.primitives()[0].shape, Shape::Plane { .. }));
        let albedos: Vec<_> = s.primitives()[1..].iter().map(|p| p.albedo).collect();
        for i in 0..albedos.len() {
            for j in i + 1..albedos.len() {
                assert_ne!(albedos[i], albedos[j]);
            }
        }
        assert!(generate_scene(1, 0).is_err());
    }

    #[test]
    fn rejects_invalid_scenes() {
        assert!(Scene::new(vec![], [0.0; 3]).is_err());
        let bad = Primitive {
            shape: Shape::Sphere {
                center: [0.0; 3],
                radius: -1.0,
            },
            albedo: [0.5; 3],
        };
        assert!(Scene::new(vec![bad], [0.0; 3]).is_err());
    }

    #[test]
    fn misses_give_background_and_infinite_depth() {
        let scene = Scene::new(
            vec![Primitive {
                shape: Shape::Sphere {
                    center: [0.0, 0.0, -10.0],
                    radius: 1.0,
                },
                albedo: [1.0, 0.0, 0.0],
            }],
            [0.1, 0.2, 0.3],
        )
        .unwrap();
        let view = render_scene(&scene, &k64(), &CameraPose::identity());
        assert!(view.rgb.iter().all(|c| *c == [0.1, 0.2, 0.3]));
        assert!(view.depth.iter().all(|d| *d == f64::INFINITY));
        assert!(matches!(
            view_to_point_map(&view),
            Err(Error::NoFiniteDepth)
        ));
    }

    #[test]
    fn downward_camera_sees_plane_at_constant_depth() {
        let d = 3.25;
        let scene = Scene::new(
            vec![Primitive {
                shape: Shape::Plane {
                    normal: [0.0, 0.0, 1.0],
                    offset: 0.0,
                },
                albedo: [0.4; 3],
            }],
            [0.0; 3],
        )
        .unwrap();
        // Camera at height d looking straight down (camera z = world -z).
        let c2w = nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let pose = CameraPose::from_camera_to_world(c2w, Vector3::new(0.0, 0.0, d)).unwrap();
        let view = render_scene(&scene, &k64(), &pose);
        for depth in view.depth.iter() {
            assert_abs_diff_eq!(*depth, d, epsilon = 1e-12);
        }
        let pm = view_to_point_map(&view).unwrap();
        for p in pm.points().iter() {
            assert_abs_diff_eq!(p[2], 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn unit_box_on_axis() {
        let scene = Scene::new(
            vec![Primitive {
                shape: Shape::Cuboid {
                    min: [-0.5, -0.5, 4.5],
                    max: [0.5, 0.5, 5.5],
                },
                albedo: [1.0, 0.0, 0.0],
            }],
            [0.0; 3],
        )
        .unwrap();
        let view = render_scene(&scene, &k64(), &CameraPose::identity());
        assert_eq!(*view.depth.get(32, 32), 4.5);
        assert_eq!(*view.rgb.get(32, 32), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn back_projection_round_trip() {
        let scene = generate_scene(3, 4).unwrap();
        let k = CameraIntrinsics::with_fov(48, 32, 90.0).unwrap();
        let pose = CameraPose::driving(Vector3::new(0.0, 0.0, 1.6), 10.0).unwrap();
        let view = render_scene(&scene, &k, &pose);
        let pm = view_to_point_map(&view).unwrap();
        let mut pts = Vec::new();
        let mut pixels = Vec::new();
        for y in 0..k.height {
            for x in 0..k.width {
                if *pm.valid().get(x, y) {
                    pts.push(*pm.points().get(x, y));
                    pixels.push((x, y));
                } else {
                    assert_eq!(*view.depth.get(x, y), f64::INFINITY);
                }
            }
        }
        let n = pts.len();
        let cloud = ColoredPointCloud::new(pts, vec![[0.0; 3]; n]).unwrap();
        for (p, (x, y)) in project_points(&cloud, &k, &pose).iter().zip(pixels) {
            assert_abs_diff_eq!(p.pixel_x, x as f64, epsilon = 1e-6);
            assert_abs_diff_eq!(p.pixel_y, y as f64, epsilon = 1e-6);
            assert_abs_diff_eq!(p.depth, *view.depth.get(x, y), epsilon = 1e-9);
        }
    }

    #[test]
    fn nearest_hit_matches_brute_force() {
        let scene = generate_scene(11, 6).unwrap();
        let k = CameraIntrinsics::with_fov(40, 24, 90.0).unwrap();
        let pose = CameraPose::driving(Vector3::new(0.0, 0.0, 1.6), -20.0).unwrap();
        let view = render_scene(&scene, &k, &pose);
        let origin = pose.center();
        for y in 0..k.height {
            for x in 0..k.width {
                let dir = pose.camera_to_world_rotation() * k.back_project(x as f64, y as f64, 1.0);
                let hits: Vec<f64> = scene
                    .primitives()
                    .iter()
                    .filter_map(|p| intersect_shape(&p.shape, &origin, &dir))
                    .collect();
                let best = hits.iter().cloned().fold(f64::INFINITY, f64::min);
                assert_eq!(*view.depth.get(x, y), best);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = generate_scene(5, 3).unwrap();
        let k = CameraIntrinsics::with_fov(32, 32, 90.0).unwrap();
        let pose = CameraPose::driving(Vector3::new(0.0, 0.0, 1.6), 0.0).unwrap();
        assert_eq!(
            render_scene(&scene, &k, &pose),
            render_scene(&scene, &k, &pose)
        );
    }
}
