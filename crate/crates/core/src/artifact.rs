//! Artifact masks for robustness training.
//!
//! The library is harvested from virtual-pose reprojections, so each mask is
//! exactly the validity channel a real extrapolated condition would have.
//! Injection is two-stage: a Bernoulli gate, then a uniform draw from the
//! library.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gar::{point_map_to_cloud, rasterize, ColoredPointCloud, ConditionMap};
use crate::geometry::{make_extrapolated_pose, CameraIntrinsics, CameraPose};
use crate::raster::{Grid, Mask};
use crate::scene::{render_scene, view_to_point_map, Scene};

/// Default injection probability.
pub const DEFAULT_INJECTION_PROBABILITY: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskProvenance {
    Reprojection {
        scene_index: usize,
        camera_index: usize,
        angle_fraction: f64,
        lateral_offset: f64,
        /// Heading of the second interpolation endpoint relative to the source camera.
        pivot_degrees: f64,
    },
    RandomBox {
        seed: u64,
        target_drop_fraction: f64,
    },
}

/// `true` = keep, `false` = drop.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactMask {
    pub mask: Mask,
    pub provenance: MaskProvenance,
}

impl ArtifactMask {
    pub fn drop_fraction(&self) -> f64 {
        1.0 - self.mask.coverage()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryConfig {
    /// `(height, width)`.
    pub resolution: (usize, usize),
    /// `(angle_fraction, lateral_offset)` pairs for reprojection masks.
    pub virtual_offsets: Vec<(f64, f64)>,
    pub pivot_degrees: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskLibrary {
    masks: Vec<ArtifactMask>,
    config: LibraryConfig,
}

impl MaskLibrary {
    pub fn new(masks: Vec<ArtifactMask>, config: LibraryConfig) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::EmptyMaskLibrary);
        }
        let (h, w) = config.resolution;
        if let Some(bad) = masks.iter().find(|m| m.mask.shape() != (h, w)) {
            return Err(Error::ShapeMismatch {
                expected: (h, w),
                actual: bad.mask.shape(),
            });
        }
        Ok(Self { masks, config })
    }

    pub fn masks(&self) -> &[ArtifactMask] {
        &self.masks
    }

    pub fn config(&self) -> &LibraryConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.config.resolution
    }

    pub fn mean_coverage(&self) -> f64 {
        self.masks.iter().map(|m| m.mask.coverage()).sum::<f64>() / self.masks.len() as f64
    }
}

/// Default heading difference between the source camera and the second
/// interpolation endpoint (front vs. front-side camera).
pub const DEFAULT_PIVOT_DEGREES: f64 = 45.0;

/// Harvests one validity mask per (scene, source camera, virtual offset).
///
/// The virtual pose interpolates between the source camera and the same
/// camera turned by `pivot_degrees`, whose sign is drawn per source camera
/// from `seed`. Masks are the rasterization validity maps verbatim.
pub fn build_mask_library(
    scenes: &[Scene],
    source_cameras: &[(CameraIntrinsics, CameraPose)],
    virtual_offsets: &[(f64, f64)],
    resolution: (usize, usize),
    seed: u64,
) -> Result<MaskLibrary> {
    build_mask_library_with_pivot(
        scenes,
        source_cameras,
        virtual_offsets,
        resolution,
        seed,
        DEFAULT_PIVOT_DEGREES,
    )
}

pub fn build_mask_library_with_pivot(
    scenes: &[Scene],
    source_cameras: &[(CameraIntrinsics, CameraPose)],
    virtual_offsets: &[(f64, f64)],
    resolution: (usize, usize),
    seed: u64,
    pivot_degrees: f64,
) -> Result<MaskLibrary> {
    if let Some((k, _)) = source_cameras.iter().find(|(k, _)| k.shape() != resolution) {
        return Err(Error::ShapeMismatch {
            expected: resolution,
            actual: k.shape(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Vec::new();
    for (scene_index, scene) in scenes.iter().enumerate() {
        for (camera_index, (k, pose)) in source_cameras.iter().enumerate() {
            let pivot = if rng.random_bool(0.5) {
                pivot_degrees
            } else {
                -pivot_degrees
            };
            let view = render_scene(scene, k, pose);
            if view.depth.iter().all(|d| !d.is_finite()) {
                continue;
            }
            let cloud = point_map_to_cloud(&view_to_point_map(&view)?, &view.rgb)?;
            let pivot_pose = pose.turned(pivot)?;
            for &(angle_fraction, lateral_offset) in virtual_offsets {
                let virtual_pose =
                    make_extrapolated_pose(pose, &pivot_pose, angle_fraction, lateral_offset)?;
                masks.push(ArtifactMask {
                    mask: reprojection_mask(&cloud, k, &virtual_pose),
                    provenance: MaskProvenance::Reprojection {
                        scene_index,
                        camera_index,
                        angle_fraction,
                        lateral_offset,
                        pivot_degrees: pivot,
                    },
                });
            }
        }
    }
    MaskLibrary::new(
        masks,
        LibraryConfig {
            resolution,
            virtual_offsets: virtual_offsets.to_vec(),
            pivot_degrees,
            seed,
        },
    )
}

/// Validity map of `cloud` reprojected to the given camera.
pub fn reprojection_mask(
    cloud: &ColoredPointCloud,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> Mask {
    rasterize(cloud, k, pose).validity
}

/// Union of seeded rectangles dropped until the dropped fraction first
/// reaches `target_drop_fraction`. Box sides are uniform in `[H/16, H/3]`
/// (resp. `W`), positions uniform within the frame.
pub fn make_random_box_mask(
    resolution: (usize, usize),
    target_drop_fraction: f64,
    seed: u64,
) -> Result<ArtifactMask> {
    if !(target_drop_fraction > 0.0 && target_drop_fraction < 1.0) {
        return Err(Error::OutOfRange {
            what: "target_drop_fraction",
            value: target_drop_fraction,
        });
    }
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(Error::ShapeMismatch {
            expected: (1, 1),
            actual: resolution,
        });
    }
    let side_range = |n: usize| ((n / 16).max(1), (n / 3).max(1).max(n / 16));
    let (h_lo, h_hi) = side_range(h);
    let (w_lo, w_hi) = side_range(w);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Grid::filled(w, h, true);
    let total = (h * w) as f64;
    let mut dropped = 0usize;
    while (dropped as f64) / total < target_drop_fraction {
        let bh = rng.random_range(h_lo..=h_hi);
        let bw = rng.random_range(w_lo..=w_hi);
        let y0 = rng.random_range(0..=h - bh);
        let x0 = rng.random_range(0..=w - bw);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let px = mask.get_mut(x, y);
                if *px {
                    *px = false;
                    dropped += 1;
                }
            }
        }
    }
    Ok(ArtifactMask {
        mask,
        provenance: MaskProvenance::RandomBox {
            seed,
            target_drop_fraction,
        },
    })
}

/// Two-stage injection: with probability `p` a uniformly drawn library mask
/// is multiplied into the condition (rgb, validity and depth), otherwise the
/// condition is returned unchanged. Returns the applied mask index.
///
/// Consumes exactly one uniform draw for the gate, plus one index draw when
/// the gate fires.
pub fn inject_artifact<R: Rng + ?Sized>(
    x: &ConditionMap,
    library: &MaskLibrary,
    p: f64,
    rng: &mut R,
) -> Result<(ConditionMap, Option<usize>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::OutOfRange {
            what: "injection probability",
            value: p,
        });
    }
    if x.shape() != library.resolution() {
        return Err(Error::ShapeMismatch {
            expected: library.resolution(),
            actual: x.shape(),
        });
    }
    let gate: f64 = rng.random();
    if gate >= p {
        return Ok((x.clone(), None));
    }
    let index = rng.random_range(0..library.len());
    Ok((apply_mask(x, &library.masks[index].mask), Some(index)))
}

/// `x ⊙ a` applied to every channel of the condition map.
pub fn apply_mask(x: &ConditionMap, mask: &Mask) -> ConditionMap {
    let mut out = x.clone();
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            out.rgb.as_mut_slice()[i] = [0.0; 3];
            out.validity.as_mut_slice()[i] = false;
            out.depth.as_mut_slice()[i] = 0.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scene;
    use nalgebra::Vector3;

    fn condition(w: usize, h: usize) -> ConditionMap {
        let mut c = ConditionMap::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                if (x + y) % 3 != 0 {
                    *c.rgb.get_mut(x, y) = [x as f64 / w as f64, y as f64 / h as f64, 0.5];
                    *c.validity.get_mut(x, y) = true;
                    *c.depth.get_mut(x, y) = 1.0 + x as f64;
                }
            }
        }
        c
    }

    fn single_mask_library(mask: Mask) -> MaskLibrary {
        let resolution = mask.shape();
        MaskLibrary::new(
            vec![ArtifactMask {
                mask,
                provenance: MaskProvenance::RandomBox {
                    seed: 0,
                    target_drop_fraction: 0.5,
                },
            }],
            LibraryConfig {
                resolution,
                virtual_offsets: vec![],
                pivot_degrees: 0.0,
                seed: 0,
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_probability_never_injects() {
        let c = condition(8, 6);
        let lib = single_mask_library(Grid::filled(8, 6, false));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (out, applied) = inject_artifact(&c, &lib, 0.0, &mut rng).unwrap();
            assert_eq!(out, c);
            assert!(applied.is_none());
        }
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let c = condition(8, 6);
        let lib = single_mask_library(Grid::filled(8, 6, true));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (out, applied) = inject_artifact(&c, &lib, 1.0, &mut rng).unwrap();
        assert_eq!(applied, Some(0));
        assert_eq!(out, c);
    }

    #[test]
    fn left_half_mask() {
        let (w, h) = (8, 6);
        let c = condition(w, h);
        let lib = single_mask_library(Grid::from_fn(w, h, |x, _| x >= w / 2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, _) = inject_artifact(&c, &lib, 1.0, &mut rng).unwrap();
        out.check_invariants().unwrap();
        for y in 0..h {
            for x in 0..w {
                if x < w / 2 {
                    assert!(!*out.validity.get(x, y));
                    assert_eq!(*out.rgb.get(x, y), [0.0; 3]);
                    assert_eq!(*out.depth.get(x, y), 0.0);
                } else {
                    assert_eq!(out.rgb.get(x, y), c.rgb.get(x, y));
                    assert_eq!(out.validity.get(x, y), c.validity.get(x, y));
                    assert_eq!(out.depth.get(x, y), c.depth.get(x, y));
                }
            }
        }
    }

    #[test]
    fn injection_rejects_resolution_mismatch() {
        let lib = single_mask_library(Grid::filled(4, 4, true));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            inject_artifact(&condition(8, 6), &lib, 0.5, &mut rng),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn random_box_mask_reaches_target() {
        for seed in 0..100 {
            let m = make_random_box_mask((64, 64), 0.25, seed).unwrap();
            let f = m.drop_fraction();
            assert!((0.25..=0.40).contains(&f), "seed {seed}: {f}");
        }
        assert_eq!(
            make_random_box_mask((64, 64), 0.3, 9).unwrap(),
            make_random_box_mask((64, 64), 0.3, 9).unwrap()
        );
        // A tiny target stops after the first box.
        let tiny = make_random_box_mask((64, 64), 1e-9, 5).unwrap();
        assert!(tiny.drop_fraction() <= (21.0 * 21.0) / 4096.0);
        assert!(make_random_box_mask((64, 64), 0.0, 1).is_err());
        assert!(make_random_box_mask((64, 64), 1.0, 1).is_err());
    }

    #[test]
    fn library_cardinality_and_degenerate_offset() {
        let scene = generate_scene(4, 4).unwrap();
        let k = CameraIntrinsics::with_fov(32, 32, 90.0).unwrap();
        let pose = CameraPose::driving(Vector3::new(0.0, 0.0, 1.6), 0.0).unwrap();
        let offsets = [(0.0, 0.0), (0.25, 0.5), (0.5, 1.0)];
        let lib = build_mask_library(
            std::slice::from_ref(&scene),
            &[(k, pose.clone())],
            &offsets,
            (32, 32),
            1,
        )
        .unwrap();
        assert_eq!(lib.len(), 3);
        let view = render_scene(&scene, &k, &pose);
        assert_eq!(lib.masks()[0].mask, view.finite_depth_mask());
        assert!(lib.masks()[2].mask.coverage() < lib.masks()[0].mask.coverage());
    }

    #[test]
    fn empty_library_is_rejected() {
        let k = CameraIntrinsics::with_fov(16, 16, 90.0).unwrap();
        let pose = CameraPose::driving(Vector3::new(0.0, 0.0, 1.6), 0.0).unwrap();
        assert!(matches!(
            build_mask_library(&[], &[(k, pose)], &[(0.0, 0.0)], (16, 16), 0),
            Err(Error::EmptyMaskLibrary)
        ));
    }
}
