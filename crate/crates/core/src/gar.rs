//! Geometry-aware reprojection: lift an observed view to a colored point
//! cloud and z-buffer rasterize it into a sparse condition map at any camera.

use std::cell::Cell;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    pixel_of, project_points, validity_test, CameraIntrinsics, CameraPose, DepthWinner,
};
use crate::raster::{DepthMap, Grid, Mask, RgbImage};
use crate::scene::{view_to_point_map, RenderedView};

/// Per-pixel world coordinates with an explicit validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    points: Grid<[f64; 3]>,
    valid: Mask,
}

impl PointMap {
    pub fn new(points: Grid<[f64; 3]>, valid: Mask) -> Result<Self> {
        if !points.same_shape(&valid) {
            return Err(Error::ShapeMismatch {
                expected: points.shape(),
                actual: valid.shape(),
            });
        }
        if points
            .iter()
            .zip(valid.iter())
            .any(|(p, &v)| v && p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::NonFinite("point map"));
        }
        Ok(Self { points, valid })
    }

    pub fn points(&self) -> &Grid<[f64; 3]> {
        &self.points
    }

    pub fn valid(&self) -> &Mask {
        &self.valid
    }

    /// `(height, width)`.
    pub fn shape(&self) -> (usize, usize) {
        self.points.shape()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColoredPointCloud {
    positions: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
}

impl ColoredPointCloud {
    pub fn new(positions: Vec<[f64; 3]>, colors: Vec<[f64; 3]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if positions.len() != colors.len() {
            return Err(Error::InvalidCloud(format!(
                "{} positions but {} colors",
                positions.len(),
                colors.len()
            )));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point positions"));
        }
        if colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidCloud("color outside [0, 1]".into()));
        }
        Ok(Self { positions, colors })
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Sparse reprojected rendering. Invalid pixels are zero in `rgb` and `depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMap {
    pub rgb: RgbImage,
    pub validity: Mask,
    pub depth: DepthMap,
}

impl ConditionMap {
    /// Fully unsupported map of the given size.
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            rgb: Grid::filled(width, height, [0.0; 3]),
            validity: Grid::filled(width, height, false),
            depth: Grid::filled(width, height, 0.0),
        }
    }

    /// Assembles a map and checks the zero-fill and positive-depth invariants.
    pub fn new(rgb: RgbImage, validity: Mask, depth: DepthMap) -> Result<Self> {
        let map = Self {
            rgb,
            validity,
            depth,
        };
        map.check_invariants()?;
        Ok(map)
    }

    pub fn check_invariants(&self) -> Result<()> {
        if !self.rgb.same_shape(&self.validity) || !self.rgb.same_shape(&self.depth) {
            return Err(Error::ShapeMismatch {
                expected: self.rgb.shape(),
                actual: self.validity.shape(),
            });
        }
        for ((rgb, &valid), &depth) in self
            .rgb
            .iter()
            .zip(self.validity.iter())
            .zip(self.depth.iter())
        {
            if valid {
                if !depth.is_finite() || depth <= 0.0 {
                    return Err(Error::InvalidCondition(
                        "valid condition pixel without positive depth".into(),
                    ));
                }
            } else if *rgb != [0.0; 3] {
                return Err(Error::InvalidCondition(
                    "invalid condition pixel is not zero-filled".into(),
                ));
            }
        }
        Ok(())
    }

    /// `(height, width)`.
    pub fn shape(&self) -> (usize, usize) {
        self.rgb.shape()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.validity.coverage()
    }
}

/// Colored cloud from every valid point-map pixel, in row-major order.
pub fn point_map_to_cloud(point_map: &PointMap, image: &RgbImage) -> Result<ColoredPointCloud> {
    if point_map.shape() != image.shape() {
        return Err(Error::ShapeMismatch {
            expected: point_map.shape(),
            actual: image.shape(),
        });
    }
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for ((p, &valid), c) in point_map
        .points
        .iter()
        .zip(point_map.valid.iter())
        .zip(image.iter())
    {
        if valid {
            positions.push(*p);
            colors.push(*c);
        }
    }
    if positions.is_empty() {
        return Err(Error::EmptyPointMap);
    }
    ColoredPointCloud::new(positions, colors)
}

const ZBUFFER_CHUNK: usize = 4096;

fn merge_winner(slot: &mut Option<DepthWinner>, candidate: DepthWinner) {
    if slot.is_none_or(|w| candidate.precedes(&w)) {
        *slot = Some(candidate);
    }
}

/// Z-buffer rasterization of `cloud` into the target camera.
///
/// One point covers exactly one pixel. Per pixel the front-most valid point
/// wins (exact depth ties: smallest source index); pixels without a winner
/// stay zero-filled and invalid. Output does not depend on thread count.
pub fn rasterize(
    cloud: &ColoredPointCloud,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> ConditionMap {
    let projected = project_points(cloud, k, pose);
    let n_pixels = k.width * k.height;

    let zbuffer = projected
        .par_chunks(ZBUFFER_CHUNK)
        .fold(
            || vec![None; n_pixels],
            |mut buf: Vec<Option<DepthWinner>>, chunk| {
                for pt in chunk {
                    if validity_test(pt, k, None) {
                        let (x, y) = pixel_of(pt.pixel_x, pt.pixel_y, k).expect("in-frame");
                        merge_winner(
                            &mut buf[y * k.width + x],
                            DepthWinner {
                                depth: pt.depth,
                                source_index: pt.source_index,
                            },
                        );
                    }
                }
                buf
            },
        )
        .reduce(
            || vec![None; n_pixels],
            |mut a, b| {
                for (slot, w) in a.iter_mut().zip(b) {
                    if let Some(w) = w {
                        merge_winner(slot, w);
                    }
                }
                a
            },
        );

    let mut out = ConditionMap::empty(k.width, k.height);
    for pt in &projected {
        let pixel = pixel_of(pt.pixel_x, pt.pixel_y, k);
        let winner = pixel.and_then(|(x, y)| zbuffer[y * k.width + x]);
        if validity_test(pt, k, winner) {
            let (x, y) = pixel.expect("valid points are in frame");
            *out.rgb.get_mut(x, y) = pt.color;
            *out.depth.get_mut(x, y) = pt.depth;
            *out.validity.get_mut(x, y) = true;
        }
    }
    out
}

thread_local! {
    static CONDITION_BUILDS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`build_condition`] calls made on the calling thread.
pub fn condition_builds() -> u64 {
    CONDITION_BUILDS.with(Cell::get)
}

/// The single condition-construction path used for training pairs and for
/// extrapolated inference alike: point map → colored cloud → rasterize.
pub fn build_condition(
    source: &RenderedView,
    target_k: &CameraIntrinsics,
    target_pose: &CameraPose,
) -> Result<ConditionMap> {
    CONDITION_BUILDS.with(|c| c.set(c.get() + 1));
    if target_k.shape() != source.intrinsics.shape() {
        return Err(Error::ShapeMismatch {
            expected: source.intrinsics.shape(),
            actual: target_k.shape(),
        });
    }
    let point_map = view_to_point_map(source)?;
    let cloud = point_map_to_cloud(&point_map, &source.rgb)?;
    Ok(rasterize(&cloud, target_k, target_pose))
}

/// Reprojects `scene_view` to the target camera. When `target_truth` is given
/// (its camera must equal the target camera) its RGB is returned as the
/// supervision image.
pub fn make_training_pair(
    scene_view: &RenderedView,
    target_k: &CameraIntrinsics,
    target_pose: &CameraPose,
    target_truth: Option<&RenderedView>,
) -> Result<(ConditionMap, Option<RgbImage>)> {
    if let Some(truth) = target_truth {
        if truth.intrinsics != *target_k || truth.pose != *target_pose {
            return Err(Error::CameraMismatch);
        }
    }
    let condition = build_condition(scene_view, target_k, target_pose)?;
    Ok((condition, target_truth.map(|t| t.rgb.clone())))
}
