//! Sparse-reference evaluation: error metrics restricted to the pixels where
//! a reference is available, plus pose-offset and sparsity binning.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gar::{rasterize, ColoredPointCloud, ConditionMap};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::raster::{luma, Grid, Mask, RgbImage};
use crate::scene::RenderedView;

/// PSNR reported when the masked error is exactly zero.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const MAX_INTENSITY: f64 = 1.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Windows whose valid Gaussian weight falls below this are skipped.
pub const SSIM_MIN_VALID_WEIGHT: f64 = 0.5;

pub const DEFAULT_OFFSET_EDGES: [f64; 6] = [0.0, 5.0, 10.0, 15.0, 20.0, 30.0];
pub const DEFAULT_SPARSITY_EDGES: [f64; 4] = [0.0, 0.02, 0.05, 0.1];

/// Report JSON schema version.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Reference image `R` and mask `M`; `Ω = {p : M(p)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseReference {
    pub reference: RgbImage,
    pub mask: Mask,
}

impl SparseReference {
    pub fn new(reference: RgbImage, mask: Mask) -> Result<Self> {
        if !reference.same_shape(&mask) {
            return Err(Error::ShapeMismatch {
                expected: reference.shape(),
                actual: mask.shape(),
            });
        }
        Ok(Self { reference, mask })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.reference.shape()
    }

    pub fn omega_size(&self) -> usize {
        self.mask.count_true()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.mask.coverage()
    }
}

fn check(pred: &RgbImage, r: &SparseReference) -> Result<usize> {
    if pred.shape() != r.shape() {
        return Err(Error::ShapeMismatch {
            expected: r.shape(),
            actual: pred.shape(),
        });
    }
    let n = r.omega_size();
    if n == 0 {
        return Err(Error::EmptyValidSet);
    }
    Ok(n)
}

fn omega_diffs<'a>(
    pred: &'a RgbImage,
    r: &'a SparseReference,
) -> impl Iterator<Item = [f64; 3]> + 'a {
    pred.iter()
        .zip(r.reference.iter())
        .zip(r.mask.iter())
        .filter(|(_, &m)| m)
        .map(|((p, q), _)| [p[0] - q[0], p[1] - q[1], p[2] - q[2]])
}

/// `(1/|Ω|) Σ_{p∈Ω} ‖Î(p) − R(p)‖² / 3`.
pub fn masked_mse(pred: &RgbImage, r: &SparseReference) -> Result<f64> {
    let n = check(pred, r)?;
    let sum: f64 = omega_diffs(pred, r)
        .map(|d| d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
        .sum();
    Ok(sum / 3.0 / n as f64)
}

/// `10·log₁₀(MAX² / masked_mse)`, capped at [`PSNR_CAP_DB`].
pub fn s_psnr(pred: &RgbImage, r: &SparseReference) -> Result<f64> {
    Ok(psnr_from_mse(masked_mse(pred, r)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        10.0 * (MAX_INTENSITY * MAX_INTENSITY / mse).log10()
    }
}

/// Mean absolute and root-mean-square error over `Ω × channels`.
pub fn s_mae_rmse(pred: &RgbImage, r: &SparseReference) -> Result<(f64, f64)> {
    let n = check(pred, r)?;
    let (mut abs, mut sq) = (0.0, 0.0);
    for d in omega_diffs(pred, r) {
        for v in d {
            abs += v.abs();
            sq += v * v;
        }
    }
    let m = 3.0 * n as f64;
    Ok((abs / m, (sq / m).sqrt()))
}

fn gaussian_window() -> [[f64; SSIM_WINDOW]; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            *v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            total += *v;
        }
    }
    for row in &mut g {
        for v in row {
            *v /= total;
        }
    }
    g
}

/// Masked SSIM on luma.
///
/// Per `Ω` pixel, window statistics use only `Ω` pixels inside the 11×11
/// Gaussian window (σ = 1.5), with weights renormalized over them. Pixels
/// whose window keeps less than half the Gaussian mass are skipped. The score
/// is the mean SSIM over the remaining pixels.
pub fn s_ssim(pred: &RgbImage, r: &SparseReference) -> Result<f64> {
    check(pred, r)?;
    let g = gaussian_window();
    let (h, w) = r.shape();
    let x = pred.map(luma);
    let y = r.reference.map(luma);
    let half = (SSIM_WINDOW / 2) as isize;
    let c1 = (SSIM_K1 * MAX_INTENSITY).powi(2);
    let c2 = (SSIM_K2 * MAX_INTENSITY).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for py in 0..h {
        for px in 0..w {
            if !*r.mask.get(px, py) {
                continue;
            }
            let taps = || {
                (-half..=half)
                    .flat_map(move |dy| (-half..=half).map(move |dx| (dx, dy)))
                    .filter_map(move |(dx, dy)| {
                        let (qx, qy) = (px as isize + dx, py as isize + dy);
                        if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                            return None;
                        }
                        let (qx, qy) = (qx as usize, qy as usize);
                        if !*r.mask.get(qx, qy) {
                            return None;
                        }
                        Some((g[(dy + half) as usize][(dx + half) as usize], qx, qy))
                    })
            };
            let wsum: f64 = taps().map(|t| t.0).sum();
            if wsum < SSIM_MIN_VALID_WEIGHT {
                continue;
            }
            let (mut mx, mut my) = (0.0, 0.0);
            for (wt, qx, qy) in taps() {
                mx += wt * x.get(qx, qy);
                my += wt * y.get(qx, qy);
            }
            mx /= wsum;
            my /= wsum;
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for (wt, qx, qy) in taps() {
                let (a, b) = (x.get(qx, qy) - mx, y.get(qx, qy) - my);
                vx += wt * a * a;
                vy += wt * b * b;
                cxy += wt * a * b;
            }
            vx /= wsum;
            vy /= wsum;
            cxy /= wsum;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoSsimWindows);
    }
    Ok(total / count as f64)
}

/// Seeded uniform subsample of the truth's finite-depth pixels.
/// `|Ω| = round(fraction · n_finite)`; pixels are drawn without replacement.
pub fn make_sparse_reference(
    truth: &RenderedView,
    subsample_fraction: f64,
    seed: u64,
) -> Result<SparseReference> {
    if !(subsample_fraction > 0.0 && subsample_fraction <= 1.0) {
        return Err(Error::OutOfRange {
            what: "subsample_fraction",
            value: subsample_fraction,
        });
    }
    let finite: Vec<usize> = truth
        .depth
        .iter()
        .enumerate()
        .filter(|(_, d)| d.is_finite())
        .map(|(i, _)| i)
        .collect();
    if finite.is_empty() {
        return Err(Error::NoFiniteDepth);
    }
    let k = (subsample_fraction * finite.len() as f64).round() as usize;
    if k == 0 {
        return Err(Error::EmptyValidSet);
    }
    let (h, w) = truth.rgb.shape();
    let mut mask = Grid::filled(w, h, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, finite.len(), k) {
        mask.as_mut_slice()[finite[i]] = true;
    }
    Ok(reference_from_mask(&truth.rgb, mask))
}

fn reference_from_mask(rgb: &RgbImage, mask: Mask) -> SparseReference {
    let (h, w) = rgb.shape();
    let reference = Grid::from_fn(w, h, |x, y| {
        if *mask.get(x, y) {
            *rgb.get(x, y)
        } else {
            [0.0; 3]
        }
    });
    SparseReference { reference, mask }
}

/// Uses a condition map's validity channel as `M` and its colors as `R`.
pub fn sparse_reference_from_condition(condition: &ConditionMap) -> SparseReference {
    reference_from_mask(&condition.rgb, condition.validity.clone())
}

/// Projects a colored cloud (e.g. a LiDAR sweep with sampled colors) into
/// the camera; `Ω` is exactly the set of pixels the rasterizer validates.
pub fn project_sparse_reference(
    cloud: &ColoredPointCloud,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> SparseReference {
    sparse_reference_from_condition(&rasterize(cloud, k, pose))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene: String,
    pub view: String,
    pub s_psnr: f64,
    /// `None` when no pixel has enough valid window support (very sparse references).
    pub s_ssim: Option<f64>,
    pub s_mae: f64,
    pub s_rmse: f64,
    pub valid_fraction: f64,
    pub pose_offset: f64,
}

/// All metrics of one prediction against one sparse reference.
pub fn evaluate(
    pred: &RgbImage,
    r: &SparseReference,
    pose_offset: f64,
    scene: impl Into<String>,
    view: impl Into<String>,
) -> Result<EvalRecord> {
    let (s_mae, s_rmse) = s_mae_rmse(pred, r)?;
    let s_ssim = match s_ssim(pred, r) {
        Ok(v) => Some(v),
        Err(Error::NoSsimWindows) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalRecord {
        scene: scene.into(),
        view: view.into(),
        s_psnr: s_psnr(pred, r)?,
        s_ssim,
        s_mae,
        s_rmse,
        valid_fraction: r.valid_fraction(),
        pose_offset,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub s_psnr: f64,
    /// Mean over the records that have an SSIM value.
    pub s_ssim: Option<f64>,
    pub s_mae: f64,
    pub s_rmse: f64,
    pub valid_fraction: f64,
    pub pose_offset: f64,
}

impl MetricMeans {
    /// Arithmetic means in record order; `None` for no records.
    pub fn of<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> Option<Self> {
        let mut n = 0usize;
        let mut acc = [0.0; 5];
        let (mut ssim_sum, mut ssim_n) = (0.0, 0usize);
        for r in records {
            n += 1;
            for (a, v) in
                acc.iter_mut()
                    .zip([r.s_psnr, r.s_mae, r.s_rmse, r.valid_fraction, r.pose_offset])
            {
                *a += v;
            }
            if let Some(v) = r.s_ssim {
                ssim_sum += v;
                ssim_n += 1;
            }
        }
        (n > 0).then(|| {
            let m = acc.map(|a| a / n as f64);
            Self {
                s_psnr: m[0],
                s_ssim: (ssim_n > 0).then(|| ssim_sum / ssim_n as f64),
                s_mae: m[1],
                s_rmse: m[2],
                valid_fraction: m[3],
                pose_offset: m[4],
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinAggregate {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub means: Option<MetricMeans>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedAxis {
    pub edges: Vec<f64>,
    pub bins: Vec<BinAggregate>,
    /// Records outside every bin.
    pub other: OtherBucket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtherBucket {
    pub count: usize,
    pub means: Option<MetricMeans>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub overall: MetricMeans,
    pub by_pose_offset: BinnedAxis,
    pub by_sparsity: BinnedAxis,
    pub records: Vec<EvalRecord>,
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2
        || edges.iter().any(|e| !e.is_finite())
        || edges.windows(2).any(|p| p[0] >= p[1])
    {
        return Err(Error::NonMonotoneBins(edges.to_vec()));
    }
    Ok(())
}

/// Bin of `v` for edges `e`: `[e_i, e_{i+1})`, the last bin closed.
pub fn bin_index(edges: &[f64], v: f64) -> Option<usize> {
    let n = edges.len().checked_sub(1)?;
    if n == 0 || !(v >= edges[0] && v <= edges[n]) {
        return None;
    }
    (0..n).find(|&i| v < edges[i + 1] || (i == n - 1 && v <= edges[n]))
}

fn bin_axis(records: &[EvalRecord], edges: &[f64], key: impl Fn(&EvalRecord) -> f64) -> BinnedAxis {
    let assignment: Vec<Option<usize>> = records.iter().map(|r| bin_index(edges, key(r))).collect();
    let members = |which: Option<usize>| -> Vec<&EvalRecord> {
        records
            .iter()
            .zip(&assignment)
            .filter(|(_, a)| **a == which)
            .map(|(r, _)| r)
            .collect()
    };
    let bins = (0..edges.len() - 1)
        .map(|i| {
            let m = members(Some(i));
            BinAggregate {
                lo: edges[i],
                hi: edges[i + 1],
                count: m.len(),
                means: MetricMeans::of(m),
            }
        })
        .collect();
    let other = members(None);
    BinnedAxis {
        edges: edges.to_vec(),
        bins,
        other: OtherBucket {
            count: other.len(),
            means: MetricMeans::of(other),
        },
    }
}

/// Per-bin means by pose offset and by valid fraction.
pub fn bin_and_aggregate(
    records: &[EvalRecord],
    offset_edges: &[f64],
    sparsity_edges: &[f64],
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    check_edges(offset_edges)?;
    check_edges(sparsity_edges)?;
    let by_pose_offset = bin_axis(records, offset_edges, |r| r.pose_offset);
    let by_sparsity = bin_axis(records, sparsity_edges, |r| r.valid_fraction);
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        overall: MetricMeans::of(records).expect("nonempty"),
        by_pose_offset,
        by_sparsity,
        records: records.to_vec(),
    })
}
