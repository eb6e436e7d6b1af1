//! Sparse-reference metrics: scores degraded renderings of one view against
//! references of decreasing density, then bins the records.
//!
//! ```text
//! cargo run --release --example metrics
//! ```

use anyhow::Result;
use geoview::geometry::{CameraIntrinsics, CameraPose};
use geoview::lpsr::{
    bin_and_aggregate, evaluate, make_sparse_reference, DEFAULT_OFFSET_EDGES,
    DEFAULT_SPARSITY_EDGES,
};
use geoview::raster::RgbImage;
use geoview::scene::{generate_scene, render_scene};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy(img: &RgbImage, sigma: f64, rng: &mut impl Rng) -> RgbImage {
    img.map(|p| p.map(|c| (c + sigma * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0)))
}

fn main() -> Result<()> {
    let scene = generate_scene(21, 6)?;
    let k = CameraIntrinsics::with_fov(64, 64, 80.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut records = Vec::new();

    println!(
        "{:>6} {:>8} {:>9} {:>8} {:>8}",
        "noise", "density", "S-PSNR", "S-SSIM", "S-MAE"
    );
    for (i, yaw) in [0.0, 8.0, 16.0, 24.0].into_iter().enumerate() {
        let truth = render_scene(
            &scene,
            &k,
            &CameraPose::driving(Vector3::new(0.0, 0.0, 1.6), yaw)?,
        );
        let sigma = 0.05 * (i + 1) as f64;
        let pred = noisy(&truth.rgb, sigma, &mut rng);
        for (j, density) in [0.03, 0.08, 0.5].into_iter().enumerate() {
            let reference = make_sparse_reference(&truth, density, (10 * i + j) as u64)?;
            // The yaw stands in for a pose offset so the binning has something to sort.
            let r = evaluate(&pred, &reference, yaw, "scene_021", format!("yaw{yaw}"))?;
            println!(
                "{sigma:>6.2} {:>8.3} {:>9.2} {:>8} {:>8.4}",
                r.valid_fraction,
                r.s_psnr,
                r.s_ssim.map_or("-".into(), |s| format!("{s:.4}")),
                r.s_mae
            );
            records.push(r);
        }
    }

    let report = bin_and_aggregate(&records, &DEFAULT_OFFSET_EDGES, &DEFAULT_SPARSITY_EDGES)?;
    println!("\nby pose offset:");
    for b in &report.by_pose_offset.bins {
        let psnr = b.means.map_or("-".into(), |m| format!("{:.2}", m.s_psnr));
        println!(
            "  [{:>4}, {:>4})  n={:<3} S-PSNR {psnr}",
            b.lo, b.hi, b.count
        );
    }
    println!("by sparsity:");
    for b in &report.by_sparsity.bins {
        let psnr = b.means.map_or("-".into(), |m| format!("{:.2}", m.s_psnr));
        println!(
            "  [{:>5}, {:>5})  n={:<3} S-PSNR {psnr}",
            b.lo, b.hi, b.count
        );
    }
    println!(
        "outside every sparsity bin: {}",
        report.by_sparsity.other.count
    );
    Ok(())
}
