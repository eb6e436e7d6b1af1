//! Reprojects a rendered view of a procedural scene into cameras turned
//! further and further away, and writes the condition maps as PNGs.
//!
//! ```text
//! cargo run --release --example reprojection -- [out_dir]
//! ```

use std::path::PathBuf;

use anyhow::Result;
use geoview::gar::build_condition;
use geoview::geometry::{
    make_extrapolated_pose, pose_offset_degrees, CameraIntrinsics, CameraPose,
};
use geoview::io;
use geoview::scene::{generate_scene, render_scene};
use nalgebra::Vector3;

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("geoview-reprojection"));
    let scene = generate_scene(3, 6)?;
    let k = CameraIntrinsics::with_fov(128, 96, 80.0)?;
    let front = CameraPose::driving(Vector3::new(0.0, 0.0, 1.6), 0.0)?;
    let side = front.turned(45.0)?;

    let source = render_scene(&scene, &k, &front);
    io::write_rgb_png(&out.join("source.png"), &source.rgb)?;

    println!(
        "{:>8} {:>8} {:>9} {:>10}",
        "angle", "lateral", "offset", "coverage"
    );
    for (i, (angle, lateral)) in [(0.0, 0.0), (0.2, 0.0), (0.5, 0.0), (0.5, 1.0), (1.0, -1.0)]
        .into_iter()
        .enumerate()
    {
        let target = make_extrapolated_pose(&front, &side, angle, lateral)?;
        let condition = build_condition(&source, &k, &target)?;
        io::write_condition(&out.join(format!("condition_{i}")), &condition)?;
        // Dense ground truth for comparison.
        io::write_rgb_png(
            &out.join(format!("truth_{i}.png")),
            &render_scene(&scene, &k, &target).rgb,
        )?;
        println!(
            "{angle:>8.2} {lateral:>8.2} {:>8.2}° {:>10.3}",
            pose_offset_degrees(&front, &target),
            condition.valid_fraction()
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
