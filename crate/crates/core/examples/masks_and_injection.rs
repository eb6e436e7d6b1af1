//! Harvests a reprojection artifact-mask library and runs two-stage
//! injection on one condition map, next to a random-box mask of equal area.
//!
//! ```text
//! cargo run --release --example masks_and_injection -- [out_dir]
//! ```

use std::path::PathBuf;

use anyhow::Result;
use geoview::artifact::{apply_mask, build_mask_library, inject_artifact, make_random_box_mask};
use geoview::gar::build_condition;
use geoview::geometry::{CameraIntrinsics, CameraPose};
use geoview::io;
use geoview::scene::{generate_scene, render_scene};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("geoview-masks"));
    let k = CameraIntrinsics::with_fov(64, 64, 80.0)?;
    let rig = [0.0, 45.0, -45.0]
        .into_iter()
        .map(|yaw| Ok((k, CameraPose::driving(Vector3::new(0.0, 0.0, 1.6), yaw)?)))
        .collect::<Result<Vec<_>>>()?;
    let scenes = (0..6)
        .map(|s| generate_scene(100 + s, 6))
        .collect::<geoview::Result<Vec<_>>>()?;
    let offsets = [(0.1, -1.0), (0.3, 0.0), (0.5, 1.0)];

    let library = build_mask_library(&scenes, &rig, &offsets, (64, 64), 5)?;
    println!(
        "{} masks, mean coverage {:.3}",
        library.len(),
        library.mean_coverage()
    );
    io::write_mask_library(&out.join("library"), &library)?;

    let view = render_scene(&scenes[0], &k, &rig[0].1);
    let condition = build_condition(&view, &k, &rig[0].1)?;
    io::write_condition(&out.join("clean"), &condition)?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut fired = 0;
    for draw in 0..8u64 {
        let (injected, index) = inject_artifact(&condition, &library, 0.4, &mut rng)?;
        if let Some(i) = index {
            fired += 1;
            let mask = &library.masks()[i];
            println!(
                "draw {draw}: mask {i} drops {:.1}% of pixels",
                100.0 * mask.drop_fraction()
            );
            io::write_condition(&out.join(format!("injected_{draw}")), &injected)?;

            if mask.drop_fraction() > 0.0 {
                let boxes = make_random_box_mask((64, 64), mask.drop_fraction(), draw)?;
                io::write_condition(
                    &out.join(format!("boxed_{draw}")),
                    &apply_mask(&condition, &boxes.mask),
                )?;
            }
        } else {
            println!("draw {draw}: untouched");
        }
    }
    println!("{fired}/8 draws perturbed; wrote {}", out.display());
    Ok(())
}
