//! Mask-source ablation: trains the no-mask, random-box and reprojection-mask
//! variants on the same data and compares held-out extrapolated S-PSNR.
//!
//! ```text
//! cargo run --release --example ablation -- [config.json] [out_dir] [steps]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use geoview::io;
use geoview::pipeline::{
    build_dataset, build_training_library, run_ablation, write_run_record, PipelineConfig,
};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let config_path = args.next().map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../configs/reference.json"
        ))
    });
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("geoview-ablation"));
    let mut config = PipelineConfig::load(&config_path)?;
    if let Some(steps) = args.next() {
        config.train.steps = steps.parse()?;
    }

    let started = Instant::now();
    let manifest = build_dataset(&out.join("dataset"), &config.dataset)?;
    let manifest = io::read_manifest(&manifest.root)?;
    let library = build_training_library(&manifest, &config.library)?;
    println!(
        "dataset: {} views, library: {} masks (mean coverage {:.3})",
        manifest.entries.len(),
        library.len(),
        library.mean_coverage()
    );
    write_run_record(&out, "ablation", &config)?;
    let report = run_ablation(&manifest, &library, &config, &out, |v, step, loss| {
        if step % 250 == 0 {
            println!(
                "  {} step {step:5} loss {loss:.4} ({:.0?})",
                v.name(),
                started.elapsed()
            );
        }
    })?;

    println!(
        "{:<4} {:<22} {:>9} {:>8} {:>8}",
        "", "mask source", "S-PSNR", "S-SSIM", "S-MAE"
    );
    for row in &report.rows {
        println!(
            "{:<4} {:<22} {:>9.3} {:>8.4} {:>8.4}",
            row.variant.name(),
            row.description,
            row.overall.s_psnr,
            row.overall.s_ssim.unwrap_or(f64::NAN),
            row.overall.s_mae
        );
    }
    for v in ["V1", "V3"] {
        let r = io::read_report(&out.join(format!("eval_{v}.json")))?;
        let bins: Vec<String> = r
            .by_pose_offset
            .bins
            .iter()
            .map(|b| b.means.map_or("-".into(), |m| format!("{:.2}", m.s_psnr)))
            .collect();
        println!("{v} by pose offset: {}", bins.join(" "));
    }
    println!("done in {:.0?}", started.elapsed());
    Ok(())
}
