//! Compares in-manifold and extrapolated evaluation of one trained model:
//! quality should fall as the target camera leaves the recorded trajectory.
//!
//! ```text
//! cargo run --release --example extrapolation_eval -- [out_dir] [steps]
//! ```

use std::path::PathBuf;

use anyhow::Result;
use geoview::diffusion::{train_denoiser, Architecture};
use geoview::io::{self, Split};
use geoview::lpsr::MetricsReport;
use geoview::pipeline::{
    build_dataset, build_training_library, load_training_pairs, run_extrapolation_eval,
    run_in_manifold_eval, PipelineConfig,
};

fn show(name: &str, report: &MetricsReport) {
    println!(
        "{name}: S-PSNR {:.2} dB over {} views",
        report.overall.s_psnr,
        report.records.len()
    );
    for b in &report.by_pose_offset.bins {
        if let Some(m) = b.means {
            println!(
                "  offset [{:>4}, {:>4})  n={:<3} {:.2} dB",
                b.lo, b.hi, b.count, m.s_psnr
            );
        }
    }
}

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("geoview-extrap"));
    let mut config = PipelineConfig::small();
    config.dataset.num_scenes = 10;
    config.dataset.test_scenes = 3;
    config.train.steps = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1500);
    config.train.architecture = Architecture::default();
    config.eval.angle_fractions = vec![0.05, 0.17, 0.28, 0.39, 0.55];
    config.eval.lateral_offsets = vec![-1.0, 1.0];

    let manifest = build_dataset(&out.join("dataset"), &config.dataset)?;
    let library = build_training_library(&manifest, &config.library)?;
    let pairs = load_training_pairs(&manifest, Split::Train)?;
    let model = train_denoiser(&pairs, Some(&library), &config.train, |_, _| {})?.model;

    let in_manifold = run_in_manifold_eval(&manifest, &model, &config)?;
    let extrapolated = run_extrapolation_eval(&manifest, &model, &config)?;
    show("in-manifold", &in_manifold);
    show("extrapolated", &extrapolated);
    io::write_report(&out.join("in_manifold.json"), &in_manifold)?;
    io::write_report(&out.join("extrapolated.json"), &extrapolated)?;
    println!("wrote {}", out.display());
    Ok(())
}
