//! Trains a small conditional denoiser on a procedural dataset with
//! reprojection-mask injection, then samples a held-out view at several
//! guidance scales.
//!
//! ```text
//! cargo run --release --example train_and_sample -- [out_dir] [steps]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use geoview::diffusion::{sample, train_denoiser, Architecture, SamplerOptions};
use geoview::io::{self, Split};
use geoview::lpsr::{evaluate, make_sparse_reference};
use geoview::pipeline::{
    build_dataset, build_training_library, load_training_pairs, load_view, PipelineConfig,
};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("geoview-train"));
    let mut config = PipelineConfig::small();
    config.dataset.num_scenes = 10;
    config.dataset.test_scenes = 2;
    config.train.steps = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1500);
    config.train.architecture = Architecture::default();

    let manifest = build_dataset(&out.join("dataset"), &config.dataset)?;
    let library = build_training_library(&manifest, &config.library)?;
    let pairs = load_training_pairs(&manifest, Split::Train)?;
    println!("{} training pairs, {} masks", pairs.len(), library.len());

    let started = Instant::now();
    let outcome = train_denoiser(&pairs, Some(&library), &config.train, |step, loss| {
        if step % 100 == 0 {
            println!("step {step:5} loss {loss:.4}");
        }
    })?;
    println!(
        "{} parameters trained in {:.1?}, {} injected conditions",
        outcome.model.param_count(),
        started.elapsed(),
        outcome.injected
    );
    io::write_checkpoint(&out.join("model.gevs"), &outcome.model)?;

    let entry = manifest
        .entries
        .iter()
        .find(|e| e.split == Split::Test)
        .context("no test views")?;
    let condition =
        io::read_condition(&manifest.resolve(entry.condition.as_ref().context("no condition")?))?;
    let truth = load_view(&manifest, entry)?;
    let reference = make_sparse_reference(&truth, 0.1, 0)?;
    let schedule = config.train.schedule()?;
    for s_cfg in [0.0, 1.0, 1.5, 3.0] {
        let options = SamplerOptions {
            num_steps: 20,
            guidance_scale: s_cfg,
            seed: 1,
            stochastic: false,
        };
        let image = sample(&outcome.model, &condition, &schedule, &options)?.image;
        let record = evaluate(&image, &reference, 0.0, &entry.scene_id, &entry.view_id)?;
        println!("s_cfg {s_cfg:.1}: S-PSNR {:.2} dB", record.s_psnr);
        io::write_rgb_png(&out.join(format!("sample_cfg{s_cfg:.1}.png")), &image)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
