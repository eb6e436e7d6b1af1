//! Command-line front end over the `geoview` library.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use geoview::artifact::{
    build_mask_library_with_pivot, inject_artifact, DEFAULT_INJECTION_PROBABILITY,
    DEFAULT_PIVOT_DEGREES,
};
use geoview::diffusion::{sample, train_denoiser, SamplerOptions, TrainConfig};
use geoview::gar::{point_map_to_cloud, rasterize};
use geoview::io::{self, Split};
use geoview::lpsr::{bin_and_aggregate, evaluate, SparseReference};
use geoview::pipeline::{
    build_dataset, build_training_library, load_training_pairs, rig_intrinsics, rig_pose,
    run_ablation, run_extrapolation_eval, write_run_record, PipelineConfig,
};
use geoview::scene::generate_scene;

#[derive(Parser)]
#[command(
    name = "geoview",
    version,
    about = "Geometry-aware extrapolated view synthesis toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reproject an observed view into a target camera.
    Reproject {
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        pointmap: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        target_camera: PathBuf,
        /// Output prefix for `<out>.png`, `<out>_mask.png`, `<out>.gdm`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a reprojection artifact-mask library from procedural scenes.
    GenMasks {
        #[arg(long)]
        scenes: usize,
        /// Comma-separated `angle_fraction:lateral_offset` pairs, e.g. `0.1:-1,0.5:1`.
        #[arg(long, allow_hyphen_values = true)]
        offsets: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 3)]
        cameras: usize,
        #[arg(long, default_value_t = 6)]
        complexity: usize,
        #[arg(long, default_value_t = 80.0)]
        fov: f64,
        #[arg(long, default_value_t = DEFAULT_PIVOT_DEGREES)]
        pivot: f64,
    },
    /// Two-stage artifact injection into one condition map.
    Inject {
        #[arg(long)]
        cond: PathBuf,
        #[arg(long)]
        lib: PathBuf,
        #[arg(long, default_value_t = DEFAULT_INJECTION_PROBABILITY)]
        p: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser on a dataset's training split.
    Train {
        /// Dataset directory (containing manifest.json).
        #[arg(long)]
        pairs: PathBuf,
        /// Mask library directory; omit to train without injection.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample an image for a condition map.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cond: PathBuf,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        #[arg(long, default_value_t = 1.5)]
        cfg: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training config whose noise schedule the checkpoint was trained with.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sparse-reference metrics over matching PNG files in three directories.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Optional JSON object mapping file name to pose offset in degrees.
        #[arg(long)]
        offsets: Option<PathBuf>,
        #[arg(long, default_value = "0,5,10,15,20,30")]
        bins_offset: String,
        #[arg(long, default_value = "0,0.02,0.05,0.1")]
        bins_sparsity: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// End-to-end experiments.
    Pipeline {
        #[command(subcommand)]
        command: PipelineCommand,
    },
}

#[derive(Subcommand)]
enum PipelineCommand {
    BuildDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    EvalExtrap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("bad number {v:?}"))
        })
        .collect()
}

fn parse_offsets(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(',')
        .map(|pair| {
            let (a, l) = pair
                .split_once(':')
                .with_context(|| format!("offset {pair:?} is not angle_fraction:lateral"))?;
            Ok((a.trim().parse()?, l.trim().parse()?))
        })
        .collect()
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Reproject {
            camera,
            pointmap,
            image,
            target_camera,
            out,
        } => {
            let (k, _) = io::read_camera(&camera)?;
            let pm = io::read_point_map(&pointmap)?;
            let rgb = io::read_rgb_png(&image)?;
            if pm.shape() != k.shape() || rgb.shape() != k.shape() {
                bail!("point map, image and camera sizes differ");
            }
            let (tk, tpose) = io::read_camera(&target_camera)?;
            let cloud = point_map_to_cloud(&pm, &rgb)?;
            let condition = rasterize(&cloud, &tk, &tpose);
            io::write_condition(&out, &condition)?;
            println!("valid fraction {:.4}", condition.valid_fraction());
        }
        Command::GenMasks {
            scenes,
            offsets,
            out,
            seed,
            resolution,
            cameras,
            complexity,
            fov,
            pivot,
        } => {
            let dataset = geoview::pipeline::DatasetConfig {
                num_scenes: scenes,
                cameras_per_scene: cameras,
                resolution: (resolution, resolution),
                seed,
                test_scenes: 0,
                scene_complexity: complexity,
                horizontal_fov_degrees: fov,
            };
            let k = rig_intrinsics(&dataset)?;
            let scene_list = geoview::pipeline::scene_seeds(&dataset)
                .into_iter()
                .map(|s| generate_scene(s, complexity))
                .collect::<geoview::Result<Vec<_>>>()?;
            let rig = (0..cameras)
                .map(|c| Ok((k, rig_pose(c)?)))
                .collect::<geoview::Result<Vec<_>>>()?;
            let library = build_mask_library_with_pivot(
                &scene_list,
                &rig,
                &parse_offsets(&offsets)?,
                (resolution, resolution),
                seed,
                pivot,
            )?;
            io::write_mask_library(&out, &library)?;
            println!(
                "{} masks, mean coverage {:.4}",
                library.len(),
                library.mean_coverage()
            );
        }
        Command::Inject {
            cond,
            lib,
            p,
            seed,
            out,
        } => {
            let condition = io::read_condition(&cond)?;
            let library = io::read_mask_library(&lib)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (injected, index) = inject_artifact(&condition, &library, p, &mut rng)?;
            io::write_condition(&out, &injected)?;
            match index {
                Some(i) => println!("applied mask {i}"),
                None => println!("gate closed; condition unchanged"),
            }
        }
        Command::Train {
            pairs,
            masks,
            config,
            out,
        } => {
            let config: TrainConfig = io::read_json(&config)?;
            let manifest = io::read_manifest(&pairs)?;
            let pairs = load_training_pairs(&manifest, Split::Train)?;
            let library = masks.as_deref().map(io::read_mask_library).transpose()?;
            let outcome = train_denoiser(&pairs, library.as_ref(), &config, |step, loss| {
                if step % 100 == 0 {
                    println!("step {step:6} loss {loss:.5}");
                }
            })?;
            io::write_checkpoint(&out, &outcome.model)?;
            println!(
                "final loss {:.5}, injected {} samples",
                outcome.losses.last().copied().unwrap_or(f64::NAN),
                outcome.injected
            );
        }
        Command::Sample {
            ckpt,
            cond,
            steps,
            cfg,
            seed,
            config,
            out,
        } => {
            let model = io::read_checkpoint(&ckpt)?;
            let condition = io::read_condition(&cond)?;
            let train = match config {
                Some(p) => io::read_json::<TrainConfig>(&p)?,
                None => TrainConfig::default(),
            };
            let options = SamplerOptions {
                num_steps: steps,
                guidance_scale: cfg,
                seed,
                stochastic: false,
            };
            let result = sample(&model, &condition, &train.schedule()?, &options)?;
            io::write_rgb_png(&out, &result.image)?;
            println!(
                "steps {} s_cfg {} seed {}",
                result.num_steps, result.s_cfg, result.seed
            );
        }
        Command::Metrics {
            pred,
            reference,
            mask,
            offsets,
            bins_offset,
            bins_sparsity,
            out,
        } => {
            let offsets: BTreeMap<String, f64> = match offsets {
                Some(p) => io::read_json(&p)?,
                None => BTreeMap::new(),
            };
            let mut records = Vec::new();
            for name in png_names(&pred)? {
                let r = SparseReference::new(
                    io::read_rgb_png(&reference.join(&name))?,
                    io::read_mask_png(&mask.join(&name))?,
                )?;
                let p = io::read_rgb_png(&pred.join(&name))?;
                let offset = offsets.get(&name).copied().unwrap_or(0.0);
                let stem = name.trim_end_matches(".png");
                records.push(evaluate(&p, &r, offset, stem, stem)?);
            }
            let report = bin_and_aggregate(
                &records,
                &parse_list(&bins_offset)?,
                &parse_list(&bins_sparsity)?,
            )?;
            io::write_report(&out, &report)?;
            println!(
                "{} views, mean S-PSNR {:.3} dB",
                records.len(),
                report.overall.s_psnr
            );
        }
        Command::Pipeline { command } => match command {
            PipelineCommand::BuildDataset { config, out } => {
                let config = PipelineConfig::load(&config)?;
                let manifest = build_dataset(&out, &config.dataset)?;
                write_run_record(&out, "pipeline build-dataset", &config)?;
                println!(
                    "{} views written to {}",
                    manifest.entries.len(),
                    out.display()
                );
            }
            PipelineCommand::Ablation {
                config,
                dataset,
                out,
            } => {
                let config = PipelineConfig::load(&config)?;
                let manifest = io::read_manifest(&dataset)?;
                let library = build_training_library(&manifest, &config.library)?;
                write_run_record(&out, "pipeline ablation", &config)?;
                let report = run_ablation(&manifest, &library, &config, &out, |v, step, loss| {
                    if step % 250 == 0 {
                        println!("{} step {step:6} loss {loss:.5}", v.name());
                    }
                })?;
                for row in report.rows {
                    println!(
                        "{} {:<24} S-PSNR {:.3}",
                        row.variant.name(),
                        row.description,
                        row.overall.s_psnr
                    );
                }
            }
            PipelineCommand::EvalExtrap {
                config,
                dataset,
                ckpt,
                out,
            } => {
                let config = PipelineConfig::load(&config)?;
                let manifest = io::read_manifest(&dataset)?;
                let model = io::read_checkpoint(&ckpt)?;
                let report = run_extrapolation_eval(&manifest, &model, &config)?;
                fs::create_dir_all(&out)?;
                write_run_record(&out, "pipeline eval-extrap", &config)?;
                io::write_report(&out.join("report.json"), &report)?;
                for b in &report.by_pose_offset.bins {
                    let psnr = b
                        .means
                        .map_or("-".to_string(), |m| format!("{:.3}", m.s_psnr));
                    println!("[{:>4}, {:>4}) n={:<4} S-PSNR {psnr}", b.lo, b.hi, b.count);
                }
            }
        },
    }
    Ok(())
}
