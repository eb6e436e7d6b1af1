//! Drives every `geoview` subcommand once on a tiny dataset.

use std::path::Path;
use std::process::Command;

use geoview::io;
use geoview::pipeline::PipelineConfig;

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_geoview"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "geoview {}: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn subcommands_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut config = PipelineConfig::small();
    config.dataset.num_scenes = 2;
    io::write_json(&d.join("config.json"), &config).unwrap();
    io::write_json(&d.join("train.json"), &config.train).unwrap();

    let data = d.join("data");
    run(&[
        "pipeline",
        "build-dataset",
        "--config",
        p(&d.join("config.json")),
        "--out",
        p(&data),
    ]);
    assert!(data.join("run.json").is_file());
    let view0 = data.join("scene_000/view_0");
    let view1 = data.join("scene_000/view_1");

    run(&[
        "reproject",
        "--camera",
        p(&view0.join("camera.json")),
        "--pointmap",
        p(&view0.join("pointmap.gpm")),
        "--image",
        p(&view0.join("image.png")),
        "--target-camera",
        p(&view1.join("camera.json")),
        "--out",
        p(&d.join("warped")),
    ]);
    let warped = io::read_condition(&d.join("warped")).unwrap();
    assert_eq!(warped.shape(), (32, 32));

    run(&[
        "gen-masks",
        "--scenes",
        "2",
        "--offsets",
        "0.25:-1,0.5:1",
        "--resolution",
        "32",
        "--out",
        p(&d.join("masks")),
    ]);
    let library = io::read_mask_library(&d.join("masks")).unwrap();
    assert_eq!(library.len(), 2 * 3 * 2);

    let stdout = run(&[
        "inject",
        "--cond",
        p(&d.join("warped")),
        "--lib",
        p(&d.join("masks")),
        "--p",
        "1.0",
        "--seed",
        "3",
        "--out",
        p(&d.join("injected")),
    ]);
    assert!(stdout.starts_with("applied mask"));
    let injected = io::read_condition(&d.join("injected")).unwrap();
    assert!(injected.validity.count_true() <= warped.validity.count_true());

    run(&[
        "train",
        "--pairs",
        p(&data),
        "--masks",
        p(&d.join("masks")),
        "--config",
        p(&d.join("train.json")),
        "--out",
        p(&d.join("model.gevs")),
    ]);
    run(&[
        "sample",
        "--ckpt",
        p(&d.join("model.gevs")),
        "--cond",
        p(&d.join("warped")),
        "--steps",
        "4",
        "--seed",
        "1",
        "--config",
        p(&d.join("train.json")),
        "--out",
        p(&d.join("pred/view.png")),
    ]);

    // Sparse reference for the same view: the target image under a checkerboard mask.
    let truth = io::read_rgb_png(&view1.join("image.png")).unwrap();
    io::write_rgb_png(&d.join("ref/view.png"), &truth).unwrap();
    io::write_mask_png(
        &d.join("mask/view.png"),
        &geoview::raster::Grid::from_fn(32, 32, |x, y| (x + y) % 2 == 0),
    )
    .unwrap();
    std::fs::write(d.join("offsets.json"), br#"{"view.png": 45.0}"#).unwrap();
    run(&[
        "metrics",
        "--pred",
        p(&d.join("pred")),
        "--ref",
        p(&d.join("ref")),
        "--mask",
        p(&d.join("mask")),
        "--offsets",
        p(&d.join("offsets.json")),
        "--bins-offset",
        "0,30,60",
        "--out",
        p(&d.join("report.json")),
    ]);
    let report = io::read_report(&d.join("report.json")).unwrap();
    assert_eq!(report.records.len(), 1);
    assert_eq!(report.by_pose_offset.bins[1].count, 1);

    run(&[
        "pipeline",
        "eval-extrap",
        "--config",
        p(&d.join("config.json")),
        "--dataset",
        p(&data),
        "--ckpt",
        p(&d.join("model.gevs")),
        "--out",
        p(&d.join("eval")),
    ]);
    assert!(d.join("eval/report.json").is_file() && d.join("eval/run.json").is_file());

    run(&[
        "pipeline",
        "ablation",
        "--config",
        p(&d.join("config.json")),
        "--dataset",
        p(&data),
        "--out",
        p(&d.join("ablation")),
    ]);
    assert!(d.join("ablation/ablation.json").is_file());
}
