//! End-to-end experiments: dataset construction, artifact-aware training,
//! extrapolated evaluation and the mask-source ablation.
//!
//! Every stage reads and writes through [`crate::io`], and every random draw
//! comes from a seed in [`PipelineConfig`], so a run is reproducible byte for
//! byte.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{
    build_mask_library_with_pivot, make_random_box_mask, ArtifactMask, MaskLibrary, MaskProvenance,
};
use crate::diffusion::{
    sample, DenoiserModel, SamplerOptions, TrainConfig, TrainOutcome, TrainingPair,
};
use crate::error::{Error, Result};
use crate::gar::{build_condition, ConditionMap};
use crate::geometry::{make_extrapolated_pose, pose_offset_degrees, CameraIntrinsics, CameraPose};
use crate::io::{self, DatasetManifest, DepthSidecar, ManifestEntry, Split};
use crate::lpsr::{
    self, bin_and_aggregate, evaluate, make_sparse_reference, EvalRecord, MetricMeans,
    MetricsReport,
};
use crate::raster::{Grid, RgbImage};
use crate::scene::{generate_scene, render_scene, view_to_point_map, RenderedView, Scene};

pub const CONFIG_VERSION: u32 = 1;
pub const RUN_FILE: &str = "run.json";

/// Heading of rig camera `k` within its frame.
const RIG_YAWS: [f64; 3] = [0.0, 45.0, -45.0];
const RIG_HEIGHT: f64 = 1.6;
/// Forward spacing between consecutive rig frames, meters.
const RIG_FRAME_SPACING: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_scenes: usize,
    pub cameras_per_scene: usize,
    /// `(height, width)`; both multiples of 4.
    pub resolution: (usize, usize),
    pub seed: u64,
    /// The last `test_scenes` scenes form the held-out split.
    pub test_scenes: usize,
    pub scene_complexity: usize,
    pub horizontal_fov_degrees: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibrarySettings {
    /// `(angle_fraction, lateral_offset)` virtual offsets per source camera.
    pub virtual_offsets: Vec<(f64, f64)>,
    pub pivot_degrees: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Fractions of the way from the front camera toward a side camera.
    pub angle_fractions: Vec<f64>,
    pub lateral_offsets: Vec<f64>,
    /// Sparse-reference subsample fractions of the finite-depth pixels;
    /// targets cycle through them.
    pub reference_fractions: Vec<f64>,
    pub reference_seed: u64,
    pub sampler: SamplerOptions,
    pub offset_edges: Vec<f64>,
    pub sparsity_edges: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub config_version: u32,
    pub dataset: DatasetConfig,
    pub library: LibrarySettings,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = io::read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config_version {} (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        let d = &self.dataset;
        if d.num_scenes == 0 || d.cameras_per_scene == 0 {
            return Err(Error::InvalidConfig(
                "num_scenes and cameras_per_scene must be positive".into(),
            ));
        }
        if d.test_scenes == 0 || d.test_scenes >= d.num_scenes {
            return Err(Error::InvalidConfig(
                "test_scenes must be in 1..num_scenes".into(),
            ));
        }
        if d.cameras_per_scene < 2 {
            return Err(Error::InvalidConfig(
                "extrapolated evaluation needs at least two cameras per scene".into(),
            ));
        }
        let e = &self.eval;
        if e.angle_fractions.is_empty()
            || e.lateral_offsets.is_empty()
            || e.reference_fractions.is_empty()
        {
            return Err(Error::InvalidConfig(
                "evaluation offsets and reference fractions must be nonempty".into(),
            ));
        }
        self.train.validate()
    }

    /// A seconds-scale configuration for smoke runs and tests.
    pub fn small() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            dataset: DatasetConfig {
                num_scenes: 4,
                cameras_per_scene: 3,
                resolution: (32, 32),
                seed: 1,
                test_scenes: 1,
                scene_complexity: 4,
                horizontal_fov_degrees: 80.0,
            },
            library: LibrarySettings {
                virtual_offsets: vec![(0.25, -1.0), (0.5, 1.0)],
                pivot_degrees: crate::artifact::DEFAULT_PIVOT_DEGREES,
                seed: 2,
            },
            train: TrainConfig {
                steps: 20,
                batch_size: 4,
                seed: 3,
                architecture: crate::diffusion::Architecture::tiny(),
                ..TrainConfig::default()
            },
            eval: EvalConfig {
                angle_fractions: vec![0.05, 0.5],
                lateral_offsets: vec![1.0],
                reference_fractions: vec![0.05, 0.1],
                reference_seed: 4,
                sampler: SamplerOptions {
                    num_steps: 5,
                    seed: 5,
                    ..SamplerOptions::default()
                },
                offset_edges: lpsr::DEFAULT_OFFSET_EDGES.to_vec(),
                sparsity_edges: lpsr::DEFAULT_SPARSITY_EDGES.to_vec(),
            },
        }
    }
}

/// Intrinsics shared by every rig camera.
pub fn rig_intrinsics(config: &DatasetConfig) -> Result<CameraIntrinsics> {
    let (h, w) = config.resolution;
    let k = CameraIntrinsics::with_fov(w, h, config.horizontal_fov_degrees)?;
    Ok(k)
}

/// Rig camera `k`: frame `k / 3` sits `2·frame` meters forward; within a
/// frame the cameras look ahead, 45° left and 45° right.
pub fn rig_pose(camera_index: usize) -> Result<CameraPose> {
    let frame = camera_index / RIG_YAWS.len();
    let yaw = RIG_YAWS[camera_index % RIG_YAWS.len()];
    CameraPose::driving(
        nalgebra::Vector3::new(RIG_FRAME_SPACING * frame as f64, 0.0, RIG_HEIGHT),
        yaw,
    )
}

/// Per-scene generator seeds, drawn in order from the dataset seed.
pub fn scene_seeds(config: &DatasetConfig) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.num_scenes).map(|_| rng.random()).collect()
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:03}")
}

pub fn view_id(camera_index: usize) -> String {
    format!("view_{camera_index}")
}

fn check_resolution(resolution: (usize, usize)) -> Result<()> {
    let (h, w) = resolution;
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidConfig(format!(
            "resolution {h}×{w} must be positive multiples of 4"
        )));
    }
    Ok(())
}

/// Generates scenes, renders the rig views and writes `u = v` training pairs.
///
/// Layout under `root`: `manifest.json`, and per view
/// `scene_XXX/view_K/{camera.json, image.png, depth.gdm, pointmap.gpm, condition{.png,_mask.png,.gdm}}`
/// next to `scene_XXX/scene.json`.
pub fn build_dataset(root: &Path, config: &DatasetConfig) -> Result<DatasetManifest> {
    check_resolution(config.resolution)?;
    if config.num_scenes == 0 || config.cameras_per_scene == 0 {
        return Err(Error::InvalidConfig("counts must be positive".into()));
    }
    let k = rig_intrinsics(config)?;
    let mut entries = Vec::new();
    for (si, seed) in scene_seeds(config).into_iter().enumerate() {
        let scene = generate_scene(seed, config.scene_complexity)?;
        let sid = scene_id(si);
        let scene_rel = PathBuf::from(&sid).join("scene.json");
        io::write_json(&root.join(&scene_rel), &scene)?;
        let split = if si >= config.num_scenes - config.test_scenes.min(config.num_scenes) {
            Split::Test
        } else {
            Split::Train
        };
        for ci in 0..config.cameras_per_scene {
            let pose = rig_pose(ci)?;
            let view = render_scene(&scene, &k, &pose);
            let vid = view_id(ci);
            let dir = PathBuf::from(&sid).join(&vid);
            let rel = |name: &str| dir.join(name);
            io::write_camera(&root.join(rel("camera.json")), &k, &pose)?;
            io::write_rgb_png(&root.join(rel("image.png")), &view.rgb)?;
            io::write_depth_map(
                &root.join(rel("depth.gdm")),
                &DepthSidecar {
                    depth: view.depth.clone(),
                    validity: view.finite_depth_mask(),
                },
            )?;
            io::write_point_map(&root.join(rel("pointmap.gpm")), &view_to_point_map(&view)?)?;
            let condition = build_condition(&view, &k, &pose)?;
            io::write_condition(&root.join(rel("condition")), &condition)?;
            entries.push(ManifestEntry {
                scene_id: sid.clone(),
                view_id: vid,
                split,
                scene: scene_rel.clone(),
                camera: rel("camera.json"),
                image: rel("image.png"),
                depth: rel("depth.gdm"),
                pointmap: rel("pointmap.gpm"),
                condition: Some(rel("condition")),
                sparse_reference: None,
            });
        }
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        format_version: io::MANIFEST_VERSION,
        resolution: config.resolution,
        entries,
    };
    io::write_manifest(&manifest)?;
    Ok(manifest)
}

pub fn load_scene(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<Scene> {
    let scene: Scene = io::read_json(&manifest.resolve(&entry.scene))?;
    scene.validate()?;
    Ok(scene)
}

/// The observed view as stored: quantized RGB, f32 depth, camera.
pub fn load_view(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<RenderedView> {
    let (intrinsics, pose) = io::read_camera(&manifest.resolve(&entry.camera))?;
    let rgb = io::read_rgb_png(&manifest.resolve(&entry.image))?;
    let d = io::read_depth_map(&manifest.resolve(&entry.depth))?;
    if rgb.shape() != intrinsics.shape() || d.depth.shape() != intrinsics.shape() {
        return Err(Error::Dataset(format!(
            "{}/{}: image, depth and camera sizes differ",
            entry.scene_id, entry.view_id
        )));
    }
    let depth = Grid::from_fn(intrinsics.width, intrinsics.height, |x, y| {
        if *d.validity.get(x, y) {
            *d.depth.get(x, y)
        } else {
            f64::INFINITY
        }
    });
    Ok(RenderedView {
        rgb,
        depth,
        intrinsics,
        pose,
    })
}

/// Training pairs `(X^v, Y^v)` of the given split, unit weight, manifest order.
pub fn load_training_pairs(manifest: &DatasetManifest, split: Split) -> Result<Vec<TrainingPair>> {
    manifest
        .entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let prefix = e.condition.as_ref().ok_or_else(|| {
                Error::Dataset(format!("{}/{}: no condition map", e.scene_id, e.view_id))
            })?;
            let condition = io::read_condition(&manifest.resolve(prefix))?;
            let target = io::read_rgb_png(&manifest.resolve(&e.image))?;
            TrainingPair::new(condition, target, 1.0)
        })
        .collect()
}

fn scenes_of(manifest: &DatasetManifest, split: Split) -> Vec<&str> {
    let mut ids: Vec<&str> = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.split == split) {
        if ids.last() != Some(&e.scene_id.as_str()) {
            ids.push(&e.scene_id);
        }
    }
    ids
}

fn entries_of<'a>(manifest: &'a DatasetManifest, scene: &str) -> Vec<&'a ManifestEntry> {
    manifest
        .entries
        .iter()
        .filter(|e| e.scene_id == scene)
        .collect()
}

/// Reprojection mask library harvested from the training scenes' rig cameras.
pub fn build_training_library(
    manifest: &DatasetManifest,
    settings: &LibrarySettings,
) -> Result<MaskLibrary> {
    let mut scenes = Vec::new();
    let mut cameras: Option<Vec<(CameraIntrinsics, CameraPose)>> = None;
    for sid in scenes_of(manifest, Split::Train) {
        let entries = entries_of(manifest, sid);
        scenes.push(load_scene(manifest, entries[0])?);
        let cams = entries
            .iter()
            .map(|e| io::read_camera(&manifest.resolve(&e.camera)))
            .collect::<Result<Vec<_>>>()?;
        match &cameras {
            None => cameras = Some(cams),
            Some(c) if *c != cams => {
                return Err(Error::Dataset(format!(
                    "{sid}: rig cameras differ between scenes"
                )))
            }
            Some(_) => {}
        }
    }
    let cameras = cameras.ok_or_else(|| Error::Dataset("no training scenes".into()))?;
    build_mask_library_with_pivot(
        &scenes,
        &cameras,
        &settings.virtual_offsets,
        manifest.resolution,
        settings.seed,
        settings.pivot_degrees,
    )
}

/// Random-box masks whose drop fractions match `reference`'s one for one.
pub fn matched_random_box_library(reference: &MaskLibrary, seed: u64) -> Result<MaskLibrary> {
    let (h, w) = reference.resolution();
    let masks = reference
        .masks()
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let drop = m.drop_fraction();
            let box_seed = seed.wrapping_add(i as u64);
            if drop <= 0.0 {
                Ok(ArtifactMask {
                    mask: Grid::filled(w, h, true),
                    provenance: MaskProvenance::RandomBox {
                        seed: box_seed,
                        target_drop_fraction: 0.0,
                    },
                })
            } else {
                make_random_box_mask((h, w), drop.min(1.0 - 1.0 / (h * w) as f64), box_seed)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    MaskLibrary::new(masks, reference.config().clone())
}

/// One extrapolated evaluation target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTarget {
    pub scene_id: String,
    pub source_view: String,
    pub toward_view: String,
    pub angle_fraction: f64,
    pub lateral_offset: f64,
}

impl EvalTarget {
    pub fn label(&self) -> String {
        format!(
            "{}->{}@a{:.3}_l{:+.2}",
            self.source_view, self.toward_view, self.angle_fraction, self.lateral_offset
        )
    }
}

/// Test-split targets: from the front camera (view 0) toward the side
/// cameras of the same frame (alternating per scene) at every configured offset.
pub fn extrapolation_targets(manifest: &DatasetManifest, eval: &EvalConfig) -> Vec<EvalTarget> {
    let mut out = Vec::new();
    for (j, sid) in scenes_of(manifest, Split::Test).into_iter().enumerate() {
        let views = entries_of(manifest, sid);
        let sides = views.len().clamp(1, RIG_YAWS.len()) - 1;
        if sides == 0 {
            continue;
        }
        let toward = &views[1 + j % sides].view_id;
        for &a in &eval.angle_fractions {
            for &l in &eval.lateral_offsets {
                out.push(EvalTarget {
                    scene_id: sid.to_string(),
                    source_view: views[0].view_id.clone(),
                    toward_view: toward.clone(),
                    angle_fraction: a,
                    lateral_offset: l,
                });
            }
        }
    }
    out
}

/// Rounds to the 8-bit grid the dataset images live on.
pub fn quantize_rgb(img: &RgbImage) -> RgbImage {
    img.map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0))
}

struct PreparedTarget {
    condition: ConditionMap,
    truth: RenderedView,
    pose_offset: f64,
    scene_id: String,
    view: String,
}

fn prepare_target(manifest: &DatasetManifest, target: &EvalTarget) -> Result<PreparedTarget> {
    let find = |view: &str| {
        manifest
            .entry(&target.scene_id, view)
            .ok_or_else(|| Error::Dataset(format!("{}/{view}: not in manifest", target.scene_id)))
    };
    let source_entry = find(&target.source_view)?;
    let source = load_view(manifest, source_entry)?;
    let (_, toward_pose) = io::read_camera(&manifest.resolve(&find(&target.toward_view)?.camera))?;
    let pose = make_extrapolated_pose(
        &source.pose,
        &toward_pose,
        target.angle_fraction,
        target.lateral_offset,
    )?;
    let condition = build_condition(&source, &source.intrinsics, &pose)?;
    let scene = load_scene(manifest, source_entry)?;
    let mut truth = render_scene(&scene, &source.intrinsics, &pose);
    truth.rgb = quantize_rgb(&truth.rgb);
    Ok(PreparedTarget {
        condition,
        pose_offset: pose_offset_degrees(&source.pose, &pose),
        truth,
        scene_id: target.scene_id.clone(),
        view: target.label(),
    })
}

/// Samples every prepared target and scores it against sparse references.
fn score_targets(
    model: &DenoiserModel,
    prepared: &[PreparedTarget],
    config: &PipelineConfig,
) -> Result<Vec<EvalRecord>> {
    let schedule = config.train.schedule()?;
    let eval = &config.eval;
    let per_target: Vec<Result<EvalRecord>> = prepared
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let options = SamplerOptions {
                seed: eval.sampler.seed.wrapping_add(i as u64),
                ..eval.sampler
            };
            let out = sample(model, &t.condition, &schedule, &options)?;
            let fraction = eval.reference_fractions[i % eval.reference_fractions.len()];
            let reference = make_sparse_reference(
                &t.truth,
                fraction,
                eval.reference_seed.wrapping_add(i as u64),
            )?;
            evaluate(
                &out.image,
                &reference,
                t.pose_offset,
                t.scene_id.clone(),
                t.view.clone(),
            )
        })
        .collect();
    per_target.into_iter().collect()
}

/// Extrapolated-view evaluation of `model` on the test split, binned by
/// pose offset and sparse-reference density.
pub fn run_extrapolation_eval(
    manifest: &DatasetManifest,
    model: &DenoiserModel,
    config: &PipelineConfig,
) -> Result<MetricsReport> {
    let targets = extrapolation_targets(manifest, &config.eval);
    if targets.is_empty() {
        return Err(Error::Dataset("no test-split targets".into()));
    }
    // Conditions are built on the calling thread, through the shared entry point.
    let prepared = targets
        .iter()
        .map(|t| prepare_target(manifest, t))
        .collect::<Result<Vec<_>>>()?;
    let records = score_targets(model, &prepared, config)?;
    bin_and_aggregate(
        &records,
        &config.eval.offset_edges,
        &config.eval.sparsity_edges,
    )
}

/// Evaluation on the observed front view of each test scene, using the
/// stored condition map and image (no reprojection to a new pose). Sampler
/// and reference seeds are indexed per scene the same way as
/// [`run_extrapolation_eval`] indexes its targets.
pub fn run_in_manifold_eval(
    manifest: &DatasetManifest,
    model: &DenoiserModel,
    config: &PipelineConfig,
) -> Result<MetricsReport> {
    let mut prepared = Vec::new();
    for sid in scenes_of(manifest, Split::Test) {
        let e = entries_of(manifest, sid)[0];
        let prefix = e
            .condition
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("{sid}/{}: no condition map", e.view_id)))?;
        prepared.push(PreparedTarget {
            condition: io::read_condition(&manifest.resolve(prefix))?,
            truth: load_view(manifest, e)?,
            pose_offset: 0.0,
            scene_id: sid.to_string(),
            view: e.view_id.clone(),
        });
    }
    let records = score_targets(model, &prepared, config)?;
    bin_and_aggregate(
        &records,
        &config.eval.offset_edges,
        &config.eval.sparsity_edges,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// No artifact injection.
    V1,
    /// Random-box masks.
    V2,
    /// Reprojection masks.
    V3,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::V1, Variant::V2, Variant::V3];

    pub fn name(self) -> &'static str {
        match self {
            Variant::V1 => "V1",
            Variant::V2 => "V2",
            Variant::V3 => "V3",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::V1 => "baseline, no artifacts",
            Variant::V2 => "random-box masks",
            Variant::V3 => "reprojection masks",
        }
    }
}

/// Trains one ablation variant; `library` is the reprojection library.
pub fn train_variant(
    manifest: &DatasetManifest,
    library: &MaskLibrary,
    variant: Variant,
    config: &PipelineConfig,
    on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let pairs = load_training_pairs(manifest, Split::Train)?;
    match variant {
        Variant::V1 => crate::diffusion::train_denoiser(&pairs, None, &config.train, on_step),
        Variant::V2 => {
            let boxes = matched_random_box_library(library, config.library.seed)?;
            crate::diffusion::train_denoiser(&pairs, Some(&boxes), &config.train, on_step)
        }
        Variant::V3 => {
            crate::diffusion::train_denoiser(&pairs, Some(library), &config.train, on_step)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub description: String,
    pub mask_source: String,
    pub p_inject: f64,
    pub injected_samples: usize,
    pub final_loss: f64,
    pub overall: MetricMeans,
    pub draw_digest: String,
    pub injection_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub library_size: usize,
    pub library_mean_coverage: f64,
    pub rows: Vec<AblationRow>,
}

/// Trains V1/V2/V3 (identical except mask source) and evaluates each on the
/// held-out extrapolated split. Writes `<out>/V*.gevs`, `<out>/eval_V*.json`
/// and `<out>/ablation.json`.
pub fn run_ablation(
    manifest: &DatasetManifest,
    library: &MaskLibrary,
    config: &PipelineConfig,
    out: &Path,
    mut progress: impl FnMut(Variant, usize, f64),
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let outcome = train_variant(manifest, library, variant, config, |s, l| {
            progress(variant, s, l)
        })?;
        io::write_checkpoint(
            &out.join(format!("{}.gevs", variant.name())),
            &outcome.model,
        )?;
        let report = run_extrapolation_eval(manifest, &outcome.model, config)?;
        io::write_report(&out.join(format!("eval_{}.json", variant.name())), &report)?;
        rows.push(AblationRow {
            variant,
            description: variant.description().into(),
            mask_source: match variant {
                Variant::V1 => "none",
                Variant::V2 => "random_box",
                Variant::V3 => "reprojection",
            }
            .into(),
            p_inject: if variant == Variant::V1 {
                0.0
            } else {
                config.train.p_inject
            },
            injected_samples: outcome.injected,
            final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
            overall: report.overall,
            draw_digest: format!("{:016x}", outcome.draw_digest),
            injection_digest: format!("{:016x}", outcome.injection_digest),
        });
    }
    let report = AblationReport {
        schema_version: lpsr::REPORT_SCHEMA_VERSION,
        library_size: library.len(),
        library_mean_coverage: library.mean_coverage(),
        rows,
    };
    io::write_json(&out.join("ablation.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub manifest: u32,
    pub report: u32,
    pub point_map: String,
    pub depth_map: String,
    pub checkpoint: String,
}

impl Default for FormatVersions {
    fn default() -> Self {
        let s = |m: &[u8; 4]| String::from_utf8_lossy(m).into_owned();
        Self {
            manifest: io::MANIFEST_VERSION,
            report: lpsr::REPORT_SCHEMA_VERSION,
            point_map: s(io::POINT_MAP_MAGIC),
            depth_map: s(io::DEPTH_MAP_MAGIC),
            checkpoint: s(io::CHECKPOINT_MAGIC),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub dataset: u64,
    pub library: u64,
    pub train: u64,
    pub sampler: u64,
    pub reference: u64,
}

/// Provenance written next to every pipeline output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub package_version: String,
    pub git_describe: String,
    pub seeds: RunSeeds,
    pub formats: FormatVersions,
    pub config: PipelineConfig,
}

/// `git describe --always --dirty` of the working directory, or `"unknown"`.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

pub fn write_run_record(dir: &Path, command: &str, config: &PipelineConfig) -> Result<RunRecord> {
    let record = RunRecord {
        command: command.into(),
        package_version: env!("CARGO_PKG_VERSION").into(),
        git_describe: git_describe(),
        seeds: RunSeeds {
            dataset: config.dataset.seed,
            library: config.library.seed,
            train: config.train.seed,
            sampler: config.eval.sampler.seed,
            reference: config.eval.reference_seed,
        },
        formats: FormatVersions::default(),
        config: config.clone(),
    };
    io::write_json(&dir.join(RUN_FILE), &record)?;
    Ok(record)
}
