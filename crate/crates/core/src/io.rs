//! On-disk formats.
//!
//! | format | layout |
//! |---|---|
//! | camera JSON | `{fx, fy, cx, cy, width, height, extrinsic: [16 × f64 row-major world→camera]}` |
//! | `GPM1` point map | `"GPM1"`, u32 width, u32 height, f32 `H×W×3` xyz, u8 `H×W` validity |
//! | `GDM1` depth map | `"GDM1"`, u32 width, u32 height, f32 `H×W` depth, u8 `H×W` validity |
//! | `GEVS` checkpoint | `"GEVS"`, u32 JSON length, architecture JSON, f64 parameters |
//! | PNG | 8-bit RGB images, 8-bit grey masks (0 / 255) |
//! | condition map | `<prefix>.png`, `<prefix>_mask.png`, `<prefix>.gdm` |
//! | mask library | `mask_NNNNN.png` files plus `library.json` (provenance, config) |
//!
//! Binary formats are little-endian. Every reader checks the exact byte
//! count and reports offsets for malformed input.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::artifact::{ArtifactMask, LibraryConfig, MaskLibrary, MaskProvenance};
use crate::diffusion::{Architecture, DenoiserModel};
use crate::error::{Error, Result};
use crate::gar::{ConditionMap, PointMap};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::raster::{DepthMap, Grid, Mask, RgbImage};

pub const POINT_MAP_MAGIC: &[u8; 4] = b"GPM1";
pub const DEPTH_MAP_MAGIC: &[u8; 4] = b"GDM1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GEVS";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: Vec<u8> },

    #[error("truncated input: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("trailing data: expected {expected} bytes, got {actual}")]
    TrailingBytes { expected: usize, actual: usize },

    #[error("invalid value at byte {offset}: {reason}")]
    InvalidValue { offset: usize, reason: String },

    #[error("JSON error at {path}: {message}")]
    Json { path: String, message: String },

    #[error("PNG: {0}")]
    Png(String),

    #[error("mask pixel ({x}, {y}) has value {value}; expected 0 or 255")]
    MaskValue { x: usize, y: usize, value: u8 },

    #[error("manifest: {0}")]
    Manifest(String),
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses JSON, reporting the path of the first offending field.
pub fn from_json_bytes<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        FormatError::Json {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        }
        .into()
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| FormatError::Json {
        path: ".".into(),
        message: e.to_string(),
    })?;
    out.push(b'\n');
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    from_json_bytes(&read_file(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &to_json_bytes(value)?)
}

// ---------------------------------------------------------------- cameras

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    extrinsic: [f64; 16],
}

pub fn encode_camera(k: &CameraIntrinsics, pose: &CameraPose) -> Result<Vec<u8>> {
    to_json_bytes(&CameraFile {
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        width: k.width,
        height: k.height,
        extrinsic: pose.to_extrinsic(),
    })
}

/// Parses and validates a camera; rejects non-orthonormal rotations.
pub fn decode_camera(bytes: &[u8]) -> Result<(CameraIntrinsics, CameraPose)> {
    let f: CameraFile = from_json_bytes(bytes)?;
    let k = CameraIntrinsics::new(f.fx, f.fy, f.cx, f.cy, f.width, f.height)?;
    let pose = CameraPose::from_extrinsic(&f.extrinsic)?;
    Ok((k, pose))
}

pub fn read_camera(path: &Path) -> Result<(CameraIntrinsics, CameraPose)> {
    decode_camera(&read_file(path)?)
}

pub fn write_camera(path: &Path, k: &CameraIntrinsics, pose: &CameraPose) -> Result<()> {
    write_file(path, &encode_camera(k, pose)?)
}

// ---------------------------------------------------------------- binary helpers

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take(8).try_into().unwrap())
    }
}

fn check_magic(bytes: &[u8], magic: &[u8; 4]) -> Result<()> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            expected: 4,
            actual: bytes.len(),
        }
        .into());
    }
    if &bytes[..4] != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: bytes[..4].to_vec(),
        }
        .into());
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: usize) -> Result<()> {
    match bytes.len().cmp(&expected) {
        std::cmp::Ordering::Less => Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        }
        .into()),
        std::cmp::Ordering::Greater => Err(FormatError::TrailingBytes {
            expected,
            actual: bytes.len(),
        }
        .into()),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

/// Magic + `u32` width + `u32` height, then the exact total size check.
fn grid_header<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    bytes_per_pixel: usize,
) -> Result<(Reader<'a>, usize, usize)> {
    check_magic(bytes, magic)?;
    if bytes.len() < 12 {
        return Err(FormatError::Truncated {
            expected: 12,
            actual: bytes.len(),
        }
        .into());
    }
    let mut r = Reader { bytes, at: 4 };
    let w = r.u32() as usize;
    let h = r.u32() as usize;
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(bytes_per_pixel))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| FormatError::InvalidValue {
            offset: 4,
            reason: format!("dimensions {w}×{h} overflow"),
        })?;
    check_len(bytes, expected)?;
    Ok((r, w, h))
}

fn read_validity(r: &mut Reader<'_>, w: usize, h: usize) -> Result<Mask> {
    let start = r.at;
    let raw = r.take(w * h);
    let data = raw
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(FormatError::InvalidValue {
                offset: start + i,
                reason: format!("validity byte {b}"),
            }),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Grid::from_vec(w, h, data).expect("length checked"))
}

fn push_header(out: &mut Vec<u8>, magic: &[u8; 4], w: usize, h: usize) -> Result<()> {
    let dim = |v: usize| {
        u32::try_from(v).map_err(|_| FormatError::InvalidValue {
            offset: 4,
            reason: format!("dimension {v} exceeds u32"),
        })
    };
    out.extend_from_slice(magic);
    out.extend_from_slice(&dim(w)?.to_le_bytes());
    out.extend_from_slice(&dim(h)?.to_le_bytes());
    Ok(())
}

// ---------------------------------------------------------------- GPM1

/// Coordinates are stored as f32.
pub fn encode_point_map(pm: &PointMap) -> Result<Vec<u8>> {
    let (h, w) = pm.shape();
    let mut out = Vec::with_capacity(12 + w * h * 13);
    push_header(&mut out, POINT_MAP_MAGIC, w, h)?;
    for p in pm.points().iter() {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out.extend(pm.valid().iter().map(|&v| v as u8));
    Ok(out)
}

pub fn decode_point_map(bytes: &[u8]) -> Result<PointMap> {
    let (mut r, w, h) = grid_header(bytes, POINT_MAP_MAGIC, 13)?;
    let points: Vec<[f64; 3]> = (0..w * h)
        .map(|_| [r.f32() as f64, r.f32() as f64, r.f32() as f64])
        .collect();
    let valid = read_validity(&mut r, w, h)?;
    PointMap::new(Grid::from_vec(w, h, points).expect("length checked"), valid)
}

pub fn read_point_map(path: &Path) -> Result<PointMap> {
    decode_point_map(&read_file(path)?)
}

pub fn write_point_map(path: &Path, pm: &PointMap) -> Result<()> {
    write_file(path, &encode_point_map(pm)?)
}

// ---------------------------------------------------------------- GDM1

/// Depth plus validity: a condition map's depth channel, or a rendered view's
/// depth (`+∞` where the ray escapes) with its finite-depth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSidecar {
    pub depth: DepthMap,
    pub validity: Mask,
}

pub fn encode_depth_map(d: &DepthSidecar) -> Result<Vec<u8>> {
    if !d.depth.same_shape(&d.validity) {
        return Err(Error::ShapeMismatch {
            expected: d.depth.shape(),
            actual: d.validity.shape(),
        });
    }
    let (h, w) = d.depth.shape();
    let mut out = Vec::with_capacity(12 + w * h * 5);
    push_header(&mut out, DEPTH_MAP_MAGIC, w, h)?;
    for v in d.depth.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend(d.validity.iter().map(|&v| v as u8));
    Ok(out)
}

pub fn decode_depth_map(bytes: &[u8]) -> Result<DepthSidecar> {
    let (mut r, w, h) = grid_header(bytes, DEPTH_MAP_MAGIC, 5)?;
    let depth: Vec<f64> = (0..w * h).map(|_| r.f32() as f64).collect();
    let validity = read_validity(&mut r, w, h)?;
    Ok(DepthSidecar {
        depth: Grid::from_vec(w, h, depth).expect("length checked"),
        validity,
    })
}

pub fn read_depth_map(path: &Path) -> Result<DepthSidecar> {
    decode_depth_map(&read_file(path)?)
}

pub fn write_depth_map(path: &Path, d: &DepthSidecar) -> Result<()> {
    write_file(path, &encode_depth_map(d)?)
}

// ---------------------------------------------------------------- PNG

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn png_bytes(raw: Vec<u8>, w: usize, h: usize, color: image::ExtendedColorType) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&raw, w as u32, h as u32, color)
        .map_err(|e| FormatError::Png(e.to_string()))?;
    Ok(out)
}

/// Values are clamped to `[0, 1]` and quantized to `round(255·v)`.
pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let (h, w) = img.shape();
    let raw = img.iter().flat_map(|p| p.map(to_u8)).collect();
    png_bytes(raw, w, h, image::ExtendedColorType::Rgb8)
}

/// Any PNG colour type is accepted and converted to 8-bit RGB; values map by `/255`.
pub fn decode_rgb_png(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| FormatError::Png(e.to_string()))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| p.0.map(|c| c as f64 / 255.0))
        .collect();
    Ok(Grid::from_vec(w, h, data).expect("image dims"))
}

pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let (h, w) = mask.shape();
    let raw = mask.iter().map(|&v| if v { 255 } else { 0 }).collect();
    png_bytes(raw, w, h, image::ExtendedColorType::L8)
}

pub fn decode_mask_png(bytes: &[u8]) -> Result<Mask> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| FormatError::Png(e.to_string()))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for (x, y, p) in img.enumerate_pixels() {
        data.push(match p.0[0] {
            0 => false,
            255 => true,
            value => {
                return Err(FormatError::MaskValue {
                    x: x as usize,
                    y: y as usize,
                    value,
                }
                .into())
            }
        });
    }
    Ok(Grid::from_vec(w, h, data).expect("image dims"))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    decode_rgb_png(&read_file(path)?)
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    write_file(path, &encode_rgb_png(img)?)
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    decode_mask_png(&read_file(path)?)
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    write_file(path, &encode_mask_png(mask)?)
}

// ---------------------------------------------------------------- condition maps

/// Appends `suffix` to a path prefix.
pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// A condition map on disk: `<prefix>.png` (zero-filled rgb),
/// `<prefix>_mask.png` (validity) and `<prefix>.gdm` (depth + validity).
pub fn condition_paths(prefix: &Path) -> [PathBuf; 3] {
    [
        with_suffix(prefix, ".png"),
        with_suffix(prefix, "_mask.png"),
        with_suffix(prefix, ".gdm"),
    ]
}

pub fn write_condition(prefix: &Path, c: &ConditionMap) -> Result<()> {
    let [png, mask, gdm] = condition_paths(prefix);
    write_rgb_png(&png, &c.rgb)?;
    write_mask_png(&mask, &c.validity)?;
    write_depth_map(
        &gdm,
        &DepthSidecar {
            depth: c.depth.clone(),
            validity: c.validity.clone(),
        },
    )
}

/// Reads and validates (matching validity in mask and sidecar, zero fill,
/// positive depth on valid pixels).
pub fn read_condition(prefix: &Path) -> Result<ConditionMap> {
    let [png, mask, gdm] = condition_paths(prefix);
    let rgb = read_rgb_png(&png)?;
    let validity = read_mask_png(&mask)?;
    let d = read_depth_map(&gdm)?;
    if validity != d.validity {
        return Err(Error::InvalidCondition(format!(
            "{}: validity mask and depth sidecar disagree",
            prefix.display()
        )));
    }
    ConditionMap::new(rgb, validity, d.depth)
}

/// A sparse reference on disk: `<prefix>.png` (rgb) and `<prefix>_mask.png`.
pub fn sparse_reference_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    (
        with_suffix(prefix, ".png"),
        with_suffix(prefix, "_mask.png"),
    )
}

pub fn write_sparse_reference(prefix: &Path, r: &crate::lpsr::SparseReference) -> Result<()> {
    let (png, mask) = sparse_reference_paths(prefix);
    write_rgb_png(&png, &r.reference)?;
    write_mask_png(&mask, &r.mask)
}

pub fn read_sparse_reference(prefix: &Path) -> Result<crate::lpsr::SparseReference> {
    let (png, mask) = sparse_reference_paths(prefix);
    crate::lpsr::SparseReference::new(read_rgb_png(&png)?, read_mask_png(&mask)?)
}

// ---------------------------------------------------------------- mask library

pub const LIBRARY_FILE: &str = "library.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryIndex {
    format_version: u32,
    config: LibraryConfig,
    masks: Vec<LibraryIndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryIndexEntry {
    file: String,
    provenance: MaskProvenance,
}

/// Writes `<dir>/mask_NNNNN.png` per mask and `<dir>/library.json`.
pub fn write_mask_library(dir: &Path, library: &MaskLibrary) -> Result<()> {
    let mut masks = Vec::with_capacity(library.len());
    for (i, m) in library.masks().iter().enumerate() {
        let file = format!("mask_{i:05}.png");
        write_mask_png(&dir.join(&file), &m.mask)?;
        masks.push(LibraryIndexEntry {
            file,
            provenance: m.provenance.clone(),
        });
    }
    write_json(
        &dir.join(LIBRARY_FILE),
        &LibraryIndex {
            format_version: 1,
            config: library.config().clone(),
            masks,
        },
    )
}

pub fn read_mask_library(dir: &Path) -> Result<MaskLibrary> {
    let index: LibraryIndex = read_json(&dir.join(LIBRARY_FILE))?;
    let masks = index
        .masks
        .into_iter()
        .map(|e| {
            Ok(ArtifactMask {
                mask: read_mask_png(&dir.join(&e.file))?,
                provenance: e.provenance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MaskLibrary::new(masks, index.config)
}

// ---------------------------------------------------------------- GEVS

pub fn encode_checkpoint(model: &DenoiserModel) -> Result<Vec<u8>> {
    let arch = serde_json::to_vec(model.architecture()).map_err(|e| FormatError::Json {
        path: ".".into(),
        message: e.to_string(),
    })?;
    let mut out = Vec::with_capacity(8 + arch.len() + 8 * model.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    for p in model.parameters() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DenoiserModel> {
    check_magic(bytes, CHECKPOINT_MAGIC)?;
    if bytes.len() < 8 {
        return Err(FormatError::Truncated {
            expected: 8,
            actual: bytes.len(),
        }
        .into());
    }
    let mut r = Reader { bytes, at: 4 };
    let json_len = r.u32() as usize;
    if bytes.len() < 8 + json_len {
        return Err(FormatError::Truncated {
            expected: 8 + json_len,
            actual: bytes.len(),
        }
        .into());
    }
    let arch: Architecture = from_json_bytes(r.take(json_len))?;
    arch.validate()?;
    let expected = 8 + json_len + 8 * arch.param_count();
    check_len(bytes, expected)?;
    let params = (0..arch.param_count()).map(|_| r.f64()).collect();
    DenoiserModel::new(arch, params)
}

pub fn read_checkpoint(path: &Path) -> Result<DenoiserModel> {
    decode_checkpoint(&read_file(path)?)
}

pub fn write_checkpoint(path: &Path, model: &DenoiserModel) -> Result<()> {
    write_file(path, &encode_checkpoint(model)?)
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One observed view. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub view_id: String,
    pub split: Split,
    /// Scene description JSON (the procedural oracle the view was rendered from).
    pub scene: PathBuf,
    pub camera: PathBuf,
    pub image: PathBuf,
    /// `GDM1` depth of the observed view with its finite-depth mask.
    pub depth: PathBuf,
    pub pointmap: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparse_reference: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub format_version: u32,
    /// `(height, width)` of every view.
    pub resolution: (usize, usize),
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    /// Checks id uniqueness (and, with `check_files`, that every referenced file exists).
    pub fn validate(&self, check_files: bool) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if !seen.insert((&e.scene_id, &e.view_id)) {
                return Err(FormatError::Manifest(format!(
                    "entries[{i}]: duplicate id ({}, {})",
                    e.scene_id, e.view_id
                ))
                .into());
            }
            if !check_files {
                continue;
            }
            let mut files = vec![("scene", self.root.join(&e.scene))];
            files.push(("camera", self.root.join(&e.camera)));
            files.push(("image", self.root.join(&e.image)));
            files.push(("depth", self.root.join(&e.depth)));
            files.push(("pointmap", self.root.join(&e.pointmap)));
            if let Some(p) = &e.condition {
                for f in condition_paths(&self.root.join(p)) {
                    files.push(("condition", f));
                }
            }
            if let Some(p) = &e.sparse_reference {
                let (a, b) = sparse_reference_paths(&self.root.join(p));
                files.push(("sparse_reference", a));
                files.push(("sparse_reference", b));
            }
            for (field, f) in files {
                if !f.is_file() {
                    return Err(FormatError::Manifest(format!(
                        "entries[{i}].{field}: missing file {}",
                        f.display()
                    ))
                    .into());
                }
            }
        }
        Ok(())
    }

    pub fn entry(&self, scene_id: &str, view_id: &str) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.scene_id == scene_id && e.view_id == view_id)
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }
}

/// Reads `<dir>/manifest.json` (or the given file) and validates it.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let mut m: DatasetManifest = read_json(&file)?;
    if m.format_version != MANIFEST_VERSION {
        return Err(FormatError::Json {
            path: "format_version".into(),
            message: format!("unsupported version {}", m.format_version),
        }
        .into());
    }
    m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate(true)?;
    Ok(m)
}

/// Writes `<root>/manifest.json`.
pub fn write_manifest(m: &DatasetManifest) -> Result<()> {
    m.validate(false)?;
    write_json(&m.root.join(MANIFEST_FILE), m)
}

// ---------------------------------------------------------------- reports

pub fn read_report(path: &Path) -> Result<crate::lpsr::MetricsReport> {
    let r: crate::lpsr::MetricsReport = read_json(path)?;
    if r.schema_version != crate::lpsr::REPORT_SCHEMA_VERSION {
        return Err(FormatError::Json {
            path: "schema_version".into(),
            message: format!("unsupported version {}", r.schema_version),
        }
        .into());
    }
    Ok(r)
}

pub fn write_report(path: &Path, r: &crate::lpsr::MetricsReport) -> Result<()> {
    write_json(path, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    #[test]
    fn camera_round_trip_and_reflection_rejected() {
        let k = CameraIntrinsics::with_fov(64, 48, 70.0).unwrap();
        let pose = CameraPose::driving(Vector3::new(1.0, -2.0, 1.6), 33.0).unwrap();
        let bytes = encode_camera(&k, &pose).unwrap();
        let (k2, p2) = decode_camera(&bytes).unwrap();
        assert_eq!((k, pose.clone()), (k2, p2));
        assert_eq!(encode_camera(&k2, &pose).unwrap(), bytes);

        let mut f: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        let r = flip * pose.rotation();
        for i in 0..3 {
            for j in 0..3 {
                f["extrinsic"][i * 4 + j] = r[(i, j)].into();
            }
        }
        let err = decode_camera(&serde_json::to_vec(&f).unwrap()).unwrap_err();
        assert!(matches!(err, Error::NotOrthonormal { .. }), "{err}");
    }

    #[test]
    fn json_errors_name_the_field() {
        let err = decode_camera(br#"{"fx": 1, "fy": "x"}"#).unwrap_err();
        match err {
            Error::Format(FormatError::Json { path, .. }) => assert_eq!(path, "fy"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn truncated_point_map_reports_sizes() {
        let pm = PointMap::new(
            Grid::filled(3, 2, [1.0, 2.0, 3.0]),
            Grid::filled(3, 2, true),
        )
        .unwrap();
        let bytes = encode_point_map(&pm).unwrap();
        assert_eq!(bytes.len(), 12 + 6 * 13);
        let err = decode_point_map(&bytes[..bytes.len() - 5]).unwrap_err();
        match err {
            Error::Format(FormatError::Truncated { expected, actual }) => {
                assert_eq!((expected, actual), (90, 85))
            }
            e => panic!("{e}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            decode_point_map(&long),
            Err(Error::Format(FormatError::TrailingBytes { .. }))
        ));
        assert!(matches!(
            decode_point_map(b"GPM"),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        assert!(matches!(
            decode_point_map(b"GDM1\0\0\0\0\0\0\0\0"),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        let mut bad = bytes;
        *bad.last_mut().unwrap() = 7;
        assert!(matches!(
            decode_point_map(&bad),
            Err(Error::Format(FormatError::InvalidValue { offset: 89, .. }))
        ));
    }

    #[test]
    fn mask_png_rejects_grey_levels() {
        let img = Grid::filled(2, 2, [0.5; 3]);
        let bytes = encode_rgb_png(&img).unwrap();
        assert!(matches!(
            decode_mask_png(&bytes),
            Err(Error::Format(FormatError::MaskValue { value: 128, .. }))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let m = DenoiserModel::init(Architecture::tiny(), &mut rng).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), m);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
    }
}
