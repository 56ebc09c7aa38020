//! Dataset preparation: tiling, target-pixel filtering, rotation
//! augmentation, normalization, and deterministic manifests.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

pub const TILE_WINDOW: usize = 256;
pub const TILE_STEP: usize = 205;
pub const MIN_TARGET_PIXELS: usize = 95;
/// 10, 30, ..., 170: nine angles.
pub const DEFAULT_ROTATION_ANGLES: [i32; 9] = [10, 30, 50, 70, 90, 110, 130, 150, 170];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RangeTag {
    /// Raw 8-bit values in [0, 255].
    Uint8,
    /// Values in [-1, 1], the generators' working range.
    NormalizedMinus1To1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Sar,
    Opt,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Sar => write!(f, "SAR"),
            Domain::Opt => write!(f, "OPT"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One image as channels x height x width with value-range metadata and
/// provenance.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub pixels: Array3<f32>,
    pub range_tag: RangeTag,
    pub source_id: String,
    pub tile_origin: (usize, usize),
    pub rotation_deg: i32,
}

impl ImageSample {
    pub fn new(pixels: Array3<f32>, range_tag: RangeTag, source_id: impl Into<String>) -> Self {
        ImageSample {
            pixels,
            range_tag,
            source_id: source_id.into(),
            tile_origin: (0, 0),
            rotation_deg: 0,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }
}

/// Per-pixel class labels aligned to an [`ImageSample`]; index 0 is
/// background.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMask {
    pub labels: Array2<u8>,
    pub class_names: Vec<String>,
}

impl SegMask {
    pub fn binary(labels: Array2<u8>, target_class: impl Into<String>) -> Self {
        SegMask {
            labels,
            class_names: vec!["background".into(), target_class.into()],
        }
    }

    pub fn target_pixel_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }

    fn check_aligned(&self, sample: &ImageSample) -> Result<()> {
        if self.labels.dim() != (sample.height(), sample.width()) {
            return Err(CoreError::Shape(format!(
                "mask {:?} does not match sample {}x{}",
                self.labels.dim(),
                sample.height(),
                sample.width()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tiling

/// Origins 0, step, 2*step, ... plus a final clamped origin dim - window when
/// the stride grid does not land on it; duplicates removed.
pub fn tile_origins(dim: usize, window: usize, step: usize) -> Vec<usize> {
    let mut origins: Vec<usize> = (0..)
        .map(|k| k * step)
        .take_while(|&o| o + window <= dim)
        .collect();
    let clamped = dim - window;
    if origins.last() != Some(&clamped) {
        origins.push(clamped);
    }
    origins
}

pub fn crop_tiles(
    image: &ImageSample,
    mask: Option<&SegMask>,
    window: usize,
    step: usize,
) -> Result<Vec<(ImageSample, Option<SegMask>)>> {
    let (c, h, w) = image.pixels.dim();
    if h < window || w < window {
        return Err(CoreError::RejectedInput(format!(
            "image {h}x{w} smaller than window {window}"
        )));
    }
    if let Some(m) = mask {
        m.check_aligned(image)?;
    }
    let rows = tile_origins(h, window, step);
    let cols = tile_origins(w, window, step);
    let mut tiles = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &cc in &cols {
            let pixels = image
                .pixels
                .slice(ndarray::s![.., r..r + window, cc..cc + window])
                .to_owned();
            debug_assert_eq!(pixels.dim(), (c, window, window));
            let tile = ImageSample {
                pixels,
                range_tag: image.range_tag,
                source_id: image.source_id.clone(),
                tile_origin: (r, cc),
                rotation_deg: image.rotation_deg,
            };
            let tile_mask = mask.map(|m| SegMask {
                labels: m
                    .labels
                    .slice(ndarray::s![r..r + window, cc..cc + window])
                    .to_owned(),
                class_names: m.class_names.clone(),
            });
            tiles.push((tile, tile_mask));
        }
    }
    Ok(tiles)
}

// ---------------------------------------------------------------------------
// Filtering

/// Keep iff the mask has at least `threshold` target (label 1) pixels.
pub fn filter_min_target_pixels(
    sample: &ImageSample,
    mask: &SegMask,
    threshold: usize,
) -> Result<bool> {
    mask.check_aligned(sample)?;
    Ok(mask.target_pixel_count() >= threshold)
}

// ---------------------------------------------------------------------------
// Rotation augmentation

fn reflect_index(i: isize, n: usize) -> usize {
    // Symmetric reflection: -1 -> 0, n -> n-1.
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Inverse-mapped rotation about the image center. Images sample
/// bilinearly with reflect padding; masks use nearest neighbor with
/// background fill.
fn rotate_image(pixels: &Array3<f32>, angle_deg: f64) -> Array3<f32> {
    let (c, h, w) = pixels.dim();
    let theta = angle_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array3::<f32>::zeros((c, h, w));
    for r in 0..h {
        for cc in 0..w {
            let dy = r as f64 - cy;
            let dx = cc as f64 - cx;
            let src_x = cos_t * dx + sin_t * dy + cx;
            let src_y = -sin_t * dx + cos_t * dy + cy;
            let x0 = src_x.floor();
            let y0 = src_y.floor();
            let fx = src_x - x0;
            let fy = src_y - y0;
            let xi = [
                reflect_index(x0 as isize, w),
                reflect_index(x0 as isize + 1, w),
            ];
            let yi = [
                reflect_index(y0 as isize, h),
                reflect_index(y0 as isize + 1, h),
            ];
            for ci in 0..c {
                let v00 = pixels[[ci, yi[0], xi[0]]] as f64;
                let v01 = pixels[[ci, yi[0], xi[1]]] as f64;
                let v10 = pixels[[ci, yi[1], xi[0]]] as f64;
                let v11 = pixels[[ci, yi[1], xi[1]]] as f64;
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                out[[ci, r, cc]] = v as f32;
            }
        }
    }
    out
}

fn rotate_mask(labels: &Array2<u8>, angle_deg: f64) -> Array2<u8> {
    let (h, w) = labels.dim();
    let theta = angle_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array2::<u8>::zeros((h, w));
    for r in 0..h {
        for cc in 0..w {
            let dy = r as f64 - cy;
            let dx = cc as f64 - cx;
            let src_x = cos_t * dx + sin_t * dy + cx;
            let src_y = -sin_t * dx + cos_t * dy + cy;
            let xi = src_x.round() as isize;
            let yi = src_y.round() as isize;
            if xi >= 0 && (xi as usize) < w && yi >= 0 && (yi as usize) < h {
                out[[r, cc]] = labels[[yi as usize, xi as usize]];
            }
            // Out-of-frame stays background.
        }
    }
    out
}

/// Returns the original pair followed by one rotated copy per angle.
pub fn augment_rotations(
    sample: &ImageSample,
    mask: &SegMask,
    angles: &[i32],
) -> Result<Vec<(ImageSample, SegMask)>> {
    if sample.height() != sample.width() {
        return Err(CoreError::RejectedInput(format!(
            "rotation requires square tiles, got {}x{}",
            sample.height(),
            sample.width()
        )));
    }
    mask.check_aligned(sample)?;
    if let Some(&bad) = angles.iter().find(|&&a| a <= 0 || a >= 360) {
        return Err(CoreError::RejectedInput(format!(
            "rotation angle {bad} outside (0, 360)"
        )));
    }
    let mut out = Vec::with_capacity(angles.len() + 1);
    out.push((sample.clone(), mask.clone()));
    for &angle in angles {
        let pixels = rotate_image(&sample.pixels, angle as f64);
        let labels = rotate_mask(&mask.labels, angle as f64);
        debug_assert!(labels.iter().all(|&v| v <= 1));
        out.push((
            ImageSample {
                pixels,
                range_tag: sample.range_tag,
                source_id: sample.source_id.clone(),
                tile_origin: sample.tile_origin,
                rotation_deg: angle,
            },
            SegMask {
                labels,
                class_names: mask.class_names.clone(),
            },
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Normalization

/// v -> v/127.5 - 1, mapping [0, 255] onto [-1, 1].
pub fn normalize(sample: &ImageSample) -> Result<ImageSample> {
    if sample.range_tag != RangeTag::Uint8 {
        return Err(CoreError::Contract(
            "normalize applied to already-normalized sample".into(),
        ));
    }
    Ok(ImageSample {
        pixels: sample.pixels.mapv(|v| v / 127.5 - 1.0),
        range_tag: RangeTag::NormalizedMinus1To1,
        source_id: sample.source_id.clone(),
        tile_origin: sample.tile_origin,
        rotation_deg: sample.rotation_deg,
    })
}

/// Inverse of [`normalize`], clamped to [0, 255].
pub fn denormalize(sample: &ImageSample) -> Result<ImageSample> {
    if sample.range_tag != RangeTag::NormalizedMinus1To1 {
        return Err(CoreError::Contract(
            "denormalize applied to a non-normalized sample".into(),
        ));
    }
    Ok(ImageSample {
        pixels: sample.pixels.mapv(|v| ((v + 1.0) * 127.5).clamp(0.0, 255.0)),
        range_tag: RangeTag::Uint8,
        source_id: sample.source_id.clone(),
        tile_origin: sample.tile_origin,
        rotation_deg: sample.rotation_deg,
    })
}

/// Stacks normalized samples into an [n,c,h,w] batch for the model graphs.
pub fn batch_from_samples(samples: &[&ImageSample]) -> Result<ArrayD<f32>> {
    if samples.is_empty() {
        return Err(CoreError::RejectedInput("empty batch".into()));
    }
    let (c, h, w) = samples[0].pixels.dim();
    let mut batch = Array4::<f32>::zeros((samples.len(), c, h, w));
    for (i, s) in samples.iter().enumerate() {
        if s.range_tag != RangeTag::NormalizedMinus1To1 {
            return Err(CoreError::Contract(format!(
                "sample {} not normalized to [-1,1]",
                s.source_id
            )));
        }
        if s.pixels.dim() != (c, h, w) {
            return Err(CoreError::Shape("ragged batch".into()));
        }
        batch
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&s.pixels);
    }
    Ok(batch.into_dyn())
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PreprocessingRecord {
    pub window: usize,
    pub step: usize,
    pub min_target_pixels: usize,
    pub rotation_angles: Vec<i32>,
}

impl Default for PreprocessingRecord {
    fn default() -> Self {
        PreprocessingRecord {
            window: TILE_WINDOW,
            step: TILE_STEP,
            min_target_pixels: MIN_TARGET_PIXELS,
            rotation_angles: DEFAULT_ROTATION_ANGLES.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub split: Split,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub preprocessing: PreprocessingRecord,
}

impl DatasetManifest {
    pub fn entries_for(&self, domain: Domain, split: Split) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.domain == domain && e.split == split)
            .collect()
    }
}

/// How [`build_manifest`] scans a root and assigns splits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of each domain assigned to the training split.
    pub train_fraction: f64,
    /// Shuffle away any cross-domain correspondence (unpaired mode).
    pub unpaired: bool,
    /// Require a mask next to every image of these domains.
    pub masks_required: Vec<Domain>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            unpaired: true,
            masks_required: vec![],
        }
    }
}

fn scan_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))? {
        let entry = entry.map_err(|e| CoreError::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn mask_path_for(root: &Path, domain_dir: &str, image: &Path) -> PathBuf {
    root.join(format!("{domain_dir}_masks"))
        .join(image.file_name().unwrap())
}

/// Builds a deterministic manifest from `root`, which holds `sar/` and
/// `opt/` image directories with optional `sar_masks/` / `opt_masks/`
/// sidecar directories.
pub fn build_manifest(root: &Path, spec: &SplitSpec, seed: u64) -> Result<DatasetManifest> {
    build_manifest_with(root, spec, seed, PreprocessingRecord::default())
}

pub fn build_manifest_with(
    root: &Path,
    spec: &SplitSpec,
    seed: u64,
    preprocessing: PreprocessingRecord,
) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    let mut missing_masks = Vec::new();
    let mut any_found = false;
    for (domain, dir_name) in [(Domain::Sar, "sar"), (Domain::Opt, "opt")] {
        let images = scan_images(&root.join(dir_name))?;
        any_found |= !images.is_empty();
        let masks_required = spec.masks_required.contains(&domain);
        let mut domain_entries = Vec::with_capacity(images.len());
        for image_path in images {
            let candidate = mask_path_for(root, dir_name, &image_path);
            let mask_path = if candidate.is_file() {
                if let (Ok(id), Ok(md)) = (
                    image::image_dimensions(&image_path),
                    image::image_dimensions(&candidate),
                ) {
                    if id != md {
                        return Err(CoreError::Manifest {
                            details: format!(
                                "mask {} has dims {:?} but image {} has {:?}",
                                candidate.display(),
                                md,
                                image_path.display(),
                                id
                            ),
                        });
                    }
                }
                Some(candidate)
            } else {
                if masks_required {
                    missing_masks.push(candidate);
                }
                None
            };
            domain_entries.push((image_path, mask_path));
        }
        // Deterministic seeded shuffle decides the split assignment; SAR
        // gets a distinct stream so paired corpora lose their cross-domain
        // alignment in unpaired mode.
        let stream = match domain {
            Domain::Sar => 1,
            Domain::Opt => 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15) ^ stream);
        let identity: Vec<usize> = (0..domain_entries.len()).collect();
        let mut order = identity.clone();
        if spec.unpaired {
            order.shuffle(&mut rng);
            if order == identity && order.len() >= 2 {
                // A same-order shuffle would silently keep pairing intact.
                order.rotate_left(1);
            }
        }
        let n_train = (domain_entries.len() as f64 * spec.train_fraction).round() as usize;
        for (rank, &idx) in order.iter().enumerate() {
            let (image_path, mask_path) = domain_entries[idx].clone();
            entries.push(ManifestEntry {
                image_path,
                mask_path,
                split: if rank < n_train {
                    Split::Train
                } else {
                    Split::Test
                },
                domain,
            });
        }
    }
    if !missing_masks.is_empty() {
        return Err(CoreError::Manifest {
            details: format!(
                "missing masks for: {}",
                missing_masks
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        });
    }
    if !any_found {
        return Err(CoreError::Manifest {
            details: format!("no images found under {}", root.display()),
        });
    }
    let unique: BTreeSet<&PathBuf> = entries.iter().map(|e| &e.image_path).collect();
    if unique.len() != entries.len() {
        return Err(CoreError::Manifest {
            details: "duplicate image paths in manifest".into(),
        });
    }
    Ok(DatasetManifest {
        entries,
        seed,
        preprocessing,
    })
}

impl DatasetManifest {
    /// Line-delimited format: a `#` header block with seed and
    /// preprocessing parameters, then one
    /// `image_path TAB mask|- TAB split TAB domain` record per entry.
    pub fn to_string_lossless(&self) -> String {
        let mut out = String::new();
        out.push_str("# seg-cyclegan manifest v1\n");
        out.push_str(&format!("# seed = {}\n", self.seed));
        out.push_str(&format!(
            "# preprocessing = {}\n",
            serde_json::to_string(&self.preprocessing).unwrap()
        ));
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.image_path.display(),
                e.mask_path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "-".into()),
                e.split,
                e.domain
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string_lossless()).map_err(|e| CoreError::io(path, e))
    }

    pub fn parse(text: &str) -> Result<DatasetManifest> {
        let mut seed = None;
        let mut preprocessing = None;
        let mut entries = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("seed =") {
                    seed = Some(v.trim().parse().map_err(|_| CoreError::Manifest {
                        details: format!("bad seed line: {line}"),
                    })?);
                } else if let Some(v) = rest.strip_prefix("preprocessing =") {
                    preprocessing = Some(serde_json::from_str(v.trim())?);
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(CoreError::Manifest {
                    details: format!("malformed record: {line}"),
                });
            }
            entries.push(ManifestEntry {
                image_path: PathBuf::from(parts[0]),
                mask_path: if parts[1] == "-" {
                    None
                } else {
                    Some(PathBuf::from(parts[1]))
                },
                split: match parts[2] {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    other => {
                        return Err(CoreError::Manifest {
                            details: format!("unknown split {other}"),
                        })
                    }
                },
                domain: match parts[3] {
                    "SAR" => Domain::Sar,
                    "OPT" => Domain::Opt,
                    other => {
                        return Err(CoreError::Manifest {
                            details: format!("unknown domain {other}"),
                        })
                    }
                },
            });
        }
        Ok(DatasetManifest {
            entries,
            seed: seed.ok_or_else(|| CoreError::Manifest {
                details: "missing seed header".into(),
            })?,
            preprocessing: preprocessing.ok_or_else(|| CoreError::Manifest {
                details: "missing preprocessing header".into(),
            })?,
        })
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text)
    }
}

// ---------------------------------------------------------------------------
// PNG IO

pub fn load_image(path: &Path) -> Result<ImageSample> {
    let img = image::open(path).map_err(|e| CoreError::Image {
        path: path.into(),
        details: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut pixels = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            pixels[[c, y as usize, x as usize]] = p.0[c] as f32;
        }
    }
    Ok(ImageSample::new(
        pixels,
        RangeTag::Uint8,
        path.file_stem().unwrap().to_string_lossy().to_string(),
    ))
}

pub fn save_image(sample: &ImageSample, path: &Path) -> Result<()> {
    if sample.range_tag != RangeTag::Uint8 {
        return Err(CoreError::Contract(
            "save_image expects uint8-range pixels; denormalize first".into(),
        ));
    }
    let (c, h, w) = sample.pixels.dim();
    if c != 3 {
        return Err(CoreError::Shape(format!("save_image expects 3 channels, got {c}")));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for ci in 0..3 {
            p.0[ci] = sample.pixels[[ci, y as usize, x as usize]].round().clamp(0.0, 255.0) as u8;
        }
    }
    img.save(path).map_err(|e| CoreError::Image {
        path: path.into(),
        details: e.to_string(),
    })
}

/// Masks are single-channel 8-bit PNGs holding literal class indices.
pub fn load_mask(path: &Path) -> Result<SegMask> {
    let img = image::open(path).map_err(|e| CoreError::Image {
        path: path.into(),
        details: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let mut labels = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in gray.enumerate_pixels() {
        let v = p.0[0];
        if v > 1 {
            return Err(CoreError::Image {
                path: path.into(),
                details: format!("mask value {v} outside {{0,1}} at ({x},{y})"),
            });
        }
        labels[[y as usize, x as usize]] = v;
    }
    Ok(SegMask::binary(labels, "target"))
}

pub fn save_mask(mask: &SegMask, path: &Path) -> Result<()> {
    let (h, w) = mask.labels.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        p.0[0] = mask.labels[[y as usize, x as usize]];
    }
    img.save(path).map_err(|e| CoreError::Image {
        path: path.into(),
        details: e.to_string(),
    })
}
