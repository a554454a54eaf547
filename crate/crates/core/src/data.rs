//! Datasets: image patches with image-level labels, a deterministic
//! synthetic generator, folder ingestion with background filtering, and
//! batching.
//!
//! Ground-truth masks are reachable only through [`EvalView`]; the
//! [`TrainingView`] handed to training loops exposes pixels and labels.

use crate::error::{Error, Result};
use crate::layers::bilinear_resize;
use crate::losses::Label;
use crate::scalar::Scalar;
use crate::tensor::{BinaryMask, Tensor3};
use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

/// RGB patch (channel-major, values in `[0, 1]`) with its image-level label.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch<T> {
    pixels: Tensor3<T>,
    label: Label,
    gt_mask: Option<BinaryMask>,
    source_id: String,
}

impl<T: Scalar> ImagePatch<T> {
    pub fn new(
        pixels: Tensor3<T>,
        label: Label,
        gt_mask: Option<BinaryMask>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if pixels.channels != 3 {
            return Err(Error::shape("ImagePatch::new", "3 channels", pixels.channels));
        }
        let source_id = source_id.into();
        if let Some(m) = &gt_mask {
            if m.height != pixels.height || m.width != pixels.width {
                return Err(Error::shape(
                    "ImagePatch::new",
                    format!("{}x{}", pixels.height, pixels.width),
                    m.shape_str(),
                ));
            }
            match (label, m.any()) {
                (Label::Normal, true) => {
                    return Err(Error::Precondition(format!(
                        "{source_id}: normal patch with a non-empty mask"
                    )))
                }
                (Label::Tumor, false) => {
                    return Err(Error::Precondition(format!(
                        "{source_id}: tumor patch with an empty mask"
                    )))
                }
                _ => {}
            }
        }
        Ok(Self {
            pixels,
            label,
            gt_mask,
            source_id,
        })
    }

    pub fn pixels(&self) -> &Tensor3<T> {
        &self.pixels
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn has_mask(&self) -> bool {
        self.gt_mask.is_some()
    }
}

/// Immutable collection of patches.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset<T> {
    patches: Vec<ImagePatch<T>>,
}

/// What a training loop may see of a patch.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSample<'a, T> {
    pub pixels: &'a Tensor3<T>,
    pub label: Label,
}

/// Evaluation-side view of a patch, including the held-out mask.
#[derive(Debug, Clone, Copy)]
pub struct EvalSample<'a, T> {
    pub pixels: &'a Tensor3<T>,
    pub label: Label,
    pub gt_mask: Option<&'a BinaryMask>,
    pub source_id: &'a str,
}

/// Training accessor. It has no path to ground-truth masks:
///
/// ```compile_fail
/// use ikd_mil::data::{Dataset, TrainingView};
/// fn peek(view: &TrainingView<'_, f32>) {
///     let _ = view.get(0).gt_mask;
/// }
/// ```
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a, T> {
    patches: &'a [ImagePatch<T>],
}

impl<'a, T: Scalar> TrainingView<'a, T> {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn get(&self, i: usize) -> TrainingSample<'a, T> {
        let p = &self.patches[i];
        TrainingSample {
            pixels: &p.pixels,
            label: p.label,
        }
    }

    pub fn batch(&self, batch: &Batch) -> Vec<TrainingSample<'a, T>> {
        batch.indices.iter().map(|&i| self.get(i)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalView<'a, T> {
    patches: &'a [ImagePatch<T>],
}

impl<'a, T: Scalar> EvalView<'a, T> {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn get(&self, i: usize) -> EvalSample<'a, T> {
        let p = &self.patches[i];
        EvalSample {
            pixels: &p.pixels,
            label: p.label,
            gt_mask: p.gt_mask.as_ref(),
            source_id: &p.source_id,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = EvalSample<'a, T>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub label: u8,
    #[serde(default)]
    pub mask: Option<String>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(patches: Vec<ImagePatch<T>>) -> Self {
        Self { patches }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn training_view(&self) -> TrainingView<'_, T> {
        TrainingView {
            patches: &self.patches,
        }
    }

    pub fn eval_view(&self) -> EvalView<'_, T> {
        EvalView {
            patches: &self.patches,
        }
    }

    pub fn patches(&self) -> impl Iterator<Item = &ImagePatch<T>> {
        self.patches.iter()
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.patches.iter().filter(|p| p.label == label).count()
    }

    /// Patch size, if every patch is square and of equal size.
    pub fn image_size(&self) -> Option<usize> {
        let first = self.patches.first()?;
        let s = first.pixels.height;
        self.patches
            .iter()
            .all(|p| p.pixels.height == s && p.pixels.width == s)
            .then_some(s)
    }

    /// Label-stratified random split; the second part receives
    /// `round(fraction * n_label)` patches of every label.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("split fraction {fraction} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5A11);
        let mut held = vec![false; self.len()];
        for label in [Label::Normal, Label::Tumor] {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.patches[i].label == label).collect();
            idx.shuffle(&mut rng);
            let k = (fraction * idx.len() as f64).round() as usize;
            for &i in &idx[..k] {
                held[i] = true;
            }
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (p, h) in self.patches.iter().zip(held) {
            if h {
                b.push(p.clone());
            } else {
                a.push(p.clone());
            }
        }
        Ok((Dataset::new(a), Dataset::new(b)))
    }

    /// SHA-256 over ids, labels, masks and pixel bit patterns.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.patches {
            h.update(p.source_id.as_bytes());
            h.update([p.label.as_u8()]);
            match &p.gt_mask {
                Some(m) => {
                    h.update([1]);
                    h.update(m.values.iter().map(|&b| b as u8).collect::<Vec<_>>());
                }
                None => h.update([0]),
            }
            for v in &p.pixels.data {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes every patch as PNG (plus masks) and a `manifest.csv`.
    pub fn write_folder(&self, dir: &Path) -> Result<Vec<ManifestRecord>> {
        std::fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(dir, e))?;
        let mut records = Vec::with_capacity(self.len());
        for p in &self.patches {
            let (h, w) = (p.pixels.height, p.pixels.width);
            let mut img = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [0, 1, 2].map(|c| to_u8(p.pixels.at(c, y, x).as_f64()));
                    img.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            let rel = format!("{}.png", p.source_id);
            img.save(dir.join(&rel))?;
            let mask = match &p.gt_mask {
                Some(m) => {
                    let mut mi = image::GrayImage::new(w as u32, h as u32);
                    for y in 0..h {
                        for x in 0..w {
                            mi.put_pixel(x as u32, y as u32, image::Luma([if m.get(y, x) { 255 } else { 0 }]));
                        }
                    }
                    let mrel = format!("masks/{}.png", p.source_id);
                    mi.save(dir.join(&mrel))?;
                    Some(mrel)
                }
                None => None,
            };
            records.push(ManifestRecord {
                path: rel,
                label: p.label.as_u8(),
                mask,
            });
        }
        write_manifest(&dir.join("manifest.csv"), &records)?;
        Ok(records)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "a manifest.csv with columns path,label,mask is required".into(),
        });
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let rec: ManifestRecord = rec?;
        if rec.label > 1 {
            return Err(Error::Precondition(format!("{}: label must be 0 or 1", rec.path)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Appearance of synthetic tissue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureParams {
    /// 0 makes lesions indistinguishable from background, 1 is maximal.
    pub contrast: f64,
    /// Per-pixel Gaussian noise on the background.
    pub background_noise: f64,
    /// Per-pixel Gaussian noise inside lesions.
    pub foreground_noise: f64,
    /// Fraction of background pixels seeded with a dark nucleus.
    pub background_nuclei_density: f64,
    /// Fraction of lesion pixels seeded with a dark nucleus.
    pub foreground_nuclei_density: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            contrast: 0.35,
            background_noise: 0.06,
            foreground_noise: 0.08,
            background_nuclei_density: 0.02,
            foreground_nuclei_density: 0.08,
        }
    }
}

/// Elliptical lesion layout. Radii are semi-axis lengths in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobParams {
    pub count_min: usize,
    pub count_max: usize,
    pub radius_min: usize,
    pub radius_max: usize,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            count_min: 1,
            count_max: 3,
            radius_min: 8,
            radius_max: 14,
        }
    }
}

impl BlobParams {
    /// Fewest mask pixels a positive image can have: `count_min` disjoint
    /// blobs each containing the lattice disc of radius `radius_min`.
    pub fn min_area(&self) -> usize {
        self.count_min * lattice_disc(self.radius_min)
    }

    /// Most mask pixels: `count_max` bounding squares, capped by the image.
    pub fn max_area(&self, image_size: usize) -> usize {
        let side = 2 * self.radius_max + 1;
        (self.count_max * side * side).min(image_size * image_size)
    }
}

fn lattice_disc(r: usize) -> usize {
    let r = r as i64;
    let mut n = 0;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                n += 1;
            }
        }
    }
    n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub count_pos: usize,
    pub count_neg: usize,
    pub image_size: usize,
    pub texture: TextureParams,
    pub blobs: BlobParams,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count_pos: 400,
            count_neg: 400,
            image_size: 64,
            texture: TextureParams::default(),
            blobs: BlobParams::default(),
            seed: 0,
        }
    }
}

/// Placement attempts per blob before generation gives up.
const MAX_PLACEMENT_RETRIES: usize = 200;
const PLACEMENT_TRIES_PER_BLOB: usize = 20;

impl SynthSpec {
    /// Short hex digest identifying the generated dataset.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..6])
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.blobs;
        if self.image_size == 0 {
            return Err(Error::Config("synth.image_size must be > 0".into()));
        }
        if b.count_min == 0 || b.count_min > b.count_max {
            return Err(Error::Config("synth.blobs needs 1 <= count_min <= count_max".into()));
        }
        if b.radius_min == 0 || b.radius_min > b.radius_max {
            return Err(Error::Config("synth.blobs needs 1 <= radius_min <= radius_max".into()));
        }
        if 2 * b.radius_max >= self.image_size {
            return Err(Error::Config(format!(
                "synth.blobs.radius_max {} must be < image_size / 2",
                b.radius_max
            )));
        }
        let t = &self.texture;
        for (name, v) in [
            ("contrast", t.contrast),
            ("background_nuclei_density", t.background_nuclei_density),
            ("foreground_nuclei_density", t.foreground_nuclei_density),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("synth.texture.{name} must be in [0, 1]")));
            }
        }
        if t.background_noise < 0.0 || t.foreground_noise < 0.0 {
            return Err(Error::Config("synth.texture noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

const BACKGROUND_RGB: [f64; 3] = [0.90, 0.74, 0.84];
const LESION_SHIFT_RGB: [f64; 3] = [-0.40, -0.42, -0.18];
const NUCLEUS_RGB: [f64; 3] = [0.35, 0.22, 0.50];

/// Generates a deterministic synthetic dataset: positives first, then
/// negatives. Each image draws from its own RNG stream, so an image does not
/// depend on how many others are generated.
pub fn generate_synthetic_dataset<T: Scalar>(spec: &SynthSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let mut patches = Vec::with_capacity(spec.count_pos + spec.count_neg);
    for i in 0..spec.count_pos {
        patches.push(synth_patch(spec, i, true)?);
    }
    for i in 0..spec.count_neg {
        patches.push(synth_patch(spec, i, false)?);
    }
    Ok(Dataset::new(patches))
}

fn synth_patch<T: Scalar>(spec: &SynthSpec, index: usize, positive: bool) -> Result<ImagePatch<T>> {
    let stream = (index as u64) << 1 | positive as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let n = spec.image_size;
    let mask = if positive {
        place_blobs(spec, &mut rng)?
    } else {
        BinaryMask::empty(n, n)
    };
    let t = &spec.texture;
    let bg_noise = Normal::new(0.0, t.background_noise.max(1e-12)).expect("finite");
    let fg_noise = Normal::new(0.0, t.foreground_noise.max(1e-12)).expect("finite");
    // slow illumination gradient shared by all channels
    let (gx, gy): (f64, f64) = (rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04));
    let mut data = vec![0.0f64; 3 * n * n];
    let nuclei: Vec<bool> = mask
        .values
        .iter()
        .map(|&fg| {
            let density = if fg {
                t.foreground_nuclei_density
            } else {
                t.background_nuclei_density
            };
            rng.random::<f64>() < density
        })
        .collect();
    for y in 0..n {
        for x in 0..n {
            let p = y * n + x;
            let fg = mask.values[p];
            let near_nucleus = nuclei[p]
                || (x > 0 && nuclei[p - 1])
                || (x + 1 < n && nuclei[p + 1])
                || (y > 0 && nuclei[p - n])
                || (y + 1 < n && nuclei[p + n]);
            let shade = gx * (x as f64 / n as f64 - 0.5) + gy * (y as f64 / n as f64 - 0.5);
            let noise = if fg { fg_noise.sample(&mut rng) } else { bg_noise.sample(&mut rng) };
            for c in 0..3 {
                let mut v = BACKGROUND_RGB[c] + shade + noise;
                if fg {
                    v += t.contrast * LESION_SHIFT_RGB[c];
                }
                if near_nucleus {
                    v = 0.5 * v + 0.5 * NUCLEUS_RGB[c];
                }
                data[(c * n + y) * n + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    let pixels = Tensor3::from_vec(3, n, n, data.into_iter().map(T::lit).collect())?;
    let (label, prefix) = if positive {
        (Label::Tumor, "synth-pos")
    } else {
        (Label::Normal, "synth-neg")
    };
    ImagePatch::new(pixels, label, Some(mask), format!("{prefix}-{index:05}"))
}

fn place_blobs(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<BinaryMask> {
    let n = spec.image_size;
    let b = &spec.blobs;
    let count = rng.random_range(b.count_min..=b.count_max);
    let lo = b.radius_max;
    let hi = n - 1 - b.radius_max;
    // (cy, cx, a, b, theta); a layout that gets stuck is discarded whole
    let mut placed: Vec<(i64, i64, f64, f64, f64)> = Vec::with_capacity(count);
    let mut tries = 0;
    while placed.len() < count {
        if tries == MAX_PLACEMENT_RETRIES {
            return Err(Error::Generation(format!(
                "could not place {count} disjoint blobs of radius <= {} in a {n}x{n} image after {MAX_PLACEMENT_RETRIES} attempts",
                b.radius_max
            )));
        }
        tries += 1;
        placed.clear();
        for _ in 0..count {
            let mut ok = false;
            for _ in 0..PLACEMENT_TRIES_PER_BLOB {
                let cy = rng.random_range(lo..=hi) as i64;
                let cx = rng.random_range(lo..=hi) as i64;
                let ra = rng.random_range(b.radius_min as f64..=b.radius_max as f64);
                let rb = rng.random_range(b.radius_min as f64..=b.radius_max as f64);
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let r = ra.max(rb);
                let disjoint = placed.iter().all(|&(py, px, pa, pb, _)| {
                    let d2 = ((py - cy).pow(2) + (px - cx).pow(2)) as f64;
                    let sep = r + pa.max(pb) + 1.0;
                    d2 > sep * sep
                });
                if disjoint {
                    placed.push((cy, cx, ra, rb, theta));
                    ok = true;
                    break;
                }
            }
            if !ok {
                break;
            }
        }
    }
    let mut mask = BinaryMask::empty(n, n);
    for &(cy, cx, ra, rb, theta) in &placed {
        let (s, c) = theta.sin_cos();
        let r = b.radius_max as i64;
        for y in (cy - r).max(0)..=(cy + r).min(n as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(n as i64 - 1) {
                let (dy, dx) = ((y - cy) as f64, (x - cx) as f64);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                if (u / ra).powi(2) + (v / rb).powi(2) <= 1.0 {
                    mask.values[y as usize * n + x as usize] = true;
                }
            }
        }
    }
    Ok(mask)
}

/// Patch filtering and resizing rules for folder ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSpec {
    /// Training patches with a larger white fraction are dropped.
    pub background_drop_threshold: f64,
    /// Threshold applied to positive patches when ingesting a test split.
    pub test_positive_drop_threshold: f64,
    /// A pixel is white when all three channels exceed this value.
    pub white_intensity_cutoff: f64,
    pub target_size: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            background_drop_threshold: 0.80,
            test_positive_drop_threshold: 0.90,
            white_intensity_cutoff: 0.90,
            target_size: 256,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("background_drop_threshold", self.background_drop_threshold),
            ("test_positive_drop_threshold", self.test_positive_drop_threshold),
            ("white_intensity_cutoff", self.white_intensity_cutoff),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("filter.{name} must be in (0, 1], got {v}")));
            }
        }
        if self.target_size == 0 {
            return Err(Error::Config("filter.target_size must be > 0".into()));
        }
        Ok(())
    }
}

/// Which drop rule [`ingest_patch_folder`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    #[default]
    Train,
    /// Positives use `test_positive_drop_threshold`, negatives the training one.
    Test,
}

/// Fraction of pixels whose three channels all exceed the white cutoff.
pub fn background_fraction<T: Scalar>(pixels: &Tensor3<T>, spec: &FilterSpec) -> f64 {
    let n = pixels.plane_len();
    if n == 0 {
        return 0.0;
    }
    let cut = T::lit(spec.white_intensity_cutoff);
    let white = (0..n)
        .filter(|&p| (0..pixels.channels).all(|c| pixels.data[c * n + p] > cut))
        .count();
    white as f64 / n as f64
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub files_seen: usize,
    pub kept: usize,
    pub dropped_background: usize,
    pub skipped_unreadable: usize,
}

fn is_raster(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "bmp" | "tif" | "tiff")
    )
}

/// Loads every raster image directly inside `dir` (sorted by file name),
/// labels it from the manifest, drops mostly-white patches and resizes the
/// survivors to `filter.target_size` with corner-aligned bilinear sampling.
pub fn ingest_patch_folder<T: Scalar>(
    dir: &Path,
    filter: &FilterSpec,
    manifest: &[ManifestRecord],
    role: SplitRole,
) -> Result<(Dataset<T>, IngestReport)> {
    filter.validate()?;
    let by_path: HashMap<&str, &ManifestRecord> = manifest.iter().map(|r| (r.path.as_str(), r)).collect();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_raster(p))
        .collect();
    files.sort();

    let mut report = IngestReport::default();
    let mut patches = Vec::new();
    for file in files {
        report.files_seen += 1;
        let rel = file
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let record = by_path
            .get(rel.as_str())
            .ok_or_else(|| Error::MissingManifestEntry(rel.clone()))?;
        let label = Label::try_from(record.label)?;
        let rgb = match image::open(&file) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                warn!("skipping unreadable image {}: {e}", file.display());
                report.skipped_unreadable += 1;
                continue;
            }
        };
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![T::zero(); 3 * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = T::lit(px.0[c] as f64 / 255.0);
            }
        }
        let raw = Tensor3::from_vec(3, h, w, data)?;
        let threshold = match (role, label) {
            (SplitRole::Test, Label::Tumor) => filter.test_positive_drop_threshold,
            _ => filter.background_drop_threshold,
        };
        if background_fraction(&raw, filter) > threshold {
            report.dropped_background += 1;
            continue;
        }
        let s = filter.target_size;
        let mut resized = Vec::with_capacity(3 * s * s);
        for c in 0..3 {
            resized.extend(bilinear_resize(raw.plane(c), h, w, s, s));
        }
        let pixels = Tensor3::from_vec(3, s, s, resized)?;
        let mask = match &record.mask {
            Some(mrel) => Some(load_mask(&dir.join(mrel), s)?),
            None => None,
        };
        let stem = Path::new(&rel)
            .file_stem()
            .and_then(|n| n.to_str())
            .unwrap_or(&rel)
            .to_string();
        patches.push(ImagePatch::new(pixels, label, mask, stem)?);
        report.kept += 1;
    }
    Ok((Dataset::new(patches), report))
}

fn load_mask(path: &Path, size: usize) -> Result<BinaryMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<f64> = img.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    let resized = bilinear_resize(&raw, h, w, size, size);
    BinaryMask::new(size, size, resized.into_iter().map(|v| v >= 0.5).collect())
}

/// Ordered list of dataset indices forming one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

/// Splits `0..len` into batches of `batch_size`, keeping the final short
/// batch. With `shuffle` the order is a permutation seeded by `seed`.
pub fn make_batches(len: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    Ok(order
        .chunks(batch_size)
        .map(|c| Batch { indices: c.to_vec() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            count_pos: 6,
            count_neg: 4,
            image_size: 32,
            blobs: BlobParams {
                count_min: 1,
                count_max: 2,
                radius_min: 3,
                radius_max: 6,
            },
            seed: 3,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic_dataset::<f32>(&small_spec()).unwrap();
        let b = generate_synthetic_dataset::<f32>(&small_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        let c = generate_synthetic_dataset::<f32>(&SynthSpec { seed: 4, ..small_spec() }).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn no_positives_means_empty_masks() {
        let d = generate_synthetic_dataset::<f32>(&SynthSpec { count_pos: 0, ..small_spec() }).unwrap();
        assert_eq!(d.len(), 4);
        for s in d.eval_view().iter() {
            assert_eq!(s.label, Label::Normal);
            assert!(!s.gt_mask.unwrap().any());
        }
    }

    #[test]
    fn labels_follow_mask_content() {
        let d = generate_synthetic_dataset::<f64>(&small_spec()).unwrap();
        for s in d.eval_view().iter() {
            assert_eq!(s.label.is_tumor(), s.gt_mask.unwrap().any());
            assert!(s.pixels.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn infeasible_placement_errors() {
        let spec = SynthSpec {
            count_pos: 1,
            count_neg: 0,
            image_size: 32,
            blobs: BlobParams {
                count_min: 6,
                count_max: 6,
                radius_min: 7,
                radius_max: 7,
            },
            ..SynthSpec::default()
        };
        let err = generate_synthetic_dataset::<f32>(&spec).unwrap_err();
        assert!(matches!(err, Error::Generation(_)), "{err}");
        let bad = SynthSpec {
            blobs: BlobParams { radius_max: 16, ..BlobParams::default() },
            image_size: 32,
            ..SynthSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn background_fraction_examples() {
        let spec = FilterSpec::default();
        let white = Tensor3::from_vec(3, 2, 2, vec![1.0f64; 12]).unwrap();
        assert_eq!(background_fraction(&white, &spec), 1.0);
        let black = Tensor3::<f64>::zeros(3, 2, 2);
        assert_eq!(background_fraction(&black, &spec), 0.0);
        let mut half = Tensor3::<f64>::zeros(3, 2, 2);
        for c in 0..3 {
            half.data[c * 4] = 1.0;
            half.data[c * 4 + 3] = 0.95;
        }
        assert_eq!(background_fraction(&half, &spec), 0.5);
        // one channel below the cutoff breaks whiteness
        half.data[4 + 3] = 0.5;
        assert_eq!(background_fraction(&half, &spec), 0.25);
    }

    #[test]
    fn batches_examples() {
        let b = make_batches(33, 16, 1, true).unwrap();
        assert_eq!(b.iter().map(|x| x.indices.len()).collect::<Vec<_>>(), vec![16, 16, 1]);
        let plain = make_batches(5, 2, 9, false).unwrap();
        assert_eq!(plain.concat_indices(), vec![0, 1, 2, 3, 4]);
        assert_eq!(make_batches(33, 16, 1, true).unwrap(), b);
        let mut all = b.concat_indices();
        all.sort();
        assert_eq!(all, (0..33).collect::<Vec<_>>());
        assert!(make_batches(3, 0, 1, false).is_err());
    }

    trait Concat {
        fn concat_indices(&self) -> Vec<usize>;
    }

    impl Concat for Vec<Batch> {
        fn concat_indices(&self) -> Vec<usize> {
            self.iter().flat_map(|b| b.indices.iter().copied()).collect()
        }
    }

    #[test]
    fn split_is_stratified() {
        let d = generate_synthetic_dataset::<f32>(&SynthSpec {
            count_pos: 20,
            count_neg: 10,
            image_size: 32,
            blobs: BlobParams { radius_max: 6, radius_min: 3, ..BlobParams::default() },
            ..SynthSpec::default()
        })
        .unwrap();
        let (train, val) = d.split(0.1, 0).unwrap();
        assert_eq!(val.count_label(Label::Tumor), 2);
        assert_eq!(val.count_label(Label::Normal), 1);
        assert_eq!(train.len(), 27);
    }

    #[test]
    fn patch_rejects_inconsistent_masks() {
        let px = Tensor3::<f32>::zeros(3, 2, 2);
        let full = BinaryMask::new(2, 2, vec![true; 4]).unwrap();
        assert!(ImagePatch::new(px.clone(), Label::Normal, Some(full), "x").is_err());
        assert!(ImagePatch::new(px.clone(), Label::Tumor, Some(BinaryMask::empty(2, 2)), "y").is_err());
        assert!(ImagePatch::new(px, Label::Tumor, None, "z").is_ok());
    }
}
