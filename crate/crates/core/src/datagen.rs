//! Procedural two-class texture dataset and its loaders.
//!
//! Backgrounds are band-limited oriented noise. Positive images (label 1)
//! contain one smooth blob filled with the same kind of noise at a rotated
//! orientation, plus a brightness offset that vanishes as `difficulty`
//! approaches 1. Normal images (label 0) are background only.
//!
//! On disk a split lives at `root/{split}/` with `images/NNNN.pgm`,
//! `masks/NNNN.pgm` and a `manifest.json`.
//!
//! Training code receives a [`TrainingSet`], which never opens mask files and
//! has no way to hand one out:
//!
//! ```compile_fail
//! fn peek(set: &minmax_wsl::datagen::TrainingSet) {
//!     let _ = &set.items()[0].gt_mask;
//! }
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::models::SPATIAL_MULTIPLE;
use crate::pgm::GrayImage;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "valid", "test"];
pub const NUM_CLASSES: usize = 2;

/// Foreground fraction bounds for positive images.
pub const MIN_FG_FRACTION: f64 = 0.1;
pub const MAX_FG_FRACTION: f64 = 0.6;

const TEXTURE_AMPLITUDE: f64 = 0.16;
const PIXEL_NOISE: f64 = 0.03;
const MAX_MEAN_OFFSET: f64 = 0.3;
const WAVES: usize = 8;
const WAVE_JITTER: f64 = 0.15;
const BASE_JITTER: f64 = 0.2;

/// Settings for a full train/valid/test dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Images per class in the training split; valid and test get a quarter.
    pub n_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub difficulty: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_per_class: 200,
            height: 32,
            width: 32,
            difficulty: 0.7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        validate_dims(self.height, self.width)?;
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::Config(format!(
                "difficulty {} not in [0, 1]",
                self.difficulty
            )));
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> [(&'static str, usize); 3] {
        let eval = (self.n_per_class / 4).max(1);
        [("train", self.n_per_class), ("valid", eval), ("test", eval)]
    }
}

fn validate_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % SPATIAL_MULTIPLE != 0 || width % SPATIAL_MULTIPLE != 0 {
        return Err(Error::Config(format!(
            "image size {height}x{width} must be positive and divisible by {SPATIAL_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Generator parameters behind one synthesized image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureParams {
    /// Wave-vector angle of the background texture, radians.
    pub bg_orientation: f64,
    /// Wave-vector angle of the foreground texture, radians.
    pub fg_orientation: f64,
    /// Brightness added inside the foreground.
    pub mean_offset: f64,
}

/// Brightness offset and orientation gap for a difficulty in `[0, 1]`.
pub fn contrast_for(difficulty: f64) -> (f64, f64) {
    let offset = MAX_MEAN_OFFSET * (1.0 - difficulty);
    let rotation = 0.5 * PI * (1.0 - 0.75 * difficulty);
    (offset, rotation)
}

/// One in-memory image before quantization.
#[derive(Clone, Debug)]
pub struct Synthesized {
    pub values: Vec<f64>,
    pub mask: BinaryMask,
    pub params: TextureParams,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for item `index` of a stream seeded with `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix(splitmix(seed) ^ index)
}

fn split_seed(seed: u64, split: &str) -> u64 {
    split
        .bytes()
        .fold(splitmix(seed ^ 0x5EED), |acc, b| splitmix(acc ^ b as u64))
}

fn oriented_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, orientation: f64) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            let theta = orientation + rng.random_range(-WAVE_JITTER..WAVE_JITTER);
            let freq = 2.0 * PI * rng.random_range(0.15..0.22);
            let phase = rng.random_range(0.0..2.0 * PI);
            (freq * theta.cos(), freq * theta.sin(), phase)
        })
        .collect();
    let scale = (2.0 / WAVES as f64).sqrt();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = waves
                .iter()
                .map(|(kx, ky, ph)| (kx * x as f64 + ky * y as f64 + ph).cos())
                .sum();
            out.push(scale * s);
        }
    }
    out
}

fn blob(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let area = (h * w) as f64;
    for _ in 0..100 {
        let target = rng.random_range(0.12..0.5);
        let r0 = (target * area / PI).sqrt();
        let cy = rng.random_range(0.25..0.75) * h as f64;
        let cx = rng.random_range(0.25..0.75) * w as f64;
        let harmonics: Vec<(f64, f64)> = (2..=4)
            .map(|k| (rng.random_range(-0.15..0.15), rng.random_range(0.0..2.0 * PI) + k as f64))
            .collect();
        let pixels: Vec<bool> = (0..h * w)
            .map(|i| {
                let dy = (i / w) as f64 + 0.5 - cy;
                let dx = (i % w) as f64 + 0.5 - cx;
                let phi = dy.atan2(dx);
                let wobble: f64 = harmonics
                    .iter()
                    .enumerate()
                    .map(|(j, (a, ph))| a * ((j as f64 + 2.0) * phi + ph).cos())
                    .sum();
                dx.hypot(dy) < r0 * (1.0 + wobble)
            })
            .collect();
        let mask = BinaryMask::new(h, w, pixels).expect("sized");
        let f = mask.foreground_fraction();
        if (MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&f) {
            return mask;
        }
    }
    // centred disc covering 30% of the image
    let r0 = (0.3 * area / PI).sqrt();
    let pixels = (0..h * w)
        .map(|i| {
            let dy = (i / w) as f64 + 0.5 - h as f64 / 2.0;
            let dx = (i % w) as f64 + 0.5 - w as f64 / 2.0;
            dx.hypot(dy) < r0
        })
        .collect();
    BinaryMask::new(h, w, pixels).expect("sized")
}

/// Deterministic image for `(seed, index)`.
pub fn synthesize(seed: u64, index: usize, label: usize, h: usize, w: usize, difficulty: f64) -> Synthesized {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
    let (offset, rotation) = contrast_for(difficulty);
    let bg_orientation = rng.random_range(-BASE_JITTER..BASE_JITTER);
    let fg_orientation = bg_orientation + rotation;
    let bg = oriented_noise(&mut rng, h, w, bg_orientation);
    let (fg, mask) = if label == 1 {
        (oriented_noise(&mut rng, h, w, fg_orientation), blob(&mut rng, h, w))
    } else {
        (Vec::new(), BinaryMask::filled(h, w, false))
    };
    let values = (0..h * w)
        .map(|i| {
            let noise = PIXEL_NOISE * (rng.random::<f64>() - 0.5) * 2.0 * 3f64.sqrt();
            let v = if mask.pixels()[i] {
                0.5 + offset + TEXTURE_AMPLITUDE * fg[i]
            } else {
                0.5 + TEXTURE_AMPLITUDE * bg[i]
            };
            (v + noise).clamp(0.0, 1.0)
        })
        .collect();
    Synthesized {
        values,
        mask,
        params: TextureParams {
            bg_orientation,
            fg_orientation,
            mean_offset: if label == 1 { offset } else { 0.0 },
        },
    }
}

/// One row of a manifest. Paths are relative to the manifest's directory
/// unless absolute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: usize,
    pub image: String,
    #[serde(default)]
    pub mask: Option<String>,
    pub label: usize,
}

/// JSON description of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub split: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub difficulty: Option<f64>,
    pub class_counts: Vec<usize>,
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative entry paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported manifest schema_version {}", manifest.schema_version),
            ));
        }
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.check().map_err(|msg| Error::format(path, msg))?;
        Ok(manifest)
    }

    /// Loads `root/{split}/manifest.json`.
    pub fn load_split(root: &Path, split: &str) -> Result<Self> {
        Self::load(&root.join(split).join(MANIFEST_FILE))
    }

    pub fn save(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(MANIFEST_FILE);
        let mut json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        json.push(b'\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn check(&self) -> std::result::Result<(), String> {
        validate_dims(self.height, self.width).map_err(|e| e.to_string())?;
        let mut counts = vec![0; self.class_counts.len()];
        for e in &self.entries {
            match counts.get_mut(e.label) {
                Some(c) => *c += 1,
                None => return Err(format!("entry {} has label {} out of range", e.id, e.label)),
            }
        }
        if counts != self.class_counts {
            return Err(format!(
                "class_counts {:?} disagree with entries {counts:?}",
                self.class_counts
            ));
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Class-stratified random partition. `fractions` must be positive and sum
    /// to one; each class is cut in order and the last part takes any remainder.
    pub fn split(&self, fractions: &[f64], seed: u64) -> Result<Vec<DatasetManifest>> {
        if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::InvalidArgument("split fractions must be positive".into()));
        }
        if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("split fractions must sum to 1".into()));
        }
        let mut parts: Vec<Vec<ManifestEntry>> = vec![Vec::new(); fractions.len()];
        for class in 0..self.class_counts.len() {
            let mut members: Vec<&ManifestEntry> = self.entries.iter().filter(|e| e.label == class).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64));
            members.shuffle(&mut rng);
            let n = members.len();
            let mut start = 0;
            for (k, f) in fractions.iter().enumerate() {
                let take = if k + 1 == fractions.len() {
                    n - start
                } else {
                    ((f * n as f64).round() as usize).min(n - start)
                };
                parts[k].extend(members[start..start + take].iter().map(|e| (*e).clone()));
                start += take;
            }
        }
        Ok(parts
            .into_iter()
            .enumerate()
            .map(|(k, mut entries)| {
                entries.sort_by_key(|e| e.id);
                let mut class_counts = vec![0; self.class_counts.len()];
                for e in &entries {
                    class_counts[e.label] += 1;
                }
                DatasetManifest {
                    split: format!("{}.{k}", self.split),
                    class_counts,
                    entries,
                    ..self.clone()
                }
            })
            .collect())
    }
}

/// Writes one split under `root/{split}` and returns its manifest.
pub fn generate_split(
    root: &Path,
    split: &str,
    seed: u64,
    n_per_class: usize,
    height: usize,
    width: usize,
    difficulty: f64,
) -> Result<DatasetManifest> {
    GeneratorConfig {
        seed,
        n_per_class,
        height,
        width,
        difficulty,
    }
    .validate()?;
    let dir = root.join(split);
    let stream = split_seed(seed, split);
    let mut entries = Vec::with_capacity(2 * n_per_class);
    for index in 0..NUM_CLASSES * n_per_class {
        let label = index % NUM_CLASSES;
        let s = synthesize(stream, index, label, height, width, difficulty);
        let image = format!("images/{index:04}.pgm");
        let mask = format!("masks/{index:04}.pgm");
        GrayImage::from_unit(width, height, &s.values)?.write(&dir.join(&image))?;
        s.mask.write_pgm(&dir.join(&mask))?;
        entries.push(ManifestEntry {
            id: index,
            image,
            mask: Some(mask),
            label,
        });
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        split: split.to_string(),
        seed,
        height,
        width,
        difficulty: Some(difficulty),
        class_counts: vec![n_per_class; NUM_CLASSES],
        entries,
        root: dir,
    };
    manifest.save()?;
    Ok(manifest)
}

/// Writes the train, valid and test splits.
pub fn generate(root: &Path, cfg: &GeneratorConfig) -> Result<Vec<DatasetManifest>> {
    cfg.validate()?;
    cfg.split_sizes()
        .iter()
        .map(|(split, n)| generate_split(root, split, cfg.seed, *n, cfg.height, cfg.width, cfg.difficulty))
        .collect()
}

fn read_image(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<Tensor> {
    let path = manifest.resolve(&entry.image);
    let img = GrayImage::read(&path)?;
    if (img.height, img.width) != (manifest.height, manifest.width) {
        return Err(Error::format(
            &path,
            format!(
                "image is {}x{}, manifest says {}x{}",
                img.height, img.width, manifest.height, manifest.width
            ),
        ));
    }
    Tensor::new(vec![1, img.height, img.width], img.to_unit())
}

/// An image and its class, with no access to any pixel annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: usize,
    pub image: Tensor,
    pub label: usize,
}

/// Images and image-level labels for training.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    height: usize,
    width: usize,
    num_classes: usize,
    items: Vec<LabeledImage>,
}

impl TrainingSet {
    /// Reads every image listed in the manifest. Mask files are never opened.
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let items = manifest
            .entries
            .iter()
            .map(|e| {
                Ok(LabeledImage {
                    id: e.id,
                    image: read_image(manifest, e)?,
                    label: e.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            height: manifest.height,
            width: manifest.width,
            num_classes: manifest.class_counts.len(),
            items,
        })
    }

    pub fn from_items(height: usize, width: usize, num_classes: usize, items: Vec<LabeledImage>) -> Self {
        Self {
            height,
            width,
            num_classes,
            items,
        }
    }

    pub fn items(&self) -> &[LabeledImage] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// An image, its class, and its ground-truth foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: Tensor,
    pub label: usize,
    pub gt_mask: BinaryMask,
}

/// Fully annotated images for evaluation.
#[derive(Clone, Debug)]
pub struct EvaluationSet {
    pub split: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl EvaluationSet {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                let rel = e.mask.as_deref().ok_or_else(|| {
                    Error::format(manifest.resolve(&e.image), "entry has no ground-truth mask")
                })?;
                let path = manifest.resolve(rel);
                let gt_mask = BinaryMask::read_pgm(&path)?;
                if gt_mask.shape() != (manifest.height, manifest.width) {
                    return Err(Error::format(&path, "mask size differs from manifest"));
                }
                Ok(Sample {
                    id: e.id,
                    image: read_image(manifest, e)?,
                    label: e.label,
                    gt_mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            split: manifest.split.clone(),
            height: manifest.height,
            width: manifest.width,
            num_classes: manifest.class_counts.len(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Dominant gradient orientation of the pixels selected by `select`, from the
/// summed structure tensor. Returns an angle in `(-pi/2, pi/2]`.
pub fn dominant_orientation(values: &[f64], h: usize, w: usize, select: impl Fn(usize) -> bool) -> f64 {
    let (mut jxx, mut jyy, mut jxy) = (0.0, 0.0, 0.0);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            if !select(i) {
                continue;
            }
            let gx = (values[i + 1] - values[i - 1]) / 2.0;
            let gy = (values[i + w] - values[i - w]) / 2.0;
            jxx += gx * gx;
            jyy += gy * gy;
            jxy += gx * gy;
        }
    }
    0.5 * (2.0 * jxy).atan2(jxx - jyy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn angle_gap(a: f64, b: f64) -> f64 {
        // orientations are defined modulo pi
        let d = (a - b).rem_euclid(PI);
        d.min(PI - d)
    }

    #[test]
    fn synthesis_is_deterministic_and_labelled() {
        for index in 0..20 {
            let label = index % 2;
            let a = synthesize(42, index, label, 32, 32, 0.7);
            let b = synthesize(42, index, label, 32, 32, 0.7);
            assert_eq!(a.values, b.values);
            assert_eq!(a.mask, b.mask);
            let f = a.mask.foreground_fraction();
            if label == 0 {
                assert_eq!(f, 0.0);
            } else {
                assert!((MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&f), "{f}");
            }
            assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(synthesize(1, 0, 1, 32, 32, 0.5).values, synthesize(2, 0, 1, 32, 32, 0.5).values);
    }

    fn region_means(difficulty: f64) -> (f64, f64, Vec<(f64, f64, f64)>) {
        let (mut fg_sum, mut fg_n, mut bg_sum, mut bg_n) = (0.0, 0usize, 0.0, 0usize);
        let mut orientations = Vec::new();
        for index in 0..200 {
            let s = synthesize(7, index, 1, 32, 32, difficulty);
            for (v, m) in s.values.iter().zip(s.mask.pixels()) {
                if *m {
                    fg_sum += v;
                    fg_n += 1;
                } else {
                    bg_sum += v;
                    bg_n += 1;
                }
            }
            let px = s.mask.pixels();
            let fg = dominant_orientation(&s.values, 32, 32, |i| px[i]);
            let bg = dominant_orientation(&s.values, 32, 32, |i| !px[i]);
            orientations.push((fg, bg, angle_gap(s.params.fg_orientation, s.params.bg_orientation)));
        }
        (fg_sum / fg_n as f64, bg_sum / bg_n as f64, orientations)
    }

    #[test]
    fn easy_images_differ_in_brightness() {
        let (fg, bg, _) = region_means(0.0);
        assert!(fg - bg >= 0.2, "fg {fg} bg {bg}");
    }

    #[test]
    fn hard_images_differ_only_in_orientation() {
        let (fg, bg, orientations) = region_means(1.0);
        assert!((fg - bg).abs() <= 0.02, "fg {fg} bg {bg}");
        let mut measured = 0.0;
        let mut expected = 0.0;
        for (f, b, want) in &orientations {
            measured += angle_gap(*f, *b);
            expected += want;
        }
        let n = orientations.len() as f64;
        let (measured, expected) = (measured / n, expected / n);
        assert!((expected - 0.125 * PI).abs() < 1e-12);
        assert!((measured - expected).abs() < 0.1, "measured {measured} expected {expected}");
    }

    #[test]
    fn contrast_schedule_endpoints() {
        let (o0, r0) = contrast_for(0.0);
        let (o1, r1) = contrast_for(1.0);
        assert_eq!(o1, 0.0);
        assert!(o0 > 0.2 && r0 > r1 && r1 > 0.0);
    }

    #[test]
    fn generator_rejects_bad_dims() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_split(dir.path(), "train", 0, 2, 30, 32, 0.5).is_err());
        assert!(generate_split(dir.path(), "train", 0, 0, 32, 32, 0.5).is_err());
        assert!(generate_split(dir.path(), "train", 0, 2, 32, 32, 1.5).is_err());
    }

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_split(dir.path(), "train", 3, 3, 16, 24, 0.7).unwrap();
        let loaded = DatasetManifest::load_split(dir.path(), "train").unwrap();
        assert_eq!(loaded, m);
        let set = EvaluationSet::load(&loaded).unwrap();
        let stream = split_seed(3, "train");
        for s in &set.samples {
            let orig = synthesize(stream, s.id, s.label, 16, 24, 0.7);
            let max_err = orig
                .values
                .iter()
                .zip(s.image.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_err <= 1.0 / 255.0);
            assert_eq!(orig.mask, s.gt_mask);
        }
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_split(dir.path(), "train", 5, 50, 8, 8, 0.5).unwrap();
        let parts = m.split(&[0.8, 0.2], 9).unwrap();
        assert_eq!(parts[0].len(), 80);
        assert_eq!(parts[1].len(), 20);
        assert_eq!(parts[0].class_counts, vec![40, 40]);
        let ids: std::collections::BTreeSet<usize> =
            parts.iter().flat_map(|p| p.entries.iter().map(|e| e.id)).collect();
        assert_eq!(ids.len(), 100);
        assert!(m.split(&[0.5, 0.6], 0).is_err());
        assert!(m.split(&[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn missing_or_corrupt_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_split(dir.path(), "test", 1, 2, 8, 8, 0.5).unwrap();
        let victim = m.resolve(&m.entries[1].image);
        fs::write(&victim, b"garbage").unwrap();
        let err = TrainingSet::load(&m).unwrap_err().to_string();
        assert!(err.contains(victim.to_str().unwrap()), "{err}");
        fs::remove_file(&victim).unwrap();
        let err = EvaluationSet::load(&m).unwrap_err().to_string();
        assert!(err.contains("0001.pgm"), "{err}");
        let err = DatasetManifest::load_split(dir.path(), "nope").unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
    }

    #[test]
    fn training_loader_never_opens_masks() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_split(dir.path(), "train", 1, 4, 8, 8, 0.5).unwrap();
        fs::remove_dir_all(dir.path().join("train/masks")).unwrap();
        let set = TrainingSet::load(&m).unwrap();
        assert_eq!(set.len(), 8);
        assert!(EvaluationSet::load(&m).is_err());
    }

    #[test]
    fn manifest_rejects_unknown_keys_and_bad_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_split(dir.path(), "train", 1, 1, 8, 8, 0.5).unwrap();
        let path = m.root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replacen("\"seed\"", "\"sede\"", 1)).unwrap();
        assert!(DatasetManifest::load(&path).is_err());
        let mut bad = m.clone();
        bad.class_counts = vec![2, 0];
        bad.save().unwrap();
        assert!(DatasetManifest::load(&path).is_err());
    }
}
