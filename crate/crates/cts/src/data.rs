//! Synthetic segmentation datasets: generation, on-disk layout, loading and
//! seeded batching.
//!
//! Layout: `<root>/{train,val,test}/{images,masks}/<id>.png` plus
//! `<root>/manifest.json`. Images are 8-bit grayscale (16-bit accepted on
//! load); masks are 8-bit with values {0, 255}.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{Device, Tensor};
use cts_core::preprocess::{anisotropic_diffusion, encode_mask, normalize_image, DiffusionParams};
use cts_core::{ImageGrid, MaskGrid};
use image::{DynamicImage, GrayImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Ellipse,
    SmoothBlob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub shape_family: ShapeFamily,
    /// Upper bound on foreground shapes per image (at least one is drawn).
    pub max_shapes: usize,
    /// Std of the multiplicative (speckle) noise.
    pub speckle_strength: f64,
    /// Std of the additive noise, in [0, 1] intensity units.
    pub gaussian_noise_std: f64,
    /// Peak relative amplitude of the linear bias field.
    pub bias_field_strength: f64,
    /// Std (pixels) of the Gaussian blur applied to shape boundaries.
    pub boundary_blur: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_train: 200,
            n_val: 50,
            n_test: 50,
            shape_family: ShapeFamily::SmoothBlob,
            max_shapes: 2,
            speckle_strength: 0.2,
            gaussian_noise_std: 0.05,
            bias_field_strength: 0.25,
            boundary_blur: 1.2,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.image_size < 16 {
            return bad("image_size must be >= 16");
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("split sizes must be >= 1");
        }
        if self.max_shapes == 0 {
            return bad("max_shapes must be >= 1");
        }
        let strengths = [
            self.speckle_strength,
            self.gaussian_noise_std,
            self.bias_field_strength,
            self.boundary_blur,
        ];
        if strengths.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("noise strengths and blur must be finite and >= 0");
        }
        Ok(())
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// Present when the dataset came from the synthetic generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticConfig>,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn entries_mut(&mut self, split: Split) -> &mut Vec<ManifestEntry> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Foreground fraction bounds enforced by rejection sampling.
pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.5;

fn sample_stream(split: Split, index: usize) -> u64 {
    ((split as u64) << 40) | index as u64
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn render_shape(rng: &mut ChaCha8Rng, family: ShapeFamily, size: usize, mask: &mut [u8]) {
    let s = size as f64;
    let cx = rng.random_range(0.25..0.75) * s;
    let cy = rng.random_range(0.25..0.75) * s;
    match family {
        ShapeFamily::Ellipse => {
            let a = rng.random_range(0.08..0.3) * s;
            let b = rng.random_range(0.08..0.3) * s;
            let (sin, cos) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let u = (dx * cos + dy * sin) / a;
                    let v = (-dx * sin + dy * cos) / b;
                    if u * u + v * v <= 1.0 {
                        mask[y * size + x] = 1;
                    }
                }
            }
        }
        ShapeFamily::SmoothBlob => {
            let r0 = rng.random_range(0.1..0.28) * s;
            let harmonics: Vec<(f64, f64, f64)> = (2..=4)
                .map(|k| {
                    let amp = rng.random_range(0.0..0.3) / f64::from(k - 1);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    (f64::from(k), amp, phase)
                })
                .collect();
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let phi = dy.atan2(dx);
                    let r = r0 * (1.0 + harmonics.iter().map(|(k, a, p)| a * (k * phi + p).cos()).sum::<f64>());
                    if dx.hypot(dy) <= r {
                        mask[y * size + x] = 1;
                    }
                }
            }
        }
    }
}

fn gaussian_blur(values: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (j, w) in kernel.iter().enumerate() {
                    let o = j as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x as isize + o).clamp(0, size as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + o).clamp(0, size as isize - 1) as usize)
                    };
                    acc += w * src[sy * size + sx];
                }
                out[y * size + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(values, true), false)
}

/// One synthetic sample: 8-bit image and binary mask, as raw pixel vectors.
fn synthesize(cfg: &SyntheticConfig, split: Split, index: usize) -> (Vec<u8>, Vec<u8>) {
    let size = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(sample_stream(split, index));
    let n = size * size;
    let mut mask = vec![0u8; n];
    loop {
        mask.fill(0);
        let shapes = rng.random_range(1..=cfg.max_shapes);
        for _ in 0..shapes {
            render_shape(&mut rng, cfg.shape_family, size, &mut mask);
        }
        let frac = mask.iter().filter(|&&m| m == 1).count() as f64 / n as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break;
        }
    }
    let bg = rng.random_range(0.2..0.4);
    let fg = rng.random_range(0.55..0.8);
    let gx = rng.random_range(-1.0..1.0);
    let gy = rng.random_range(-1.0..1.0);
    let soft = gaussian_blur(
        &mask.iter().map(|&m| f64::from(m)).collect::<Vec<_>>(),
        size,
        cfg.boundary_blur,
    );
    let s = size as f64;
    let mut image = Vec::with_capacity(n);
    for (i, soft) in soft.iter().enumerate() {
        let (x, y) = ((i % size) as f64 / s - 0.5, (i / size) as f64 / s - 0.5);
        let bias = 1.0 + cfg.bias_field_strength * (gx * x + gy * y);
        let clean = (bg + (fg - bg) * soft) * bias;
        let speckled = clean * (1.0 + cfg.speckle_strength * normal(&mut rng));
        let noisy = speckled + cfg.gaussian_noise_std * normal(&mut rng);
        image.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    (image, mask)
}

fn write_png(path: &Path, size: usize, pixels: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(size as u32, size as u32, pixels)
        .ok_or_else(|| Error::InvalidArgument("pixel buffer does not match image size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::json("serialize"))?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

/// Writes a seeded synthetic dataset under `out_dir` and returns its manifest.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        generator: Some(cfg.clone()),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for split in Split::ALL {
        for sub in ["images", "masks"] {
            let dir = out_dir.join(split.as_str()).join(sub);
            fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        }
        for i in 0..cfg.count(split) {
            let id = format!("{split}_{i:04}");
            let image_rel = format!("{split}/images/{id}.png");
            let mask_rel = format!("{split}/masks/{id}.png");
            let (image, mask) = synthesize(cfg, split, i);
            write_png(&out_dir.join(&image_rel), cfg.image_size, image)?;
            write_png(
                &out_dir.join(&mask_rel),
                cfg.image_size,
                mask.into_iter().map(|m| m * 255).collect(),
            )?;
            manifest.entries_mut(split).push(ManifestEntry {
                id,
                image: image_rel,
                mask: mask_rel,
            });
        }
    }
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Filtering and normalization applied to every image on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Skip the anisotropic diffusion filter when false.
    pub denoise: bool,
    pub diffusion: DiffusionParams,
    pub lo_percentile: f64,
    pub hi_percentile: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            denoise: true,
            diffusion: DiffusionParams::default(),
            lo_percentile: 1.0,
            hi_percentile: 99.0,
        }
    }
}

impl PreprocessConfig {
    /// Raw intensities on a 0–255 scale → filtered, normalized to [-1, 1].
    pub fn apply(&self, raw: &ImageGrid) -> Result<ImageGrid> {
        let filtered = if self.denoise {
            anisotropic_diffusion(raw, &self.diffusion)?
        } else {
            raw.clone()
        };
        Ok(normalize_image(&filtered, self.lo_percentile, self.hi_percentile)?)
    }
}

/// Reads a grayscale PNG (8- or 16-bit) as intensities on a 0–255 scale.
pub fn read_image(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| f32::from(v) / 257.0).collect(),
        other => other.into_luma8().into_raw().into_iter().map(f32::from).collect(),
    };
    Ok(ImageGrid::from_vec(h, w, data)?)
}

/// Reads an 8-bit {0, 255} mask PNG into label space.
pub fn read_mask(path: &Path) -> Result<std::result::Result<MaskGrid, u8>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_luma8().into_raw();
    if let Some(&bad) = raw.iter().find(|&&v| v != 0 && v != 255) {
        return Ok(Err(bad));
    }
    Ok(Ok(MaskGrid::from_vec(h, w, raw.into_iter().map(|v| u8::from(v == 255)).collect())?))
}

/// Writes a label-space mask as an 8-bit {0, 255} PNG.
pub fn write_mask(path: &Path, mask: &MaskGrid) -> Result<()> {
    let img = GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.as_slice().iter().map(|&v| v * 255).collect(),
    )
    .ok_or_else(|| Error::InvalidArgument("mask buffer does not match its size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// Preprocessed image in [-1, 1].
    pub image: ImageGrid,
    /// Binary mask in label space.
    pub mask: MaskGrid,
}

/// Read-only, validated dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
    train: Vec<SamplePair>,
    val: Vec<SamplePair>,
    test: Vec<SamplePair>,
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn split(&self, split: Split) -> &[SamplePair] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Image height and width shared by every sample, if any are loaded.
    pub fn image_dims(&self) -> Option<(usize, usize)> {
        Split::ALL
            .iter()
            .find_map(|s| self.split(*s).first().map(|p| p.image.dims()))
    }
}

fn load_pair(root: &Path, entry: &ManifestEntry, pre: &PreprocessConfig) -> Result<SamplePair> {
    let fail = |reason: String| Error::Sample { id: entry.id.clone(), reason };
    let image_path = root.join(&entry.image);
    let mask_path = root.join(&entry.mask);
    let raw = read_image(&image_path).map_err(|e| fail(e.to_string()))?;
    let mask = match read_mask(&mask_path).map_err(|e| fail(e.to_string()))? {
        Ok(m) => m,
        Err(value) => {
            return Err(fail(format!(
                "mask {} contains value {value}; masks must be 0 or 255",
                mask_path.display()
            )))
        }
    };
    if raw.dims() != mask.dims() {
        return Err(fail(format!(
            "image is {:?} but mask is {:?}",
            raw.dims(),
            mask.dims()
        )));
    }
    let image = pre.apply(&raw).map_err(|e| fail(e.to_string()))?;
    Ok(SamplePair {
        id: entry.id.clone(),
        image,
        mask,
    })
}

/// Loads and validates every split listed in `<dir>/manifest.json`.
pub fn load_dataset(dir: &Path, pre: &PreprocessConfig) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(Error::io(&manifest_path))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(Error::json(manifest_path.display().to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Dataset {
            path: dir.to_path_buf(),
            reason: format!(
                "manifest format_version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        });
    }
    let mut seen = HashSet::new();
    for split in Split::ALL {
        for e in manifest.entries(split) {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Dataset {
                    path: dir.to_path_buf(),
                    reason: format!("duplicate sample id {}", e.id),
                });
            }
        }
    }
    let load = |split| {
        manifest
            .entries(split)
            .iter()
            .map(|e| load_pair(dir, e, pre))
            .collect::<Result<Vec<_>>>()
    };
    let (train, val, test) = (load(Split::Train)?, load(Split::Val)?, load(Split::Test)?);
    let dataset = Dataset {
        root: dir.to_path_buf(),
        manifest,
        train,
        val,
        test,
    };
    if let Some(dims) = dataset.image_dims() {
        for split in Split::ALL {
            if let Some(p) = dataset.split(split).iter().find(|p| p.image.dims() != dims) {
                return Err(Error::Sample {
                    id: p.id.clone(),
                    reason: format!("size {:?} differs from dataset size {dims:?}", p.image.dims()),
                });
            }
        }
    }
    Ok(dataset)
}

/// A stacked minibatch, all tensors `(B, 1, H, W)` f32.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Tensor,
    /// Masks in encoded space {-1, +1}.
    pub masks_encoded: Tensor,
    /// Masks in label space {0, 1}.
    pub masks: Tensor,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SamplePair]) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (h, w) = first.image.dims();
        let b = pairs.len();
        let mut images = Vec::with_capacity(b * h * w);
        let mut encoded = Vec::with_capacity(b * h * w);
        let mut labels = Vec::with_capacity(b * h * w);
        for p in pairs {
            if p.image.dims() != (h, w) || p.mask.dims() != (h, w) {
                return Err(Error::Sample {
                    id: p.id.clone(),
                    reason: "size differs from the rest of the batch".into(),
                });
            }
            images.extend_from_slice(p.image.as_slice());
            encoded.extend_from_slice(encode_mask(&p.mask)?.as_slice());
            labels.extend(p.mask.as_slice().iter().map(|&v| f32::from(v)));
        }
        let dev = Device::Cpu;
        Ok(Self {
            ids: pairs.iter().map(|p| p.id.clone()).collect(),
            images: Tensor::from_vec(images, (b, 1, h, w), &dev)?,
            masks_encoded: Tensor::from_vec(encoded, (b, 1, h, w), &dev)?,
            masks: Tensor::from_vec(labels, (b, 1, h, w), &dev)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Shuffled sample order for one epoch, a pure function of `epoch_seed`.
pub fn epoch_order(len: usize, epoch_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order
}

/// Index groups for one epoch; the final group may be short.
pub fn batch_indices(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if len == 0 {
        return Err(Error::InvalidArgument("cannot batch an empty split".into()));
    }
    Ok(epoch_order(len, epoch_seed)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// All batches of one epoch of `split`, shuffled by `epoch_seed`.
pub fn iterate_batches(
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Batch>> {
    let pairs = dataset.split(split);
    batch_indices(pairs.len(), batch_size, epoch_seed)?
        .iter()
        .map(|idx| Batch::from_pairs(&idx.iter().map(|&i| &pairs[i]).collect::<Vec<_>>()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesis_is_deterministic_and_bounded() {
        let cfg = SyntheticConfig { n_train: 3, ..Default::default() };
        for family in [ShapeFamily::Ellipse, ShapeFamily::SmoothBlob] {
            let cfg = SyntheticConfig { shape_family: family, ..cfg.clone() };
            for i in 0..20 {
                let (img, mask) = synthesize(&cfg, Split::Train, i);
                assert_eq!((img.clone(), mask.clone()), synthesize(&cfg, Split::Train, i));
                let frac = mask.iter().filter(|&&m| m == 1).count() as f64 / mask.len() as f64;
                assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac), "{frac}");
            }
        }
    }

    #[test]
    fn splits_use_distinct_streams() {
        let cfg = SyntheticConfig::default();
        assert_ne!(synthesize(&cfg, Split::Train, 0), synthesize(&cfg, Split::Val, 0));
    }

    #[test]
    fn batch_indices_cover_split_once() {
        let groups = batch_indices(10, 3, 5).unwrap();
        assert_eq!(groups.iter().map(Vec::len).collect::<Vec<_>>(), [3, 3, 3, 1]);
        let mut all: Vec<usize> = groups.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(groups, batch_indices(10, 3, 5).unwrap());
        assert!(batch_indices(0, 3, 5).is_err());
        assert!(batch_indices(4, 0, 5).is_err());
    }

    #[test]
    fn split_names_round_trip() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("holdout".parse::<Split>().is_err());
    }
}
