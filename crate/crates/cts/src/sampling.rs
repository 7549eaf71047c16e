//! Single-step and multistep consistency sampling, and batch prediction to
//! mask/overlay PNGs.

use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use cts_core::preprocess::{binarize, decode_mask};
use cts_core::schedule::karras_sigmas;
use cts_core::{ImageGrid, MaskGrid};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::data::{write_mask, SamplePair};
use crate::error::{Error, Result};
use crate::evaluation::{report_from_predictions, EvalReport};
use crate::networks::ConsistencyModel;
use crate::params::ModelParams;

/// Images per network call when segmenting many images.
pub const SAMPLE_BATCH: usize = 16;

pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// Foreground probability in `[0, 1]`.
    pub probability: ImageGrid,
    pub mask: MaskGrid,
}

/// Noise seed for one image, derived from the run seed and the image id so
/// that results do not depend on batch composition or order.
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(id.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// `m` decreasing levels from `T` to `ε` (just `[T]` for `m = 1`).
pub fn multistep_sigmas(m: usize, cfg: &cts_core::ScheduleConfig) -> Result<Vec<f64>> {
    match m {
        0 => Err(Error::InvalidArgument("multistep sampling needs at least one level".into())),
        1 => Ok(vec![cfg.sigma_max]),
        _ => Ok(karras_sigmas(m, cfg)?.into_iter().rev().collect()),
    }
}

fn check_sigmas(sigmas: &[f64], cfg: &cts_core::ScheduleConfig) -> Result<()> {
    let bad = |m: &str| Err(Error::InvalidArgument(format!("noise levels {sigmas:?}: {m}")));
    match sigmas.first() {
        None => return bad("empty"),
        Some(&first) if first != cfg.sigma_max => return bad("must start at the maximum level"),
        _ => {}
    }
    if sigmas.windows(2).any(|w| !(w[1] < w[0])) {
        return bad("must be strictly decreasing");
    }
    if sigmas.iter().any(|&s| !(s >= cfg.sigma_min)) {
        return bad("must not go below the minimum level");
    }
    Ok(())
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Multistep sampling over a batch of images, one noise stream per image.
///
/// Each level costs one consistency-function evaluation:
/// `y ← f(x, t_i)`, then `x ← y + √(t_{i+1}² − ε²)·z′` before the next level.
pub fn segment_images(
    model: &ConsistencyModel,
    params: &ModelParams,
    images: &[&ImageGrid],
    seeds: &[u64],
    sigmas: &[f64],
    threshold: f64,
) -> Result<Vec<Segmentation>> {
    check_sigmas(sigmas, &model.schedule)?;
    if images.len() != seeds.len() {
        return Err(Error::InvalidArgument("one seed per image is required".into()));
    }
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = first.dims();
    if let Some(bad) = images.iter().find(|im| im.dims() != (h, w)) {
        return Err(Error::InvalidArgument(format!(
            "image {:?} differs from batch size {:?}",
            bad.dims(),
            (h, w)
        )));
    }
    let b = images.len();
    let dev = Device::Cpu;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let draw = |rngs: &mut [ChaCha8Rng]| -> Result<Tensor> {
        let z: Vec<f32> = rngs.iter_mut().flat_map(|r| normals(r, h * w)).collect();
        Ok(Tensor::from_vec(z, (b, 1, h, w), &dev)?)
    };
    let pixels: Vec<f32> = images.iter().flat_map(|im| im.as_slice().iter().copied()).collect();
    let x_d = Tensor::from_vec(pixels, (b, 1, h, w), &dev)?;

    let mut x = (draw(&mut rngs)? * sigmas[0])?;
    let mut y = x.clone();
    for (i, &t) in sigmas.iter().enumerate() {
        y = model.forward(params, &x, &x_d, t)?.y;
        if let Some(&next) = sigmas.get(i + 1) {
            let scale = (next * next - model.schedule.sigma_min.powi(2)).max(0.0).sqrt();
            x = (&y + (draw(&mut rngs)? * scale)?)?;
        }
    }
    let y: Vec<f32> = y.flatten_all()?.to_vec1()?;
    y.chunks(h * w)
        .map(|chunk| {
            let probability = decode_mask(&ImageGrid::from_vec(h, w, chunk.to_vec())?);
            let mask = binarize(&probability, threshold as f32)?;
            Ok(Segmentation { probability, mask })
        })
        .collect()
}

/// One image, one denoiser evaluation from `x_T = T·z`.
pub fn segment_single_step(
    model: &ConsistencyModel,
    params: &ModelParams,
    x_d: &ImageGrid,
    seed: u64,
    threshold: f64,
) -> Result<Segmentation> {
    let sigmas = [model.schedule.sigma_max];
    Ok(segment_images(model, params, &[x_d], &[seed], &sigmas, threshold)?.remove(0))
}

/// One image through the given decreasing noise levels.
pub fn segment_multistep(
    model: &ConsistencyModel,
    params: &ModelParams,
    x_d: &ImageGrid,
    sigmas: &[f64],
    seed: u64,
    threshold: f64,
) -> Result<Segmentation> {
    Ok(segment_images(model, params, &[x_d], &[seed], sigmas, threshold)?.remove(0))
}

/// Segments `pairs` in chunks of [`SAMPLE_BATCH`], seeding each image by id.
pub fn segment_pairs(
    model: &ConsistencyModel,
    params: &ModelParams,
    pairs: &[SamplePair],
    seed: u64,
    sigmas: &[f64],
    threshold: f64,
) -> Result<Vec<Segmentation>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(SAMPLE_BATCH) {
        let images: Vec<&ImageGrid> = chunk.iter().map(|p| &p.image).collect();
        let seeds: Vec<u64> = chunk.iter().map(|p| sample_seed(seed, &p.id)).collect();
        out.extend(segment_images(model, params, &images, &seeds, sigmas, threshold)?);
    }
    Ok(out)
}

/// Grayscale image with the mask boundary painted red.
pub fn overlay(image: &ImageGrid, mask: &MaskGrid) -> Result<RgbImage> {
    if image.dims() != mask.dims() {
        return Err(Error::InvalidArgument(format!(
            "overlay image {:?} and mask {:?} differ in size",
            image.dims(),
            mask.dims()
        )));
    }
    let (h, w) = image.dims();
    let (lo, hi) = image
        .as_slice()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let inside = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && *mask.get(r as usize, c as usize) == 1
    };
    Ok(RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let (r, c) = (r as isize, c as isize);
        let edge = inside(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !inside(r + dr, c + dc));
        if edge {
            Rgb([255, 0, 0])
        } else {
            let v = ((*image.get(r as usize, c as usize) - lo) / span * 255.0).round() as u8;
            Rgb([v, v, v])
        }
    }))
}

/// Writes `<id>_mask.png` and `<id>_overlay.png` for one prediction.
pub fn write_prediction(out_dir: &Path, id: &str, image: &ImageGrid, mask: &MaskGrid) -> Result<()> {
    write_mask(&out_dir.join(format!("{id}_mask.png")), mask)?;
    let path = out_dir.join(format!("{id}_overlay.png"));
    overlay(image, mask)?
        .save_with_format(&path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path, source })
}

/// Segments every pair, writes mask and overlay PNGs plus `metrics.json`.
pub fn predict_batch(
    model: &ConsistencyModel,
    params: &ModelParams,
    pairs: &[SamplePair],
    out_dir: &Path,
    seed: u64,
    sigmas: &[f64],
    threshold: f64,
) -> Result<EvalReport> {
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let segs = segment_pairs(model, params, pairs, seed, sigmas, threshold)?;
    for (pair, seg) in pairs.iter().zip(&segs) {
        write_prediction(out_dir, &pair.id, &pair.image, &seg.mask)?;
    }
    let ids: Vec<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
    let preds: Vec<&MaskGrid> = segs.iter().map(|s| &s.mask).collect();
    let truths: Vec<&MaskGrid> = pairs.iter().map(|p| &p.mask).collect();
    let report = report_from_predictions(&ids, &preds, &truths)?;
    report.save(&out_dir.join(METRICS_FILE))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_depend_on_seed_and_id() {
        assert_eq!(sample_seed(1, "a"), sample_seed(1, "a"));
        assert_ne!(sample_seed(1, "a"), sample_seed(2, "a"));
        assert_ne!(sample_seed(1, "a"), sample_seed(1, "b"));
    }

    #[test]
    fn sigma_subsets() {
        let cfg = cts_core::ScheduleConfig::default();
        let s = multistep_sigmas(10, &cfg).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!((s[0], s[9]), (cfg.sigma_max, cfg.sigma_min));
        check_sigmas(&s, &cfg).unwrap();
        assert_eq!(multistep_sigmas(1, &cfg).unwrap(), [cfg.sigma_max]);
        assert!(multistep_sigmas(0, &cfg).is_err());
        assert!(check_sigmas(&[], &cfg).is_err());
        assert!(check_sigmas(&[10.0, 1.0], &cfg).is_err());
        assert!(check_sigmas(&[80.0, 80.0], &cfg).is_err());
        assert!(check_sigmas(&[80.0, 0.001], &cfg).is_err());
    }

    #[test]
    fn overlay_marks_only_the_boundary() {
        let img = ImageGrid::from_vec(5, 5, (0..25).map(|v| v as f32).collect()).unwrap();
        let mut m = vec![0u8; 25];
        for r in 1..4 {
            for c in 1..4 {
                m[r * 5 + c] = 1;
            }
        }
        let mask = MaskGrid::from_vec(5, 5, m).unwrap();
        let out = overlay(&img, &mask).unwrap();
        let red = |x, y| out.get_pixel(x, y).0 == [255, 0, 0];
        assert!(red(1, 1) && red(3, 2));
        assert!(!red(2, 2) && !red(0, 0));
        assert_eq!(out.get_pixel(4, 4).0, [255, 255, 255]);
    }
}
