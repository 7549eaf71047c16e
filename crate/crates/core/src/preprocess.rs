//! Image filtering and mask value codecs.
//!
//! Masks travel between two spaces: label space `{0, 1}` (stored as
//! [`MaskGrid`]) and encoded space `[-1, 1]` where the noising process runs.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{ImageGrid, MaskGrid};

/// Explicit Perona–Malik settings. `kappa` is in the units of the input
/// intensities (0–255 for 8-bit sources).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionParams {
    pub n_iter: u32,
    pub kappa: f64,
    pub gamma: f64,
}

impl Default for DiffusionParams {
    fn default() -> Self {
        Self {
            n_iter: 5,
            kappa: 30.0,
            gamma: 0.1,
        }
    }
}

impl DiffusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(invalid!("kappa must be > 0, got {}", self.kappa));
        }
        if !(self.gamma > 0.0) {
            return Err(invalid!("gamma must be > 0, got {}", self.gamma));
        }
        if self.gamma > 0.25 {
            return Err(invalid!(
                "gamma {} exceeds 0.25; the explicit scheme is unstable",
                self.gamma
            ));
        }
        Ok(())
    }
}

/// Edge-preserving smoothing with conduction `exp(-(d/kappa)^2)` over the
/// four axis neighbours and replicate (zero-flux) borders.
///
/// Each edge flux is added to one pixel and subtracted from the other, so the
/// total intensity is conserved; with `gamma <= 0.25` every update is a convex
/// combination of the pixel and its neighbours.
pub fn anisotropic_diffusion(img: &ImageGrid, params: &DiffusionParams) -> Result<ImageGrid> {
    params.validate()?;
    let (h, w) = img.dims();
    let mut cur: Vec<f64> = img.as_slice().iter().map(|&v| f64::from(v)).collect();
    let mut delta = alloc::vec![0.0f64; cur.len()];
    let inv_k2 = 1.0 / (params.kappa * params.kappa);
    let flux = |a: f64, b: f64| {
        let d = b - a;
        params.gamma * libm::exp(-d * d * inv_k2) * d
    };
    for _ in 0..params.n_iter {
        delta.iter_mut().for_each(|d| *d = 0.0);
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                if c + 1 < w {
                    let f = flux(cur[p], cur[p + 1]);
                    delta[p] += f;
                    delta[p + 1] -= f;
                }
                if r + 1 < h {
                    let f = flux(cur[p], cur[p + w]);
                    delta[p] += f;
                    delta[p + w] -= f;
                }
            }
        }
        cur.iter_mut().zip(&delta).for_each(|(v, d)| *v += d);
    }
    ImageGrid::from_vec(h, w, cur.into_iter().map(|v| v as f32).collect())
}

/// Anisotropic total variation: the sum of absolute horizontal and vertical
/// neighbour differences.
pub fn total_variation(img: &ImageGrid) -> f64 {
    let (h, w) = img.dims();
    let v = img.as_slice();
    let mut tv = 0.0;
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            if c + 1 < w {
                tv += (f64::from(v[p + 1]) - f64::from(v[p])).abs();
            }
            if r + 1 < h {
                tv += (f64::from(v[p + w]) - f64::from(v[p])).abs();
            }
        }
    }
    tv
}

/// Clips to the `[lo, hi]` percentiles and maps that range affinely onto
/// `[-1, 1]`. A degenerate range (constant image) maps to all zeros.
///
/// The low percentile rounds its rank down and the high one rounds up, so
/// the clipped extremes survive a second application and the map is
/// idempotent.
pub fn normalize_image(img: &ImageGrid, lo: f64, hi: f64) -> Result<ImageGrid> {
    if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
        return Err(invalid!("need 0 <= lo < hi <= 100, got lo={lo} hi={hi}"));
    }
    if let Some(bad) = img.as_slice().iter().find(|v| !v.is_finite()) {
        return Err(invalid!("image contains non-finite value {bad}"));
    }
    let mut sorted: Vec<f32> = img.as_slice().to_vec();
    sorted.sort_by(f32::total_cmp);
    let last = (sorted.len() - 1) as f64;
    let p_lo = f64::from(sorted[libm::floor(lo / 100.0 * last) as usize]);
    let p_hi = f64::from(sorted[libm::ceil(hi / 100.0 * last) as usize]);
    let span = p_hi - p_lo;
    if span <= 0.0 {
        return Ok(img.map(|_| 0.0));
    }
    Ok(img.map(|&v| {
        let clipped = f64::from(v).clamp(p_lo, p_hi);
        ((clipped - p_lo) / span * 2.0 - 1.0) as f32
    }))
}

/// `{0, 1}` → `{-1, +1}`.
pub fn encode_mask(mask: &MaskGrid) -> Result<ImageGrid> {
    mask.check_binary()?;
    Ok(mask.map(|&v| if v == 1 { 1.0 } else { -1.0 }))
}

/// Encoded space → probability map: `(x + 1) / 2` clipped to `[0, 1]`.
pub fn decode_mask(encoded: &ImageGrid) -> ImageGrid {
    encoded.map(|&x| ((x + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Labels pixels with probability `>= threshold` as foreground.
pub fn binarize(prob: &ImageGrid, threshold: f32) -> Result<MaskGrid> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid!("threshold must lie in (0, 1), got {threshold}"));
    }
    Ok(prob.map(|&p| u8::from(p >= threshold)))
}
