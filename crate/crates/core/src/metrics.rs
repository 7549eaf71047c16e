//! Overlap metrics for binary segmentation masks.

use crate::error::Result;
use crate::grid::MaskGrid;

/// Pixel counts behind Dice and IoU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overlap {
    pub intersection: usize,
    pub predicted: usize,
    pub truth: usize,
}

impl Overlap {
    pub fn between(pred: &MaskGrid, gt: &MaskGrid) -> Result<Self> {
        pred.ensure_same_dims(gt)?;
        pred.check_binary()?;
        gt.check_binary()?;
        let mut o = Overlap::default();
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            o.predicted += usize::from(p);
            o.truth += usize::from(g);
            o.intersection += usize::from(p & g);
        }
        Ok(o)
    }

    pub fn union(&self) -> usize {
        self.predicted + self.truth - self.intersection
    }

    /// `2|P∩G| / (|P| + |G|)`, or 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let denom = self.predicted + self.truth;
        if denom == 0 {
            return 1.0;
        }
        2.0 * self.intersection as f64 / denom as f64
    }

    /// `|P∩G| / |P∪G|`, or 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let union = self.union();
        if union == 0 {
            return 1.0;
        }
        self.intersection as f64 / union as f64
    }
}

pub fn dice(pred: &MaskGrid, gt: &MaskGrid) -> Result<f64> {
    Ok(Overlap::between(pred, gt)?.dice())
}

pub fn iou(pred: &MaskGrid, gt: &MaskGrid) -> Result<f64> {
    Ok(Overlap::between(pred, gt)?.iou())
}
