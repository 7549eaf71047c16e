//! Dataset-level Dice/IoU reports.

use std::fs;
use std::path::Path;

use cts_core::metrics::Overlap;
use cts_core::MaskGrid;
use serde::{Deserialize, Serialize};

use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::networks::ConsistencyModel;
use crate::params::ModelParams;
use crate::sampling::segment_pairs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub per_sample: Vec<SampleMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(Error::json("metrics report"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(Error::io(path))
    }
}

/// Scores predictions against ground truth and averages per sample.
pub fn report_from_predictions(ids: &[&str], preds: &[&MaskGrid], truths: &[&MaskGrid]) -> Result<EvalReport> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    if ids.len() != preds.len() || ids.len() != truths.len() {
        return Err(Error::InvalidArgument("ids, predictions and truths differ in count".into()));
    }
    let per_sample = ids
        .iter()
        .zip(preds.iter().zip(truths))
        .map(|(id, (p, g))| {
            let o = Overlap::between(p, g).map_err(|e| Error::Sample {
                id: id.to_string(),
                reason: e.to_string(),
            })?;
            Ok(SampleMetrics { id: id.to_string(), dice: o.dice(), iou: o.iou() })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_sample.len() as f64;
    Ok(EvalReport {
        mean_dice: per_sample.iter().map(|s| s.dice).sum::<f64>() / n,
        mean_iou: per_sample.iter().map(|s| s.iou).sum::<f64>() / n,
        per_sample,
    })
}

/// Single-step segmentation of every pair, scored against its mask.
pub fn evaluate(
    model: &ConsistencyModel,
    params: &ModelParams,
    pairs: &[SamplePair],
    seed: u64,
    threshold: f64,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let sigmas = [model.schedule.sigma_max];
    let segs = segment_pairs(model, params, pairs, seed, &sigmas, threshold)?;
    let ids: Vec<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
    let preds: Vec<&MaskGrid> = segs.iter().map(|s| &s.mask).collect();
    let truths: Vec<&MaskGrid> = pairs.iter().map(|p| &p.mask).collect();
    report_from_predictions(&ids, &preds, &truths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn means_and_oracle_mode() {
        let a = MaskGrid::from_vec(2, 2, vec![1, 1, 0, 0]).unwrap();
        let b = MaskGrid::from_vec(2, 2, vec![1, 0, 0, 0]).unwrap();
        let oracle = report_from_predictions(&["x", "y"], &[&a, &b], &[&a, &b]).unwrap();
        assert_eq!((oracle.mean_dice, oracle.mean_iou), (1.0, 1.0));
        let r = report_from_predictions(&["x", "y"], &[&b, &b], &[&a, &b]).unwrap();
        assert_eq!(r.per_sample.len(), 2);
        assert!((r.mean_dice - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        assert!((r.mean_iou - 0.75).abs() < 1e-12);
        assert!(report_from_predictions(&[], &[], &[]).is_err());
        let bad = MaskGrid::from_vec(2, 2, vec![2, 0, 0, 0]).unwrap();
        let err = report_from_predictions(&["z"], &[&bad], &[&a]).unwrap_err();
        assert!(err.to_string().contains('z'));
    }
}
