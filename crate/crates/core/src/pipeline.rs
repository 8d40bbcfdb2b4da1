//! Dataset-level training and evaluation shared by the command line and the
//! acceptance suite.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{Dataset, Sample, Split};
use crate::decoder::{detect, Detection};
use crate::error::{Error, Result};
use crate::metrics::{
    average_precision, calibration_table, expected_calibration_error, matched_pairs, mean_ap, ood_uncertainty_gap,
    pixel_scores, scored_detections, ubq_surrogate, CalibrationBin, ImageEval, OodGap, OodImage,
};
use crate::model::{predict, ImagePrediction, ModelParams};
use crate::synth::CLASS_NAMES;
use crate::trainer::{train, StepInfo, TrainOutcome};

fn check_geometry(config: &RunConfig, samples: &[&Sample]) -> Result<()> {
    let [h, w] = config.data.image_size;
    match samples.iter().find(|s| s.image.shape() != [1, h, w]) {
        Some(s) => Err(Error::validation(format!(
            "{}: image is {:?}, config expects [1, {h}, {w}]",
            s.entry.id,
            s.image.shape()
        ))),
        None => Ok(()),
    }
}

/// Trains on the train split of `data`.
pub fn train_on(config: &RunConfig, data: &Dataset, observer: Option<&mut dyn FnMut(&StepInfo)>) -> Result<TrainOutcome> {
    config.validate()?;
    check_geometry(config, &data.split(Split::Train))?;
    let samples = data.training_samples(Split::Train, config.model.classes, config.data.stride)?;
    train(&samples, &config.model, &config.loss, &config.train, observer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub id: String,
    pub detections: Vec<Detection>,
}

/// Eval-mode predictions and every decoded peak (no score cut-off) for the
/// validation split.
pub fn infer(config: &RunConfig, params: &ModelParams, data: &Dataset) -> Result<(Vec<ImagePrediction>, Vec<ImageDetections>)> {
    config.validate()?;
    params.check_layout(&config.model)?;
    let val = data.split(Split::Val);
    check_geometry(config, &val)?;
    let images: Vec<_> = val.iter().map(|s| &s.image).collect();
    let preds = predict(&config.model, params, &images, config.eval.batch)?;
    let e = &config.eval;
    let dets = val
        .iter()
        .zip(&preds)
        .map(|(s, p)| {
            Ok(ImageDetections {
                id: s.entry.id.clone(),
                detections: detect(p, config.data.stride, e.max_det, 0.0, e.band_multiplier)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((preds, dets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    /// `None` when the class has no ground truth in the split.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_per_class: Vec<ClassAp>,
    pub map: Option<f64>,
    /// Over every decoded peak, matched at the IoU threshold.
    pub ece: Option<f64>,
    /// Over peaks scoring at least `score_threshold`.
    pub ece_above_threshold: Option<f64>,
    pub pixel_ece: Option<f64>,
    pub ubq_surrogate: Option<f64>,
    pub ood: Option<OodGap>,
    pub calibration: Vec<CalibrationBin>,
    pub images: usize,
    pub detections: usize,
    pub iou_threshold: f64,
    pub score_threshold: f64,
    /// Set by the command line; ignored when comparing reports.
    pub timestamp: Option<String>,
}

/// Metrics for predictions on the validation split.
pub fn report(config: &RunConfig, data: &Dataset, preds: &[ImagePrediction], dets: &[ImageDetections]) -> Result<EvalReport> {
    let val = data.split(Split::Val);
    if val.len() != dets.len() || val.len() != preds.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} validation images",
            dets.len(),
            val.len()
        )));
    }
    let e = &config.eval;
    let evals: Vec<ImageEval> = val
        .iter()
        .zip(dets)
        .map(|(s, d)| ImageEval {
            detections: &d.detections,
            ground_truth: &s.entry.annotations,
        })
        .collect();
    let classes = config.model.classes;
    let ap = average_precision(&evals, classes, e.iou_threshold);
    let scored = scored_detections(&evals, e.iou_threshold);
    let above: Vec<(f64, bool)> = scored.iter().copied().filter(|&(s, _)| s >= e.score_threshold).collect();
    let pixel_ece = if e.pixel_ece {
        let px: Vec<(f64, bool)> = val
            .iter()
            .zip(preds)
            .flat_map(|(s, p)| pixel_scores(p, &s.entry.annotations, config.data.stride))
            .collect();
        expected_calibration_error(&px, e.bins).ok()
    } else {
        None
    };
    let ood_images: Vec<OodImage> = val
        .iter()
        .zip(preds)
        .map(|(s, p)| OodImage {
            prediction: p,
            in_distribution: &s.entry.annotations,
            out_of_distribution: &s.entry.ood_objects,
        })
        .collect();
    Ok(EvalReport {
        ap_per_class: ap
            .iter()
            .enumerate()
            .map(|(c, &ap)| ClassAp {
                class_id: c,
                name: CLASS_NAMES.get(c).map_or_else(|| format!("class-{c}"), |n| n.to_string()),
                ap,
            })
            .collect(),
        map: mean_ap(&ap),
        ece: expected_calibration_error(&scored, e.bins).ok(),
        ece_above_threshold: expected_calibration_error(&above, e.bins).ok(),
        pixel_ece,
        ubq_surrogate: ubq_surrogate(&matched_pairs(&evals, e.iou_threshold)).ok(),
        ood: ood_uncertainty_gap(&ood_images, config.data.stride).ok(),
        calibration: calibration_table(&scored, e.bins)?,
        images: val.len(),
        detections: scored.len(),
        iou_threshold: e.iou_threshold,
        score_threshold: e.score_threshold,
        timestamp: None,
    })
}

pub fn evaluate(config: &RunConfig, params: &ModelParams, data: &Dataset) -> Result<EvalReport> {
    let (preds, dets) = infer(config, params, data)?;
    report(config, data, &preds, &dets)
}

/// Drops detections below the dump threshold.
pub fn above_threshold(dets: &[ImageDetections], threshold: f64) -> Vec<ImageDetections> {
    dets.iter()
        .map(|d| ImageDetections {
            id: d.id.clone(),
            detections: d.detections.iter().filter(|x| x.score >= threshold).cloned().collect(),
        })
        .collect()
}

/// Calibration table for previously dumped detections, matched against the
/// validation ground truth by image id.
pub fn calibration_from_detections(config: &RunConfig, data: &Dataset, dets: &[ImageDetections], bins: usize) -> Result<Vec<CalibrationBin>> {
    let val = data.split(Split::Val);
    let evals = dets
        .iter()
        .map(|d| {
            let s = val
                .iter()
                .find(|s| s.entry.id == d.id)
                .ok_or_else(|| Error::validation(format!("no validation image with id `{}`", d.id)))?;
            Ok(ImageEval {
                detections: &d.detections,
                ground_truth: &s.entry.annotations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    calibration_table(&scored_detections(&evals, config.eval.iou_threshold), bins)
}
