//! Detection quality and uncertainty evaluation.

use serde::{Deserialize, Serialize};

use crate::decoder::Detection;
use crate::error::{Error, Result};
use crate::model::ImagePrediction;
use crate::synth::{ObjectAnnotation, OodObject};

pub const DEFAULT_IOU: f64 = 0.5;
const RECALL_POINTS: usize = 101;

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Greedy matching within one image: detections in descending score order
/// take the unmatched same-class ground truth of highest IoU, if that IoU is
/// at least `thresh`. Returns the matched ground-truth index per detection.
pub fn match_detections(dets: &[Detection], gts: &[ObjectAnnotation], thresh: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let boxes: Vec<[f64; 4]> = gts.iter().map(|g| g.bbox()).collect();
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.cls != d.class_id {
                continue;
            }
            let o = iou(&d.bbox, &boxes[g]);
            if o >= thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[i] = Some(g);
        }
    }
    out
}

/// 101-point interpolated AP from scored hits. `None` without ground truth.
pub fn ap_from_hits(hits: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut sorted = hits.to_vec();
    // stable: equal scores keep their input order
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(sorted.len());
    for (k, &(_, hit)) in sorted.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // precision envelope, non-increasing in recall
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while k < curve.len() && curve[k].0 < level {
            k += 1;
        }
        if k < curve.len() {
            sum += curve[k].1;
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Copy)]
pub struct ImageEval<'a> {
    pub detections: &'a [Detection],
    pub ground_truth: &'a [ObjectAnnotation],
}

/// Per-class AP at `thresh`; `None` for classes without ground truth.
pub fn average_precision(images: &[ImageEval], classes: usize, thresh: f64) -> Vec<Option<f64>> {
    let mut hits: Vec<Vec<(f64, bool)>> = vec![Vec::new(); classes];
    let mut n_gt = vec![0usize; classes];
    for img in images {
        for g in img.ground_truth {
            if g.cls < classes {
                n_gt[g.cls] += 1;
            }
        }
        let matches = match_detections(img.detections, img.ground_truth, thresh);
        for (d, m) in img.detections.iter().zip(matches) {
            if d.class_id < classes {
                hits[d.class_id].push((d.score, m.is_some()));
            }
        }
    }
    (0..classes).map(|c| ap_from_hits(&hits[c], n_gt[c])).collect()
}

pub fn mean_ap(per_class: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Zero for empty bins.
    pub mean_conf: f64,
    pub accuracy: f64,
}

/// Equal-width bins over `[0, 1]`; the last bin is closed at 1.
pub fn calibration_table(scored: &[(f64, bool)], bins: usize) -> Result<Vec<CalibrationBin>> {
    if bins == 0 {
        return Err(Error::validation("calibration needs at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for &(s, hit) in scored {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::validation(format!("confidence {s} outside [0, 1]")));
        }
        let b = ((s * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += s;
        correct[b] += hit as usize;
    }
    Ok((0..bins)
        .map(|b| {
            let n = count[b];
            let avg = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
            CalibrationBin {
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                count: n,
                mean_conf: avg(conf[b]),
                accuracy: avg(correct[b] as f64),
            }
        })
        .collect())
}

/// `Σ_b (n_b / N) |acc_b − conf_b|`.
pub fn expected_calibration_error(scored: &[(f64, bool)], bins: usize) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::validation("ECE is undefined without detections"));
    }
    let table = calibration_table(scored, bins)?;
    let n = scored.len() as f64;
    Ok(table
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.mean_conf).abs())
        .sum())
}

pub fn calibration_csv(table: &[CalibrationBin]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin_lo", "bin_hi", "count", "mean_conf", "accuracy"]).expect("in-memory write");
    for b in table {
        w.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string(), b.mean_conf.to_string(), b.accuracy.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII output")
}

/// Scored hits of every detection, using the AP matcher.
pub fn scored_detections(images: &[ImageEval], thresh: f64) -> Vec<(f64, bool)> {
    images
        .iter()
        .flat_map(|img| {
            let m = match_detections(img.detections, img.ground_truth, thresh);
            img.detections.iter().zip(m).map(|(d, m)| (d.score, m.is_some())).collect::<Vec<_>>()
        })
        .collect()
}

/// Surrogate for uncertainty boundary quality: per matched pair and box
/// dimension, coverage `|gt − pred| ≤ U` times sharpness `max(0, 1 − U/pred)`,
/// averaged over both dimensions and then over pairs.
pub fn ubq_surrogate(pairs: &[(&Detection, &ObjectAnnotation)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::validation("UBQ surrogate is undefined without matched detections"));
    }
    let term = |pred: f64, gt: f64, u: f64| {
        let coverage = if (gt - pred).abs() <= u { 1.0 } else { 0.0 };
        let sharpness = if pred > 0.0 { (1.0 - u / pred).max(0.0) } else { 0.0 };
        coverage * sharpness
    };
    let total: f64 = pairs
        .iter()
        .map(|(d, g)| 0.5 * (term(d.w, g.w, d.u_w) + term(d.h, g.h, d.u_h)))
        .sum();
    Ok(total / pairs.len() as f64)
}

pub fn matched_pairs<'a>(images: &[ImageEval<'a>], thresh: f64) -> Vec<(&'a Detection, &'a ObjectAnnotation)> {
    let mut out = Vec::new();
    for img in images {
        let m = match_detections(img.detections, img.ground_truth, thresh);
        for (d, g) in img.detections.iter().zip(m) {
            if let Some(g) = g {
                out.push((d, &img.ground_truth[g]));
            }
        }
    }
    out
}

/// Dirichlet uncertainty of the class with the highest presence at `pixel`.
pub fn pixel_uncertainty(pred: &ImagePrediction, pixel: usize) -> f64 {
    let hw = pred.pixels();
    let best = (0..pred.classes)
        .max_by(|&a, &b| {
            pred.dirichlet[a * hw + pixel]
                .presence()
                .total_cmp(&pred.dirichlet[b * hw + pixel].presence())
                .then(b.cmp(&a))
        })
        .expect("at least one class");
    pred.dirichlet[best * hw + pixel].uncertainty
}

fn center_pixel(pred: &ImagePrediction, cx: f64, cy: f64, stride: usize) -> Option<usize> {
    let (col, row) = ((cx / stride as f64).floor(), (cy / stride as f64).floor());
    (col >= 0.0 && row >= 0.0 && (col as usize) < pred.width && (row as usize) < pred.height)
        .then(|| row as usize * pred.width + col as usize)
}

/// Objects of one image for the OOD comparison.
#[derive(Debug, Clone, Copy)]
pub struct OodImage<'a> {
    pub prediction: &'a ImagePrediction,
    pub in_distribution: &'a [ObjectAnnotation],
    pub out_of_distribution: &'a [OodObject],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodGap {
    pub id_mean_u: f64,
    pub ood_mean_u: f64,
    pub id_count: usize,
    pub ood_count: usize,
}

impl OodGap {
    pub fn ratio(&self) -> f64 {
        self.ood_mean_u / self.id_mean_u
    }
}

/// Mean uncertainty at the centre pixels of labelled objects and of
/// out-of-distribution objects.
pub fn ood_uncertainty_gap(images: &[OodImage], stride: usize) -> Result<OodGap> {
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    for img in images {
        let p = img.prediction;
        id.extend(img.in_distribution.iter().filter_map(|o| center_pixel(p, o.cx, o.cy, stride)).map(|px| pixel_uncertainty(p, px)));
        ood.extend(img.out_of_distribution.iter().filter_map(|o| center_pixel(p, o.cx, o.cy, stride)).map(|px| pixel_uncertainty(p, px)));
    }
    if id.is_empty() || ood.is_empty() {
        return Err(Error::validation(format!(
            "OOD comparison needs objects in both sets, got {} in-distribution and {} out-of-distribution",
            id.len(),
            ood.len()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(OodGap {
        id_mean_u: mean(&id),
        ood_mean_u: mean(&ood),
        id_count: id.len(),
        ood_count: ood.len(),
    })
}

/// Pixel-level calibration: every class-pixel presence probability scored
/// against whether an object of that class is centred there.
pub fn pixel_scores(pred: &ImagePrediction, gts: &[ObjectAnnotation], stride: usize) -> Vec<(f64, bool)> {
    let hw = pred.pixels();
    let mut centre = vec![false; pred.classes * hw];
    for g in gts {
        if let Some(px) = center_pixel(pred, g.cx, g.cy, stride) {
            if g.cls < pred.classes {
                centre[g.cls * hw + px] = true;
            }
        }
    }
    pred.dirichlet.iter().zip(centre).map(|(d, c)| (d.presence(), c)).collect()
}
