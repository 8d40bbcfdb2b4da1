//! Peak extraction and box decoding with uncertainty bands.

use serde::{Deserialize, Serialize};

use crate::autograd::max_pool3_forward;
use crate::error::{Error, Result};
use crate::model::ImagePrediction;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub class: usize,
    /// `row * width + col` within the class plane.
    pub pixel: usize,
    pub score: f64,
}

/// Local maxima of `[classes, h, w]` presence grids. A pixel is a peak when
/// it is the 3×3 maximum, the lowest flat index winning ties. Output is
/// sorted by score (then class, then pixel), truncated to `max_det`, and
/// entries below `threshold` are removed.
pub fn extract_peaks(grid: &Tensor, max_det: usize, threshold: f64) -> Result<Vec<Peak>> {
    let shape = grid.shape();
    if shape.len() != 3 {
        return Err(Error::validation(format!("peak grid must be [classes, h, w], got {shape:?}")));
    }
    let hw = shape[1] * shape[2];
    let (_, argmax) = max_pool3_forward(grid);
    let mut peaks: Vec<Peak> = argmax
        .iter()
        .enumerate()
        .filter(|&(i, &a)| a == i)
        .map(|(i, _)| Peak {
            class: i / hw,
            pixel: i % hw,
            score: grid.data()[i],
        })
        .collect();
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class.cmp(&b.class)).then(a.pixel.cmp(&b.pixel)));
    peaks.truncate(max_det);
    peaks.retain(|p| p.score >= threshold);
    Ok(peaks)
}

/// One decoded object; coordinates in input pixels, boxes as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub u_cls: f64,
    pub center: [f64; 2],
    pub w: f64,
    pub h: f64,
    pub u_w: f64,
    pub u_h: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub inner_box: [f64; 4],
    pub outer_box: [f64; 4],
}

fn centered(cx: f64, cy: f64, w: f64, h: f64) -> [f64; 4] {
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

/// Turns peaks into detections. Widths and heights are regressed in grid
/// units and scaled by `stride`; negative regressions are clamped to zero.
/// The inner and outer boxes shrink and grow each side length by
/// `band · U`.
pub fn decode(peaks: &[Peak], pred: &ImagePrediction, stride: usize, band: f64) -> Result<Vec<Detection>> {
    let hw = pred.pixels();
    let r = stride as f64;
    peaks
        .iter()
        .map(|p| {
            if p.class >= pred.classes || p.pixel >= hw {
                return Err(Error::validation(format!(
                    "peak (class {}, pixel {}) outside the {}x{}x{} grid",
                    p.class, p.pixel, pred.classes, pred.height, pred.width
                )));
            }
            let (row, col) = (p.pixel / pred.width, p.pixel % pred.width);
            let d = &pred.dirichlet[p.class * hw + p.pixel];
            let (nw, nh) = (&pred.nig_w[p.pixel], &pred.nig_h[p.pixel]);
            let cx = (col as f64 + pred.offset[p.pixel]) * r;
            let cy = (row as f64 + pred.offset[hw + p.pixel]) * r;
            let (w, h) = (nw.prediction().max(0.0) * r, nh.prediction().max(0.0) * r);
            let (u_w, u_h) = (nw.uncertainty() * r, nh.uncertainty() * r);
            let (bw, bh) = (band * u_w, band * u_h);
            Ok(Detection {
                class_id: p.class,
                score: d.presence(),
                u_cls: d.uncertainty,
                center: [cx, cy],
                w,
                h,
                u_w,
                u_h,
                bbox: centered(cx, cy, w, h),
                inner_box: centered(cx, cy, (w - bw).max(0.0), (h - bh).max(0.0)),
                outer_box: centered(cx, cy, w + bw, h + bh),
            })
        })
        .collect()
}

/// Presence probabilities of every class as a `[classes, h, w]` grid.
pub fn presence_grid(pred: &ImagePrediction) -> Tensor {
    let data = pred.dirichlet.iter().map(|d| d.presence()).collect();
    Tensor::new(vec![pred.classes, pred.height, pred.width], data).expect("prediction planes are congruent")
}

/// Peaks then boxes for one image.
pub fn detect(pred: &ImagePrediction, stride: usize, max_det: usize, threshold: f64, band: f64) -> Result<Vec<Detection>> {
    let peaks = extract_peaks(&presence_grid(pred), max_det, threshold)?;
    decode(&peaks, pred, stride, band)
}
