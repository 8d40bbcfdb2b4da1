//! JSON run configuration. Every key is optional; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub stride: usize,
    /// `[height, width]`.
    pub image_size: [usize; 2],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            stride: 4,
            image_size: [128, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bins: usize,
    /// Cut-off for dumped predictions; metrics use every decoded peak.
    pub score_threshold: f64,
    pub band_multiplier: f64,
    pub max_det: usize,
    pub iou_threshold: f64,
    /// Also report calibration over every heatmap pixel.
    pub pixel_ece: bool,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: 10,
            score_threshold: 0.3,
            band_multiplier: 1.0,
            max_det: 50,
            iou_threshold: 0.5,
            pixel_ece: false,
            batch: 8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        let [h, w] = self.data.image_size;
        if self.data.stride == 0 || h == 0 || w == 0 || h % self.data.stride != 0 || w % self.data.stride != 0 {
            return Err(Error::validation(format!(
                "stride {} must divide the image size {h}x{w}",
                self.data.stride
            )));
        }
        if self.model.stride() != self.data.stride {
            return Err(Error::validation(format!(
                "backbone strides {:?} give output stride {}, data expects {}",
                self.model.strides,
                self.model.stride(),
                self.data.stride
            )));
        }
        let e = &self.eval;
        if e.bins == 0 || e.max_det == 0 || e.batch == 0 {
            return Err(Error::validation("eval bins, max_det and batch must be at least 1"));
        }
        if !(0.0..=1.0).contains(&e.score_threshold) || !(e.iou_threshold > 0.0 && e.iou_threshold <= 1.0) {
            return Err(Error::validation("score and IoU thresholds must lie in [0, 1]"));
        }
        if !(e.band_multiplier.is_finite() && e.band_multiplier >= 0.0) {
            return Err(Error::validation("band_multiplier must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.train.lr0, 1.25e-4);
        assert_eq!(cfg.loss.classification.beta_cb, 0.99);
        assert_eq!(cfg.loss.regression.n_w, 55);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"train": {"lr": 0.1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let cfg = RunConfig::from_json(r#"{"model": {"dropout_p": 0.1}, "train": {"epochs": 2}}"#).unwrap();
        assert_eq!(cfg.model.dropout_p, 0.1);
        assert_eq!(cfg.model.channels, [16, 32, 64, 64]);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch, 4);
    }

    #[test]
    fn stride_mismatch_rejected() {
        let cfg = RunConfig::from_json(r#"{"data": {"stride": 8}}"#).unwrap();
        assert!(cfg.validate().is_err());
    }
}
