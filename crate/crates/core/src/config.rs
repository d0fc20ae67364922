//! Analysis thresholds shared by matching, attribution, NMS replay, and TIDE typing.

use serde::{Deserialize, Serialize};

use crate::nms::NmsConfig;
use crate::tide::TideThresholds;

/// Localization and classification thresholds for false-negative attribution.
///
/// `theta_loc` is both the matching threshold and the attribution threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub theta_loc: f64,
    pub theta_cls: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            theta_loc: 0.5,
            theta_cls: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub theta_loc: f64,
    pub theta_cls: f64,
    pub nms_iou: f64,
    pub tide_fg: f64,
    pub tide_bg: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            theta_loc: 0.5,
            theta_cls: 0.3,
            nms_iou: 0.5,
            tide_fg: 0.5,
            tide_bg: 0.1,
        }
    }
}

impl AnalysisConfig {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            theta_loc: self.theta_loc,
            theta_cls: self.theta_cls,
        }
    }

    pub fn nms(&self) -> NmsConfig {
        NmsConfig::new(self.nms_iou, self.theta_cls)
    }

    pub fn tide(&self) -> TideThresholds {
        TideThresholds {
            t_fg: self.tide_fg,
            t_bg: self.tide_bg,
        }
    }

    /// Every threshold must lie strictly inside (0, 1), and `tide_bg < tide_fg`.
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("theta_loc", self.theta_loc),
            ("theta_cls", self.theta_cls),
            ("nms_iou", self.nms_iou),
            ("tide_fg", self.tide_fg),
            ("tide_bg", self.tide_bg),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(format!("{name} = {v} is outside (0, 1)"));
            }
        }
        if self.tide_bg >= self.tide_fg {
            return Err(format!(
                "tide_bg ({}) must be below tide_fg ({})",
                self.tide_bg, self.tide_fg
            ));
        }
        Ok(())
    }
}
