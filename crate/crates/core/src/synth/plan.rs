//! Injection plans: which failure each synthetic object should exhibit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::anchors::AnchorSpec;
use super::SynthError;
use crate::mechanism::MechanismLabel;

pub const PLAN_FORMAT_VERSION: &str = "1";

/// What one synthetic object should turn out as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectTarget {
    /// Matched by a correct detection.
    Detected,
    /// Marked `ignore`; excluded from matching.
    Ignored,
    ProposalProcess,
    Regressor,
    BackgroundClassification,
    ClassifierCalibration,
    InterclassClassification,
}

impl ObjectTarget {
    pub fn mechanism(self) -> Option<MechanismLabel> {
        match self {
            ObjectTarget::Detected | ObjectTarget::Ignored => None,
            ObjectTarget::ProposalProcess => Some(MechanismLabel::ProposalProcess),
            ObjectTarget::Regressor => Some(MechanismLabel::Regressor),
            ObjectTarget::BackgroundClassification => Some(MechanismLabel::BackgroundClassification),
            ObjectTarget::ClassifierCalibration => Some(MechanismLabel::ClassifierCalibration),
            ObjectTarget::InterclassClassification => Some(MechanismLabel::InterclassClassification),
        }
    }
}

impl From<MechanismLabel> for ObjectTarget {
    fn from(m: MechanismLabel) -> Self {
        match m {
            MechanismLabel::ProposalProcess => ObjectTarget::ProposalProcess,
            MechanismLabel::Regressor => ObjectTarget::Regressor,
            MechanismLabel::BackgroundClassification => ObjectTarget::BackgroundClassification,
            MechanismLabel::ClassifierCalibration => ObjectTarget::ClassifierCalibration,
            MechanismLabel::InterclassClassification => ObjectTarget::InterclassClassification,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    /// Explicit proposals with a background score entry.
    TwoStage,
    /// Anchor-grid proposals, sigmoid scores, no background entry.
    OneStage,
}

/// Knobs that vary the generated structure without changing any object's target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    /// Extra candidates per object, drawn so they cannot flip its target.
    pub decoys_per_object: u32,
    /// Chance that a proposal-process object gets no nearby candidates at all.
    pub proposal_miss_probability: f64,
    /// Floor of refined-box IoU for regressor objects; lower means more corrupted boxes.
    pub regressor_corruption: f64,
    /// Minimum distance of designed scores and IoUs from their thresholds.
    pub score_margin: f64,
    /// Cap on every target-class score of filler candidates.
    pub background_score_max: f64,
    /// Correctly localized candidates suppressed per calibration object.
    pub calibration_victims: u32,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            decoys_per_object: 2,
            proposal_miss_probability: 0.3,
            regressor_corruption: 0.1,
            score_margin: 0.03,
            background_score_max: 0.2,
            calibration_victims: 1,
        }
    }
}

/// Objects of one image template, emitted `repeat` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePlan {
    pub objects: Vec<ObjectTarget>,
    #[serde(default = "one")]
    pub repeat: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionPlan {
    pub format_version: String,
    pub class_names: Vec<String>,
    #[serde(default = "default_mode")]
    pub mode: PipelineMode,
    #[serde(default = "default_width")]
    pub image_width: u32,
    #[serde(default = "default_height")]
    pub image_height: u32,
    #[serde(default = "default_proposals")]
    pub proposals_per_image: u32,
    /// One-stage only; defaults to [`AnchorSpec::default`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_spec: Option<AnchorSpec>,
    #[serde(default)]
    pub noise: NoiseParams,
    #[serde(default)]
    pub images: Vec<ImagePlan>,
}

fn default_mode() -> PipelineMode {
    PipelineMode::TwoStage
}
fn default_width() -> u32 {
    640
}
fn default_height() -> u32 {
    480
}
fn default_proposals() -> u32 {
    1000
}

impl InjectionPlan {
    /// A two-stage plan at default scale with no images.
    pub fn new(class_names: Vec<String>) -> Self {
        Self {
            format_version: PLAN_FORMAT_VERSION.into(),
            class_names,
            mode: default_mode(),
            image_width: default_width(),
            image_height: default_height(),
            proposals_per_image: default_proposals(),
            anchor_spec: None,
            noise: NoiseParams::default(),
            images: Vec::new(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, SynthError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let plan: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            SynthError::InvalidPlan(format!("{} at {}", e.into_inner(), path))
        })?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| SynthError::Io(e.to_string()))?;
        Self::from_json_str(&text)
    }

    pub fn image_count(&self) -> usize {
        self.images.iter().map(|i| i.repeat as usize).sum()
    }

    /// Image templates expanded by `repeat`, in emission order.
    pub fn expanded(&self) -> impl Iterator<Item = &[ObjectTarget]> {
        self.images
            .iter()
            .flat_map(|i| std::iter::repeat_n(i.objects.as_slice(), i.repeat as usize))
    }

    pub fn anchor_spec_or_default(&self) -> AnchorSpec {
        self.anchor_spec.clone().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidPlan(m));
        if self.format_version != PLAN_FORMAT_VERSION {
            return bad(format!("unsupported plan format_version \"{}\"", self.format_version));
        }
        crate::interchange::ClassCatalog::new(self.class_names.clone(), true).map_err(SynthError::InvalidPlan)?;
        if self.image_width < 32 || self.image_height < 32 {
            return bad("image dimensions must be at least 32 pixels".into());
        }
        if let Some(spec) = &self.anchor_spec {
            if self.mode == PipelineMode::TwoStage {
                return bad("anchor_spec applies to one_stage plans only".into());
            }
            spec.validate().map_err(SynthError::InvalidPlan)?;
        }
        let n = &self.noise;
        if !(0.0..=1.0).contains(&n.proposal_miss_probability) {
            return bad("noise.proposal_miss_probability must lie in [0, 1]".into());
        }
        if !(n.score_margin > 0.0 && n.score_margin < 0.1) {
            return bad("noise.score_margin must lie in (0, 0.1)".into());
        }
        if !(n.regressor_corruption > 0.0 && n.regressor_corruption < 1.0) {
            return bad("noise.regressor_corruption must lie in (0, 1)".into());
        }
        if !(n.background_score_max >= 0.0 && n.background_score_max < 1.0) {
            return bad("noise.background_score_max must lie in [0, 1)".into());
        }
        if n.calibration_victims == 0 {
            return bad("noise.calibration_victims must be at least 1".into());
        }
        Ok(())
    }
}
