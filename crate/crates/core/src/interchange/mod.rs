//! Detector-introspection dump format.
//!
//! A dump is UTF-8 JSON Lines. Line 1 is a [`DumpHeader`]; each following line
//! is one [`ImageIntrospection`]. The normative schema lives in
//! `docs/dump-schema.json`; [`reader`] enforces it and [`writer`] emits the
//! canonical form (fixed key order, floats at 6 significant digits).

mod consistency;
mod error;
pub mod format;
pub mod reader;
pub mod writer;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::synth::anchors::{AnchorGrid, AnchorSpec};

pub use consistency::{validate_consistency, ConsistencyDiagnostic};
pub use error::{DumpError, DumpErrorKind};
pub use reader::{open_dump, parse_dump, DumpReader};
pub use writer::{create_dump, emit_dump, DumpWriter, EmitError};

pub const FORMAT_VERSION: &str = "1";

/// 1-based index into the class catalog (`1..=N`).
pub type ClassIndex = u32;

/// Target-class names plus the score-vector layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    names: Vec<String>,
    has_background_entry: bool,
}

impl ClassCatalog {
    pub fn new(names: Vec<String>, has_background_entry: bool) -> Result<Self, String> {
        if names.is_empty() {
            return Err("class catalog must name at least one class".into());
        }
        let mut seen = std::collections::HashSet::new();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(format!("class name {i} is empty"));
            }
            if !seen.insert(n.as_str()) {
                return Err(format!("duplicate class name \"{n}\""));
            }
        }
        Ok(Self {
            names,
            has_background_entry,
        })
    }

    /// Number of target classes, `N`.
    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn has_background_entry(&self) -> bool {
        self.has_background_entry
    }

    /// Required length of every score vector.
    pub fn score_len(&self) -> usize {
        self.names.len() + usize::from(self.has_background_entry)
    }

    pub fn contains(&self, class_index: ClassIndex) -> bool {
        class_index >= 1 && (class_index as usize) <= self.names.len()
    }

    pub fn name(&self, class_index: ClassIndex) -> Option<&str> {
        if self.contains(class_index) {
            Some(&self.names[class_index as usize - 1])
        } else {
            None
        }
    }

    pub fn class_indices(&self) -> impl Iterator<Item = ClassIndex> {
        1..=self.names.len() as ClassIndex
    }
}

/// Where an image's proposal set comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ProposalMode {
    /// Proposals are listed in each image record.
    Explicit,
    /// Proposals are elided and regenerated from the anchor grid.
    Anchors(AnchorSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpHeader {
    pub catalog: ClassCatalog,
    pub proposals: ProposalMode,
}

impl DumpHeader {
    pub fn explicit(catalog: ClassCatalog) -> Self {
        Self {
            catalog,
            proposals: ProposalMode::Explicit,
        }
    }

    pub fn anchors(catalog: ClassCatalog, spec: AnchorSpec) -> Self {
        Self {
            catalog,
            proposals: ProposalMode::Anchors(spec),
        }
    }

    pub fn anchor_spec(&self) -> Option<&AnchorSpec> {
        match &self.proposals {
            ProposalMode::Anchors(spec) => Some(spec),
            ProposalMode::Explicit => None,
        }
    }
}

/// Per-class confidences, optionally followed by a background score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Self {
        Self(scores)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Score of target class `class_index` (1-based).
    pub fn class_score(&self, class_index: ClassIndex) -> f64 {
        self.0[class_index as usize - 1]
    }

    /// The first `num_classes` entries, i.e. without any background entry.
    pub fn target_scores(&self, num_classes: usize) -> &[f64] {
        &self.0[..num_classes]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruthObject {
    pub id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_index: ClassIndex,
    pub ignore: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Proposal {
    pub id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objectness: Option<f64>,
}

/// A proposal after box regression and classification, before thresholding and NMS.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinedCandidate {
    /// Proposal id, or the anchor index when proposals are anchors.
    pub proposal_id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub scores: ScoreVector,
    /// Set when the head regresses one box per class.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_specific_for: Option<ClassIndex>,
}

impl RefinedCandidate {
    /// Whether this candidate may become a detection of `class_index`.
    pub fn serves_class(&self, class_index: ClassIndex) -> bool {
        self.class_specific_for.is_none_or(|c| c == class_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_index: ClassIndex,
    pub score: f64,
    /// Index into the image's `refined` list.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_candidate: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageIntrospection {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub ground_truth: Vec<GroundTruthObject>,
    pub proposals: Vec<Proposal>,
    pub refined: Vec<RefinedCandidate>,
    pub detections: Vec<Detection>,
}

impl ImageIntrospection {
    pub fn empty(image_id: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            ground_truth: Vec::new(),
            proposals: Vec::new(),
            refined: Vec::new(),
            detections: Vec::new(),
        }
    }

    pub fn gt(&self, id: u64) -> Option<&GroundTruthObject> {
        self.ground_truth.iter().find(|g| g.id == id)
    }
}

/// Regenerated anchor boxes, shared between images of the same size.
///
/// Keyed by image size only, so one cache serves one anchor spec.
#[derive(Debug, Default)]
pub struct AnchorCache {
    grids: Mutex<HashMap<(u32, u32), Arc<Vec<BBox>>>>,
}

impl AnchorCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn boxes(&self, width: u32, height: u32, spec: &AnchorSpec) -> Arc<Vec<BBox>> {
        let mut grids = self.grids.lock().expect("anchor cache lock poisoned");
        grids
            .entry((width, height))
            .or_insert_with(|| Arc::new(AnchorGrid::new(width, height, spec).boxes()))
            .clone()
    }
}

/// Proposal boxes for one image, either listed or regenerated anchors.
#[derive(Debug, Clone)]
pub enum ProposalBoxes<'a> {
    Explicit(&'a [Proposal]),
    Anchors(Arc<Vec<BBox>>),
}

impl ProposalBoxes<'_> {
    pub fn len(&self) -> usize {
        match self {
            ProposalBoxes::Explicit(p) => p.len(),
            ProposalBoxes::Anchors(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (box, objectness) pairs in proposal order.
    pub fn iter(&self) -> Box<dyn Iterator<Item = (BBox, Option<f64>)> + '_> {
        match self {
            ProposalBoxes::Explicit(p) => Box::new(p.iter().map(|p| (p.bbox, p.objectness))),
            ProposalBoxes::Anchors(a) => Box::new(a.iter().map(|b| (*b, None))),
        }
    }
}

impl ImageIntrospection {
    /// The image's proposal set under `header`'s proposal mode.
    pub fn proposal_boxes<'a>(
        &'a self,
        header: &DumpHeader,
        cache: &AnchorCache,
    ) -> ProposalBoxes<'a> {
        match &header.proposals {
            ProposalMode::Explicit => ProposalBoxes::Explicit(&self.proposals),
            ProposalMode::Anchors(spec) => {
                ProposalBoxes::Anchors(cache.boxes(self.width, self.height, spec))
            }
        }
    }
}
