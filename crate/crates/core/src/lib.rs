//! False-negative mechanism analysis for object detectors.
//!
//! Given dumps of a detector's internals (proposals, refined candidates with
//! score vectors, final detections), [`mechanism`] attributes every missed
//! ground-truth object to the pipeline step that lost it, [`tide`] types the
//! same misses from final detections alone, and [`report`] aggregates both.
//! [`synth`] generates dumps with known injected failures for testing.

pub mod config;
pub mod geometry;
pub mod interchange;
pub mod matching;
pub mod mechanism;
pub mod nms;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod tide;

pub use config::{AnalysisConfig, Thresholds};
pub use geometry::{iou, iou_many, BBox};
pub use mechanism::{classify_all, classify_fn, FnRecord, MechanismEvidence, MechanismLabel};
pub use tide::TideFnType;
