//! Synthetic detector pipelines with injected, verified failures.
//!
//! [`generate`] turns an [`InjectionPlan`] into a dump in which every object
//! fails (or succeeds) exactly as planned. Each object is confined to its own
//! grid cell, built so the planned predicate holds, and then checked after the
//! fact: detections are replayed through NMS, the image is matched, and the
//! brute-force [`oracle`] must return the planned label. Objects that fail the
//! check are rebuilt, up to a bounded number of attempts.
//!
//! Image `k` draws from `ChaCha8Rng::seed_from_u64(image_seed(seed, k))`, so
//! images can be generated in parallel and output is a pure function of
//! (plan, seed, thresholds).

pub mod anchors;
mod generate;
pub mod oracle;
pub mod plan;

use thiserror::Error;

use crate::interchange::{emit_dump, DumpHeader, EmitError, ImageIntrospection};

pub use anchors::{AnchorGrid, AnchorSpec, ResizeSpec};
pub use generate::{generate, generate_image, MAX_ATTEMPTS};
pub use plan::{ImagePlan, InjectionPlan, NoiseParams, ObjectTarget, PipelineMode};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("{0}")]
    Io(String),
    #[error("image {image}{}: {message}", object.map(|o| format!(" object {o}")).unwrap_or_default())]
    Unsatisfiable {
        image: usize,
        object: Option<usize>,
        message: String,
    },
}

/// The planned outcome of one ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectTruth {
    pub gt_id: u64,
    pub target: ObjectTarget,
}

#[derive(Debug, Clone)]
pub struct SynthDump {
    pub header: DumpHeader,
    pub images: Vec<ImageIntrospection>,
    /// Per image, per ground-truth object in order.
    pub truth: Vec<Vec<ObjectTruth>>,
}

impl SynthDump {
    pub fn to_canonical_string(&self) -> Result<String, EmitError> {
        emit_dump(&self.header, &self.images)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of image `index` under run seed `seed`.
pub fn image_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}
