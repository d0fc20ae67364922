//! End-to-end analysis of a dump: matching, attribution, typing, aggregation.
//!
//! Images are read in bounded batches, analyzed in parallel, and folded into
//! the report in input order, so output is independent of the worker count.

use std::io::BufRead;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::AnalysisConfig;
use crate::geometry::{iou, BBox};
use crate::interchange::{AnchorCache, DumpError, DumpHeader, DumpReader, ImageIntrospection};
use crate::matching::{match_image, MatchResult};
use crate::mechanism::{classify_image, FnRecord, MechanismError, MechanismLabel};
use crate::nms::find_suppressor;
use crate::report::{AnalysisReport, ReportBuilder};

pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error("image {image_id}: {source}")]
    Mechanism { image_id: String, source: MechanismError },
    #[error("{0}")]
    Config(String),
    #[error("writing records: {0}")]
    Sink(#[from] std::io::Error),
}

/// The kept detection blamed for suppressing a calibration miss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suppressor {
    /// Index into the image's `detections`.
    pub detection: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub iou_with_gt: f64,
}

/// Forensics for a classifier-calibration miss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suppression {
    /// Index into `refined` of the best-scoring correctly classified localized candidate.
    pub victim: usize,
    pub victim_iou: f64,
    /// `None` when no kept detection overlaps the victim (lost to pre-NMS truncation).
    pub suppressor: Option<Suppressor>,
}

/// One output line of the per-miss record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissRecord {
    #[serde(flatten)]
    pub record: FnRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suppression: Option<Suppression>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyzeOptions {
    pub config: AnalysisConfig,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
    pub batch_size: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            config: AnalysisConfig::default(),
            workers: 0,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

/// Suppression forensics for `record` if it is a calibration miss.
pub fn suppression_for(record: &FnRecord, image: &ImageIntrospection, config: &AnalysisConfig) -> Option<Suppression> {
    if record.mechanism != MechanismLabel::ClassifierCalibration {
        return None;
    }
    let gt = image.gt(record.gt_id)?;
    let c = record.class_index;
    let victim = record
        .evidence
        .localized_candidates
        .iter()
        .copied()
        .filter(|&i| image.refined[i].scores.class_score(c) >= config.theta_cls)
        .max_by(|&a, &b| {
            let (sa, sb) = (image.refined[a].scores.class_score(c), image.refined[b].scores.class_score(c));
            sa.total_cmp(&sb).then(b.cmp(&a))
        })?;
    let v = &image.refined[victim];
    let suppressor = find_suppressor(v, c, &image.detections, &config.nms()).map(|d| {
        let detection = image
            .detections
            .iter()
            .position(|x| std::ptr::eq(x, d))
            .expect("suppressor comes from the image");
        Suppressor {
            detection,
            bbox: d.bbox,
            score: d.score,
            iou_with_gt: iou(&d.bbox, &gt.bbox),
        }
    });
    Some(Suppression {
        victim,
        victim_iou: iou(&v.bbox, &gt.bbox),
        suppressor,
    })
}

/// Match, attribute and type every miss of one image.
pub fn analyze_image(
    image: &ImageIntrospection,
    header: &DumpHeader,
    anchors: &AnchorCache,
    config: &AnalysisConfig,
) -> Result<(MatchResult, Vec<MissRecord>), PipelineError> {
    let thresholds = config.thresholds();
    let matched = match_image(image, thresholds.theta_loc);
    let records = classify_image(image, &matched, header, anchors, &thresholds, &config.tide()).map_err(|source| {
        PipelineError::Mechanism {
            image_id: image.image_id.clone(),
            source,
        }
    })?;
    let out = records
        .into_iter()
        .map(|record| MissRecord {
            suppression: suppression_for(&record, image, config),
            record,
        })
        .collect();
    Ok((matched, out))
}

struct Runner<'a> {
    header: &'a DumpHeader,
    anchors: AnchorCache,
    config: AnalysisConfig,
    pool: Option<rayon::ThreadPool>,
    builder: ReportBuilder,
}

impl<'a> Runner<'a> {
    fn new(header: &'a DumpHeader, opts: &AnalyzeOptions) -> Result<Self, PipelineError> {
        opts.config.validate().map_err(PipelineError::Config)?;
        let pool = if opts.workers > 0 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(opts.workers)
                    .build()
                    .map_err(|e| PipelineError::Config(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            header,
            anchors: AnchorCache::new(),
            config: opts.config,
            pool,
            builder: ReportBuilder::new(&header.catalog, opts.config),
        })
    }

    fn batch(
        &mut self,
        images: &[ImageIntrospection],
        sink: &mut impl FnMut(&MissRecord) -> std::io::Result<()>,
    ) -> Result<(), PipelineError> {
        let work = || {
            images
                .par_iter()
                .map(|img| analyze_image(img, self.header, &self.anchors, &self.config))
                .collect::<Result<Vec<_>, _>>()
        };
        let results = match &self.pool {
            Some(pool) => pool.install(work),
            None => work(),
        }?;
        for (img, (matched, records)) in images.iter().zip(&results) {
            self.builder.add_image(img, matched, records.iter().map(|r| &r.record));
            for r in records {
                sink(r)?;
            }
        }
        Ok(())
    }
}

/// Streams a dump through the analysis, handing each miss record to `sink` in input order.
pub fn analyze<R: BufRead>(
    mut reader: DumpReader<R>,
    opts: &AnalyzeOptions,
    mut sink: impl FnMut(&MissRecord) -> std::io::Result<()>,
) -> Result<AnalysisReport, PipelineError> {
    let header = reader.header().clone();
    let mut runner = Runner::new(&header, opts)?;
    let batch_size = opts.batch_size.max(1);
    let mut batch = Vec::with_capacity(batch_size);
    loop {
        batch.clear();
        for item in reader.by_ref().take(batch_size) {
            batch.push(item?);
        }
        if batch.is_empty() {
            break;
        }
        runner.batch(&batch, &mut sink)?;
    }
    Ok(runner.builder.finish())
}

/// In-memory variant of [`analyze`].
pub fn analyze_images(
    header: &DumpHeader,
    images: &[ImageIntrospection],
    opts: &AnalyzeOptions,
) -> Result<(Vec<MissRecord>, AnalysisReport), PipelineError> {
    let mut runner = Runner::new(header, opts)?;
    let mut out = Vec::new();
    for chunk in images.chunks(opts.batch_size.max(1)) {
        runner.batch(chunk, &mut |r| {
            out.push(r.clone());
            Ok(())
        })?;
    }
    Ok((out, runner.builder.finish()))
}
