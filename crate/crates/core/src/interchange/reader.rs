//! Streaming, validating dump reader.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use super::{
    ClassCatalog, Detection, DumpError, DumpErrorKind, DumpHeader, GroundTruthObject,
    ImageIntrospection, Proposal, ProposalMode, RefinedCandidate, ScoreVector, FORMAT_VERSION,
};
use crate::geometry::BBox;
use crate::synth::anchors::{AnchorGrid, AnchorSpec};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    format_version: String,
    class_names: Vec<String>,
    has_background_entry: bool,
    #[serde(default)]
    proposals_are_anchors: bool,
    #[serde(default)]
    anchor_spec: Option<AnchorSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    image_id: String,
    width: u32,
    height: u32,
    ground_truth: Vec<RawGroundTruth>,
    proposals: Vec<RawProposal>,
    refined: Vec<RawRefined>,
    detections: Vec<RawDetection>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGroundTruth {
    id: u64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class_index: u32,
    #[serde(default)]
    ignore: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProposal {
    id: u64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default)]
    objectness: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRefined {
    proposal_id: u64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    scores: Vec<f64>,
    #[serde(default)]
    class_specific_for: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class_index: u32,
    score: f64,
    #[serde(default)]
    source_candidate: Option<usize>,
}

fn parse_record<T: DeserializeOwned>(text: &str, line: usize) -> Result<T, DumpError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        DumpError::new(
            line,
            DumpErrorKind::Syntax {
                path: if path == "." { String::new() } else { path },
                message: inner.to_string(),
            },
        )
    })?;
    de.end().map_err(|e| {
        DumpError::new(
            line,
            DumpErrorKind::Syntax {
                path: String::new(),
                message: e.to_string(),
            },
        )
    })?;
    Ok(value)
}

fn header_from_raw(raw: RawHeader, line: usize) -> Result<DumpHeader, DumpError> {
    if raw.format_version != FORMAT_VERSION {
        return Err(DumpError::new(
            line,
            DumpErrorKind::UnsupportedVersion(raw.format_version),
        ));
    }
    let catalog = ClassCatalog::new(raw.class_names, raw.has_background_entry)
        .map_err(|m| DumpError::invariant(line, "class_names", m))?;
    let proposals = match (raw.proposals_are_anchors, raw.anchor_spec) {
        (false, None) => ProposalMode::Explicit,
        (true, Some(spec)) => {
            spec.validate()
                .map_err(|m| DumpError::invariant(line, "anchor_spec", m))?;
            ProposalMode::Anchors(spec)
        }
        (true, None) => {
            return Err(DumpError::invariant(
                line,
                "anchor_spec",
                "proposals_are_anchors requires an anchor_spec",
            ))
        }
        (false, Some(_)) => {
            return Err(DumpError::invariant(
                line,
                "anchor_spec",
                "anchor_spec given without proposals_are_anchors",
            ))
        }
    };
    Ok(DumpHeader { catalog, proposals })
}

fn make_box(raw: [f64; 4], path: impl FnOnce() -> String) -> Result<BBox, (String, String)> {
    BBox::try_from(raw).map_err(|_| (path(), "non-positive area".to_string()))
}

fn image_from_raw(raw: RawImage) -> Result<ImageIntrospection, (String, String)> {
    let ground_truth = raw
        .ground_truth
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            Ok(GroundTruthObject {
                id: g.id,
                bbox: make_box(g.bbox, || format!("ground_truth[{i}].box"))?,
                class_index: g.class_index,
                ignore: g.ignore,
            })
        })
        .collect::<Result<Vec<_>, (String, String)>>()?;
    let proposals = raw
        .proposals
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(Proposal {
                id: p.id,
                bbox: make_box(p.bbox, || format!("proposals[{i}].box"))?,
                objectness: p.objectness,
            })
        })
        .collect::<Result<Vec<_>, (String, String)>>()?;
    let refined = raw
        .refined
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(RefinedCandidate {
                proposal_id: r.proposal_id,
                bbox: make_box(r.bbox, || format!("refined[{i}].box"))?,
                scores: ScoreVector::new(r.scores),
                class_specific_for: r.class_specific_for,
            })
        })
        .collect::<Result<Vec<_>, (String, String)>>()?;
    let detections = raw
        .detections
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            Ok(Detection {
                bbox: make_box(d.bbox, || format!("detections[{i}].box"))?,
                class_index: d.class_index,
                score: d.score,
                source_candidate: d.source_candidate,
            })
        })
        .collect::<Result<Vec<_>, (String, String)>>()?;
    Ok(ImageIntrospection {
        image_id: raw.image_id,
        width: raw.width,
        height: raw.height,
        ground_truth,
        proposals,
        refined,
        detections,
    })
}

fn unit_interval(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

/// Checks every cross-field invariant of one image against its header.
///
/// Returns the offending field path and a message.
pub fn check_image(image: &ImageIntrospection, header: &DumpHeader) -> Result<(), (String, String)> {
    let catalog = &header.catalog;
    let err = |path: String, msg: String| Err((path, msg));
    if image.image_id.is_empty() {
        return err("image_id".into(), "empty image_id".into());
    }
    if image.width == 0 || image.height == 0 {
        return err("width".into(), "image dimensions must be positive".into());
    }

    let mut gt_ids = HashSet::new();
    for (i, g) in image.ground_truth.iter().enumerate() {
        if !gt_ids.insert(g.id) {
            return err(format!("ground_truth[{i}].id"), format!("duplicate ground-truth id {}", g.id));
        }
        if !catalog.contains(g.class_index) {
            return err(
                format!("ground_truth[{i}].class_index"),
                format!("class index {} outside 1..={}", g.class_index, catalog.num_classes()),
            );
        }
    }

    let anchor_count = match &header.proposals {
        ProposalMode::Explicit => None,
        ProposalMode::Anchors(spec) => {
            if !image.proposals.is_empty() {
                return err(
                    "proposals".into(),
                    "proposal records must be elided when proposals_are_anchors is set".into(),
                );
            }
            Some(AnchorGrid::new(image.width, image.height, spec).count())
        }
    };

    let mut proposal_ids = HashSet::new();
    for (i, p) in image.proposals.iter().enumerate() {
        if !proposal_ids.insert(p.id) {
            return err(format!("proposals[{i}].id"), format!("duplicate proposal id {}", p.id));
        }
        if let Some(o) = p.objectness {
            if !unit_interval(o) {
                return err(format!("proposals[{i}].objectness"), "objectness outside [0, 1]".into());
            }
        }
    }

    if anchor_count.is_none() && image.proposals.is_empty() && !image.refined.is_empty() {
        return err(
            "refined".into(),
            "refined candidates present without any proposals".into(),
        );
    }

    for (i, r) in image.refined.iter().enumerate() {
        let resolves = match anchor_count {
            Some(n) => r.proposal_id < n,
            None => proposal_ids.contains(&r.proposal_id),
        };
        if !resolves {
            return err(
                format!("refined[{i}].proposal_id"),
                format!("unresolved proposal id {}", r.proposal_id),
            );
        }
        if r.scores.len() != catalog.score_len() {
            return err(
                format!("refined[{i}].scores"),
                format!(
                    "score vector length {} does not match expected {}",
                    r.scores.len(),
                    catalog.score_len()
                ),
            );
        }
        if let Some(k) = r.scores.as_slice().iter().position(|s| !unit_interval(*s)) {
            return err(format!("refined[{i}].scores[{k}]"), "score outside [0, 1]".into());
        }
        if let Some(c) = r.class_specific_for {
            if !catalog.contains(c) {
                return err(
                    format!("refined[{i}].class_specific_for"),
                    format!("class index {c} outside 1..={}", catalog.num_classes()),
                );
            }
        }
    }

    for (i, d) in image.detections.iter().enumerate() {
        if !catalog.contains(d.class_index) {
            return err(
                format!("detections[{i}].class_index"),
                format!("class index {} outside 1..={}", d.class_index, catalog.num_classes()),
            );
        }
        if !unit_interval(d.score) {
            return err(format!("detections[{i}].score"), "score outside [0, 1]".into());
        }
        if let Some(k) = d.source_candidate {
            if k >= image.refined.len() {
                return err(
                    format!("detections[{i}].source_candidate"),
                    format!("unresolved candidate index {k}"),
                );
            }
        }
    }
    Ok(())
}

/// Streams validated images out of a dump, in file order.
pub struct DumpReader<R> {
    input: R,
    line: usize,
    buf: String,
    header: DumpHeader,
    seen_ids: HashSet<String>,
    failed_io: bool,
}

impl<R: BufRead> DumpReader<R> {
    /// Reads and validates the header line.
    pub fn new(mut input: R) -> Result<Self, DumpError> {
        let mut buf = String::new();
        let mut line = 0;
        loop {
            buf.clear();
            let n = input
                .read_line(&mut buf)
                .map_err(|e| DumpError::new(line + 1, DumpErrorKind::Io(e.to_string())))?;
            if n == 0 {
                return Err(DumpError::new(line, DumpErrorKind::MissingHeader));
            }
            line += 1;
            if !buf.trim().is_empty() {
                break;
            }
        }
        let raw: RawHeader = parse_record(buf.trim_end_matches(['\n', '\r']), line)?;
        let header = header_from_raw(raw, line)?;
        Ok(Self {
            input,
            line,
            buf,
            header,
            seen_ids: HashSet::new(),
            failed_io: false,
        })
    }

    pub fn header(&self) -> &DumpHeader {
        &self.header
    }

    pub fn catalog(&self) -> &ClassCatalog {
        &self.header.catalog
    }

    /// Line number of the most recently read record.
    pub fn line(&self) -> usize {
        self.line
    }

    fn next_record(&mut self) -> Option<Result<ImageIntrospection, DumpError>> {
        if self.failed_io {
            return None;
        }
        loop {
            self.buf.clear();
            match self.input.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => {
                    self.failed_io = true;
                    return Some(Err(DumpError::new(self.line + 1, DumpErrorKind::Io(e.to_string()))));
                }
            }
            self.line += 1;
            if !self.buf.trim().is_empty() {
                break;
            }
        }
        let line = self.line;
        let text = self.buf.trim_end_matches(['\n', '\r']);
        let raw: RawImage = match parse_record(text, line) {
            Ok(r) => r,
            Err(e) => return Some(Err(e)),
        };
        let image = match image_from_raw(raw)
            .and_then(|img| check_image(&img, &self.header).map(|_| img))
        {
            Ok(img) => img,
            Err((path, message)) => return Some(Err(DumpError::invariant(line, path, message))),
        };
        if !self.seen_ids.insert(image.image_id.clone()) {
            return Some(Err(DumpError::new(
                line,
                DumpErrorKind::DuplicateImageId(image.image_id),
            )));
        }
        Some(Ok(image))
    }
}

impl<R: BufRead> Iterator for DumpReader<R> {
    type Item = Result<ImageIntrospection, DumpError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record()
    }
}

/// Opens a dump file; `.gz` files are decompressed transparently.
pub fn open_dump(path: impl AsRef<Path>) -> Result<DumpReader<Box<dyn BufRead + Send>>, DumpError> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| DumpError::new(0, DumpErrorKind::Io(format!("{}: {e}", path.display()))))?;
    let input: Box<dyn BufRead + Send> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(BufReader::new(MultiGzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    DumpReader::new(input)
}

/// Reads a whole dump into memory, failing on the first bad record.
pub fn parse_dump<R: BufRead>(input: R) -> Result<(DumpHeader, Vec<ImageIntrospection>), DumpError> {
    let reader = DumpReader::new(input)?;
    let header = reader.header().clone();
    let images = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((header, images))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = r#"{"format_version":"1","class_names":["cat","dog"],"has_background_entry":true}"#;

    fn parse(text: &str) -> Result<(DumpHeader, Vec<ImageIntrospection>), DumpError> {
        parse_dump(text.as_bytes())
    }

    #[test]
    fn header_only_dump_is_empty() {
        let (header, images) = parse(&format!("{HEADER}\n")).unwrap();
        assert_eq!(header.catalog.num_classes(), 2);
        assert!(images.is_empty());
    }

    #[test]
    fn degenerate_gt_box_names_field_path() {
        let img = r#"{"image_id":"a","width":10,"height":10,"ground_truth":[{"id":1,"box":[5,5,5,9],"class_index":1,"ignore":false}],"proposals":[],"refined":[],"detections":[]}"#;
        let err = parse(&format!("{HEADER}\n{img}\n")).unwrap_err();
        assert_eq!(err.line, 2);
        assert!(!err.kind.is_syntax());
        assert_eq!(err.to_string(), "line 2: non-positive area at ground_truth[0].box");
    }

    #[test]
    fn malformed_record_reports_path() {
        let img = r#"{"image_id":"a","width":10,"height":10,"ground_truth":[{"id":"x","box":[0,0,1,1],"class_index":1}],"proposals":[],"refined":[],"detections":[]}"#;
        let err = parse(&format!("{HEADER}\n{img}\n")).unwrap_err();
        assert_eq!(err.line, 2);
        assert!(err.kind.is_syntax());
        match err.kind {
            DumpErrorKind::Syntax { path, .. } => assert_eq!(path, "ground_truth[0].id"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_line_is_syntax_error_on_that_line() {
        let img = r#"{"image_id":"a","width":10,"height":10,"ground_truth":[],"proposals":[],"refined":[],"detections":[]}"#;
        let text = format!("{HEADER}\n{img}\n{}", &img[..40]);
        let err = parse(&text).unwrap_err();
        assert_eq!(err.line, 3);
        assert!(err.kind.is_syntax());
    }

    #[test]
    fn duplicate_image_id_rejected() {
        let img = r#"{"image_id":"a","width":10,"height":10,"ground_truth":[],"proposals":[],"refined":[],"detections":[]}"#;
        let err = parse(&format!("{HEADER}\n{img}\n{img}\n")).unwrap_err();
        assert_eq!(err.kind, DumpErrorKind::DuplicateImageId("a".into()));
        assert_eq!(err.line, 3);
    }

    #[test]
    fn score_length_checked_against_catalog() {
        let img = r#"{"image_id":"a","width":10,"height":10,"ground_truth":[],"proposals":[{"id":0,"box":[0,0,1,1]}],"refined":[{"proposal_id":0,"box":[0,0,1,1],"scores":[0.1,0.2]}],"detections":[]}"#;
        let err = parse(&format!("{HEADER}\n{img}\n")).unwrap_err();
        assert!(err.to_string().contains("refined[0].scores"), "{err}");

        let no_bg = r#"{"format_version":"1","class_names":["cat","dog"],"has_background_entry":false}"#;
        assert!(parse(&format!("{no_bg}\n{img}\n")).is_ok());
    }

    #[test]
    fn refined_without_proposals_rejected() {
        let img = r#"{"image_id":"a","width":10,"height":10,"ground_truth":[],"proposals":[],"refined":[{"proposal_id":0,"box":[0,0,1,1],"scores":[0.1,0.2,0.7]}],"detections":[]}"#;
        let err = parse(&format!("{HEADER}\n{img}\n")).unwrap_err();
        assert!(err.to_string().contains("without any proposals"), "{err}");
    }

    #[test]
    fn unresolved_source_candidate_rejected() {
        let img = r#"{"image_id":"a","width":10,"height":10,"ground_truth":[],"proposals":[],"refined":[],"detections":[{"box":[0,0,1,1],"class_index":1,"score":0.5,"source_candidate":0}]}"#;
        let err = parse(&format!("{HEADER}\n{img}\n")).unwrap_err();
        assert!(err.to_string().contains("detections[0].source_candidate"), "{err}");
    }

    #[test]
    fn class_index_out_of_range_rejected() {
        let img = r#"{"image_id":"a","width":10,"height":10,"ground_truth":[{"id":1,"box":[0,0,1,1],"class_index":3}],"proposals":[],"refined":[],"detections":[]}"#;
        assert!(parse(&format!("{HEADER}\n{img}\n")).is_err());
        let img0 = img.replace("\"class_index\":3", "\"class_index\":0");
        assert!(parse(&format!("{HEADER}\n{img0}\n")).is_err());
    }

    #[test]
    fn missing_header_and_bad_version() {
        assert_eq!(parse("").unwrap_err().kind, DumpErrorKind::MissingHeader);
        let v2 = HEADER.replace("\"1\"", "\"2\"");
        assert!(matches!(parse(&v2).unwrap_err().kind, DumpErrorKind::UnsupportedVersion(_)));
    }

    #[test]
    fn anchor_mode_resolves_against_grid() {
        let header = r#"{"format_version":"1","class_names":["a"],"has_background_entry":false,"proposals_are_anchors":true,"anchor_spec":{"strides":[1],"sizes":[1],"aspect_ratios":[1],"scale_octaves":1,"resize":null,"pad_multiple":1,"offset":0.5}}"#;
        // 2x2 image, one anchor per pixel: ids 0..4
        let ok = r#"{"image_id":"a","width":2,"height":2,"ground_truth":[],"proposals":[],"refined":[{"proposal_id":3,"box":[0,0,1,1],"scores":[0.5]}],"detections":[]}"#;
        assert!(parse(&format!("{header}\n{ok}\n")).is_ok());
        let bad = ok.replace("\"proposal_id\":3", "\"proposal_id\":4");
        assert!(parse(&format!("{header}\n{bad}\n")).is_err());
    }
}
