//! Canonical dump writer.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;
use serde::Serialize;
use thiserror::Error;

use super::format::to_canonical_string;
use super::reader::check_image;
use super::{DumpHeader, ImageIntrospection, FORMAT_VERSION};
use crate::synth::anchors::AnchorSpec;

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("image \"{image_id}\": {message} at {path}")]
    Invalid {
        image_id: String,
        path: String,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Serialize)]
struct HeaderRecord<'a> {
    format_version: &'a str,
    class_names: &'a [String],
    has_background_entry: bool,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    proposals_are_anchors: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    anchor_spec: Option<&'a AnchorSpec>,
}

pub(crate) fn header_line(header: &DumpHeader) -> serde_json::Result<String> {
    let spec = header.anchor_spec();
    to_canonical_string(&HeaderRecord {
        format_version: FORMAT_VERSION,
        class_names: header.catalog.names(),
        has_background_entry: header.catalog.has_background_entry(),
        proposals_are_anchors: spec.is_some(),
        anchor_spec: spec,
    })
}

/// Writes one header line, then one line per image.
pub struct DumpWriter<W: Write> {
    out: W,
    header: DumpHeader,
}

impl<W: Write> DumpWriter<W> {
    pub fn new(mut out: W, header: DumpHeader) -> Result<Self, EmitError> {
        writeln!(out, "{}", header_line(&header)?)?;
        Ok(Self { out, header })
    }

    pub fn write_image(&mut self, image: &ImageIntrospection) -> Result<(), EmitError> {
        check_image(image, &self.header).map_err(|(path, message)| EmitError::Invalid {
            image_id: image.image_id.clone(),
            path,
            message,
        })?;
        writeln!(self.out, "{}", to_canonical_string(image)?)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, EmitError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Creates a dump file; a `.gz` path is gzip-compressed.
pub fn create_dump(path: impl AsRef<Path>, header: DumpHeader) -> Result<DumpWriter<Box<dyn Write>>, EmitError> {
    let path = path.as_ref();
    let file = BufWriter::new(File::create(path)?);
    let out: Box<dyn Write> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzEncoder::new(file, Compression::default()))
    } else {
        Box::new(file)
    };
    DumpWriter::new(out, header)
}

/// Serializes a whole dump to canonical text.
pub fn emit_dump<'a, I>(header: &DumpHeader, images: I) -> Result<String, EmitError>
where
    I: IntoIterator<Item = &'a ImageIntrospection>,
{
    let mut w = DumpWriter::new(Vec::new(), header.clone())?;
    for img in images {
        w.write_image(img)?;
    }
    Ok(String::from_utf8(w.finish()?).expect("canonical output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::interchange::{parse_dump, ClassCatalog, Detection, GroundTruthObject};

    fn header() -> DumpHeader {
        DumpHeader::explicit(ClassCatalog::new(vec!["a".into(), "b".into()], true).unwrap())
    }

    #[test]
    fn empty_dump_is_header_only() {
        let text = emit_dump(&header(), []).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(
            text,
            "{\"format_version\":\"1\",\"class_names\":[\"a\",\"b\"],\"has_background_entry\":true}\n"
        );
    }

    #[test]
    fn one_image_is_two_lines() {
        let mut img = ImageIntrospection::empty("img", 100, 80);
        img.ground_truth.push(GroundTruthObject {
            id: 7,
            bbox: BBox::new(1.0, 2.0, 30.5, 40.25).unwrap(),
            class_index: 2,
            ignore: false,
        });
        let text = emit_dump(&header(), [&img]).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(
            text.lines().nth(1).unwrap(),
            r#"{"image_id":"img","width":100,"height":80,"ground_truth":[{"id":7,"box":[1,2,30.5,40.25],"class_index":2,"ignore":false}],"proposals":[],"refined":[],"detections":[]}"#
        );
        let (h, images) = parse_dump(text.as_bytes()).unwrap();
        assert_eq!(h, header());
        assert_eq!(images, vec![img]);
    }

    #[test]
    fn unresolved_reference_is_emit_error() {
        let mut img = ImageIntrospection::empty("img", 100, 80);
        img.detections.push(Detection {
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            class_index: 1,
            score: 0.9,
            source_candidate: Some(0),
        });
        let err = emit_dump(&header(), [&img]).unwrap_err();
        assert!(err.to_string().contains("source_candidate"), "{err}");
    }

    #[test]
    fn gzip_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl.gz");
        let img = ImageIntrospection::empty("x", 4, 4);
        let mut w = create_dump(&path, header()).unwrap();
        w.write_image(&img).unwrap();
        drop(w.finish().unwrap());
        let r = crate::interchange::open_dump(&path).unwrap();
        let images: Vec<_> = r.collect::<Result<_, _>>().unwrap();
        assert_eq!(images, vec![img]);
    }
}
