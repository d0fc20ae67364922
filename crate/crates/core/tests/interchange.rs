use std::io::{BufReader, Read};

use fnscope_core::interchange::{create_dump, emit_dump, open_dump, parse_dump};
use fnscope_core::synth::{generate, ImagePlan, InjectionPlan, ObjectTarget};
use fnscope_core::AnalysisConfig;
use proptest::prelude::*;

fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[test]
fn calibration_fixture_is_canonical() {
    let text = std::fs::read_to_string(fixture("calibration_suppression.jsonl")).unwrap();
    let (header, images) = parse_dump(text.as_bytes()).unwrap();
    assert_eq!(emit_dump(&header, &images).unwrap(), text);
}

#[test]
fn gzip_and_plain_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let plan = InjectionPlan::from_path(fixture("demo_plan.json")).unwrap();
    let dump = generate(&plan, 5, &AnalysisConfig::default()).unwrap();
    let canonical = dump.to_canonical_string().unwrap();
    for name in ["d.jsonl", "d.jsonl.gz"] {
        let path = dir.path().join(name);
        let mut w = create_dump(&path, dump.header.clone()).unwrap();
        for img in &dump.images {
            w.write_image(img).unwrap();
        }
        w.finish().unwrap();
        let reader = open_dump(&path).unwrap();
        assert_eq!(reader.header(), &dump.header);
        let images: Vec<_> = reader.map(Result::unwrap).collect();
        assert_eq!(images, dump.images);
        if !name.ends_with(".gz") {
            assert_eq!(std::fs::read_to_string(&path).unwrap(), canonical);
        } else {
            let mut s = String::new();
            flate2::read::GzDecoder::new(BufReader::new(std::fs::File::open(&path).unwrap()))
                .read_to_string(&mut s)
                .unwrap();
            assert_eq!(s, canonical);
        }
    }
}

#[test]
fn one_stage_dump_round_trips() {
    let plan = InjectionPlan::from_path(fixture("one_stage_plan.json")).unwrap();
    let dump = generate(&plan, 1, &AnalysisConfig::default()).unwrap();
    let text = dump.to_canonical_string().unwrap();
    let (header, images) = parse_dump(text.as_bytes()).unwrap();
    assert_eq!(header, dump.header);
    assert_eq!(images, dump.images);
    assert!(images.iter().all(|i| i.proposals.is_empty()));
}

const TARGETS: [ObjectTarget; 7] = [
    ObjectTarget::Detected,
    ObjectTarget::Ignored,
    ObjectTarget::ProposalProcess,
    ObjectTarget::Regressor,
    ObjectTarget::BackgroundClassification,
    ObjectTarget::ClassifierCalibration,
    ObjectTarget::InterclassClassification,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // emit ∘ parse is the identity on canonical text
    #[test]
    fn emit_parse_is_a_fixed_point(seed in any::<u64>(), objects in prop::collection::vec(0usize..7, 0..8)) {
        let mut plan = InjectionPlan::new(vec!["a".into(), "b".into()]);
        plan.proposals_per_image = 200;
        plan.images.push(ImagePlan { objects: objects.iter().map(|&i| TARGETS[i]).collect(), repeat: 1 });
        let dump = generate(&plan, seed, &AnalysisConfig::default()).unwrap();
        let text = dump.to_canonical_string().unwrap();
        let (header, images) = parse_dump(text.as_bytes()).unwrap();
        prop_assert_eq!(&images, &dump.images);
        prop_assert_eq!(emit_dump(&header, &images).unwrap(), text);
    }
}
