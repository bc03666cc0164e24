//! File and wire formats shared with the exporter.

use narracap::annotations::{parse_annotations, AnnotationError, Split};
use narracap::embed::{open_store, EmbedError, EmbeddingStore, Region, RegionSpec};
use narracap::taxonomy::{EmotionLabel, VocabularyCategory};

/// What a writer in another language produces: header, then key/vector
/// records, all little-endian.
fn packed(dim: u32, scale: f32, entries: &[(&str, &[f32])]) -> Vec<u8> {
    let mut b = b"NEMB".to_vec();
    b.push(1);
    b.extend(dim.to_le_bytes());
    b.extend(scale.to_le_bytes());
    b.extend((entries.len() as u32).to_le_bytes());
    for (key, values) in entries {
        b.extend((key.len() as u16).to_le_bytes());
        b.extend(key.as_bytes());
        for v in *values {
            b.extend(v.to_le_bytes());
        }
    }
    b
}

#[test]
fn nemb_written_elsewhere_round_trips() {
    let s = std::f32::consts::FRAC_1_SQRT_2;
    let bytes = packed(
        2,
        100.0,
        &[
            ("text:emotions:0", &[1.0, 0.0]),
            ("img:0001:full", &[s, s]),
            ("img:0001:bbox", &[0.0, -1.0]),
        ],
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.nemb");
    std::fs::write(&path, &bytes).unwrap();
    let store = open_store(&path).unwrap();
    assert_eq!(store.dim(), 2);
    assert_eq!(store.len(), 3);
    assert_eq!(store.logit_scale(), 100.0);
    let keys: Vec<&str> = store.keys().collect();
    assert_eq!(keys, ["text:emotions:0", "img:0001:full", "img:0001:bbox"]);
    let t = store.get_text_embedding(VocabularyCategory::Emotions, 0).unwrap();
    let img = store.get_image_embedding(&RegionSpec::full("0001")).unwrap();
    assert!((t.dot(img).unwrap() - f64::from(s)).abs() < 1e-7);
    assert_eq!(store.to_bytes(), bytes);
}

#[test]
fn nemb_rejects_damaged_files() {
    let good = packed(2, 100.0, &[("a", &[1.0, 0.0])]);
    let cases: Vec<(&str, Vec<u8>)> = vec![
        ("magic", [b"NEMX".as_slice(), &good[4..]].concat()),
        ("version", [&good[..4], &[2u8], &good[5..]].concat()),
        ("truncated", good[..good.len() - 1].to_vec()),
        ("trailing", [good.as_slice(), &[0u8]].concat()),
        ("norm", packed(2, 100.0, &[("a", &[0.6, 0.6])])),
        ("duplicate", packed(2, 100.0, &[("a", &[1.0, 0.0]), ("a", &[0.0, 1.0])])),
        ("zero dim", packed(0, 100.0, &[])),
    ];
    for (name, bytes) in cases {
        let err = EmbeddingStore::from_bytes(&bytes).unwrap_err();
        match name {
            "norm" => assert!(matches!(err, EmbedError::Integrity { .. }), "{name}: {err:?}"),
            _ => assert!(matches!(err, EmbedError::Format(_)), "{name}: {err:?}"),
        }
    }
}

#[test]
fn store_key_scheme() {
    let crop = RegionSpec::crop("a/b", narracap::embed::BBox { x1: 0, y1: 5, x2: 10, y2: 20 }).unwrap();
    assert_eq!(crop.key(), "img:a/b:bbox");
    assert_eq!(crop.instance_key().unwrap(), "img:a/b:bbox:0,5,10,20");
    assert_eq!(RegionSpec::full("a/b").key(), "img:a/b:full");
    assert_eq!(crop.region, Region::Bbox);
    assert_eq!(narracap::embed::text_key(VocabularyCategory::Signals, 12), "text:signals:12");
}

const EXAMPLE: &str = r#"{"image_id":"mscoco/images/COCO_val2014_000000000042","image_path":"mscoco/images/COCO_val2014_000000000042.jpg","bbox":[12,40,210,388],"labels_by_annotator":[["Engagement","Happiness"],["happiness","Pleasure"]],"split":"val"}
{"image_id":"framesdb/images/frame_0007","image_path":"framesdb/images/frame_0007.jpg","bbox":[0,0,64,128],"labels_by_annotator":[["Doubt/Confusion"]],"split":"test"}
{"image_id":"ade20k/images/ADE_train_00001","image_path":"ade20k/images/ADE_train_00001.jpg","bbox":[5,5,50,90],"labels_by_annotator":[["Fatigue","Peace"]],"split":"train"}
"#;

#[test]
fn annotation_schema_example() {
    let records = parse_annotations(EXAMPLE, "example.jsonl").unwrap();
    assert_eq!(records.len(), 3);
    let first = &records[0];
    assert_eq!(first.split, Split::Val);
    assert_eq!(first.labels_by_annotator.len(), 2);
    assert_eq!(
        first.combined().iter().collect::<Vec<_>>(),
        [EmotionLabel::Engagement, EmotionLabel::Happiness, EmotionLabel::Pleasure]
    );
    assert_eq!(records[1].combined().iter().next(), Some(EmotionLabel::DoubtConfusion));
    // writing and reading again is lossless
    let text: String = records.iter().map(|r| r.to_json_line() + "\n").collect();
    assert_eq!(parse_annotations(&text, "again").unwrap(), records);
}

#[test]
fn annotation_schema_errors_name_the_line() {
    let bad_label = EXAMPLE.replacen("Fatigue", "Boredom", 1);
    match parse_annotations(&bad_label, "f.jsonl").unwrap_err() {
        AnnotationError::UnknownLabel { line, label, .. } => {
            assert_eq!((line, label.as_str()), (3, "Boredom"));
        }
        e => panic!("{e:?}"),
    }
    let extra_field = EXAMPLE.replacen("\"split\":\"test\"", "\"split\":\"test\",\"age\":\"adult\"", 1);
    assert!(matches!(
        parse_annotations(&extra_field, "f.jsonl").unwrap_err(),
        AnnotationError::Format { line: 2, .. }
    ));
    let bad_box = EXAMPLE.replacen("[0,0,64,128]", "[64,0,0,128]", 1);
    assert!(matches!(
        parse_annotations(&bad_box, "f.jsonl").unwrap_err(),
        AnnotationError::Format { line: 2, .. }
    ));
}
