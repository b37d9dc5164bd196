use super::*;
use image::{Rgb, RgbImage};

fn entry(path: &str, label: ClassLabel, split: Split) -> ManifestEntry {
    ManifestEntry {
        path: path.into(),
        label,
        domain: "d".into(),
        split,
    }
}

#[test]
fn duplicate_across_splits_names_entry() {
    let mut m = DatasetManifest::new(4, 3, "/data");
    m.entries.push(entry("a.png", ClassLabel::Real, Split::Train));
    m.entries.push(entry("b.png", ClassLabel::Fake, Split::Train));
    m.entries.push(entry("a.png", ClassLabel::Real, Split::Test));
    match m.validate() {
        Err(Error::Validation { entry, message }) => {
            assert_eq!(entry, "a.png");
            assert!(message.contains("train") && message.contains("test"), "{message}");
        }
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn bad_channel_count_rejected() {
    let m = DatasetManifest::new(4, 2, "/data");
    assert!(matches!(m.validate(), Err(Error::Config(_))));
}

fn write_png(path: &Path, f: impl Fn(u32, u32) -> [u8; 3]) {
    RgbImage::from_fn(4, 4, |x, y| Rgb(f(x, y))).save(path).unwrap();
}

#[test]
fn pixels_decode_to_unit_range_planes() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("x.png"), |x, y| {
        [(x * 60 + y) as u8, if (x + y) % 2 == 0 { 255 } else { 0 }, 17]
    });
    let mut m = DatasetManifest::new(4, 3, dir.path());
    m.entries.push(entry("x.png", ClassLabel::Real, Split::Train));
    let t = m.load_image(&m.entries[0]).unwrap();
    assert_eq!(t.shape(), &[3, 4, 4]);
    for y in 0..4 {
        for x in 0..4 {
            let i = y * 4 + x;
            assert_eq!(t.data()[i], (x * 60 + y) as f32 / 255.0);
            let g = t.data()[16 + i];
            assert_eq!(g, if (x + y) % 2 == 0 { 1.0 } else { 0.0 });
            assert_eq!(t.data()[32 + i], 17.0 / 255.0);
        }
    }
}

#[test]
fn missing_and_missized_files_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("x.png"), |_, _| [0, 0, 0]);
    let mut m = DatasetManifest::new(8, 3, dir.path());
    m.entries.push(entry("x.png", ClassLabel::Real, Split::Train));
    m.entries.push(entry("gone.png", ClassLabel::Fake, Split::Train));
    assert!(matches!(m.load_image(&m.entries[0]), Err(Error::Validation { .. })));
    match m.load_image(&m.entries[1]) {
        Err(Error::Validation { entry, .. }) => assert_eq!(entry, "gone.png"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn load_resolves_relative_to_manifest_dir() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("r.png"), |_, _| [255, 255, 255]);
    write_png(&dir.path().join("f.png"), |_, _| [0, 0, 0]);
    let mut m = DatasetManifest::new(4, 3, "ignored");
    m.entries.push(entry("r.png", ClassLabel::Real, Split::Val));
    m.entries.push(entry("f.png", ClassLabel::Fake, Split::Val));
    let path = dir.path().join("manifest.json");
    m.save(&path).unwrap();
    let loaded = load_manifest(&path).unwrap();
    let batch = loaded.load_batch(Split::Val, &[1, 0]).unwrap();
    assert_eq!(batch.shape(), &[2, 3, 4, 4]);
    assert!(batch.data()[..48].iter().all(|&v| v == 0.0));
    assert!(batch.data()[48..].iter().all(|&v| v == 1.0));
    assert!(loaded.load_batch(Split::Val, &[2]).is_err());
    loaded.require_both_classes(Split::Val).unwrap();
    assert!(loaded.require_both_classes(Split::Train).is_err());
}

#[test]
fn merge_pools_and_dedupes() {
    let mut a = DatasetManifest::new(4, 3, "/data/a");
    a.entries.push(entry("r.png", ClassLabel::Real, Split::Train));
    a.entries.push(entry("f.png", ClassLabel::Fake, Split::Train));
    let mut b = DatasetManifest::new(4, 3, "/data/b");
    b.entries.push(entry("r.png", ClassLabel::Real, Split::Train));
    b.entries.push(ManifestEntry {
        domain: "e".into(),
        ..entry("f.png", ClassLabel::Fake, Split::Test)
    });
    let dup = a.clone();
    let merged = merge_sources(&[a, b, dup]).unwrap();
    assert_eq!(merged.entries.len(), 4);
    assert_eq!(merged.count(Split::Train, ClassLabel::Real), 2);
    assert_eq!(merged.count(Split::Test, ClassLabel::Fake), 1);
    assert!(merged.entries.iter().all(|e| Path::new(&e.path).is_absolute()));
    assert_eq!(merged.domains(), vec!["d".to_string(), "e".to_string()]);

    let c = DatasetManifest::new(8, 3, "/data/c");
    assert!(merge_sources(&[merged, c]).is_err());
}

#[test]
fn sample_set_gather_and_concat() {
    let inputs = Tensor::new(vec![3, 1, 1, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
    let set = SampleSet {
        inputs,
        labels: vec![ClassLabel::Real, ClassLabel::Fake, ClassLabel::Real],
        ids: vec!["a".into(), "b".into(), "c".into()],
        domains: vec!["d".into(); 3],
    };
    let sub = set.subset(&[2, 0]).unwrap();
    assert_eq!(sub.inputs.data(), &[4., 5., 0., 1.]);
    assert_eq!(sub.ids, vec!["c", "a"]);
    let both = sub.concat(&set).unwrap();
    assert_eq!(both.len(), 5);
    assert_eq!(both.count(ClassLabel::Real), 4);
    assert!(set.gather(&[3]).is_err());
}
