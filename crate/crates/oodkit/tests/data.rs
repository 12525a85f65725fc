use std::path::Path;

use oodkit::data::{decode_gray, load_idx_subset, write_png, ClassMap, DatasetManifest, Split};
use oodkit::Error;
use oodkit_core::tensor::Tensor;

fn png(dir: &Path, name: &str, w: u32, h: u32, pixels: Vec<u8>) {
    let img = image::GrayImage::from_raw(w, h, pixels).unwrap();
    img.save(dir.join(name)).unwrap();
}

fn manifest(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("manifest.csv");
    std::fs::write(&p, format!("path,label,split\n{body}")).unwrap();
    p
}

#[test]
fn three_rows_three_tensors() {
    let dir = tempfile::tempdir().unwrap();
    for (i, v) in [10u8, 128, 250].iter().enumerate() {
        png(dir.path(), &format!("{i}.png"), 5, 3, vec![*v; 15]);
    }
    let m = DatasetManifest::read(&manifest(dir.path(), "0.png,0,train\n1.png,1,train\n2.png,2,test\n")).unwrap();
    let items = m.load(4, None, &ClassMap::numeric(3)).unwrap();
    assert_eq!(items.len(), 3);
    for (i, (it, v)) in items.iter().zip([10.0, 128.0, 250.0]).enumerate() {
        assert_eq!(it.image.shape(), &[1, 4, 4]);
        assert_eq!(it.label, Some(i));
        for x in it.image.data() {
            assert!((x - v / 255.0).abs() < 1e-12);
        }
    }
    let test = m.load(4, Some(Split::Test), &ClassMap::numeric(3)).unwrap();
    assert_eq!(test.len(), 1);
    assert_eq!(test[0].id, "2.png");
}

#[test]
fn checkerboard_png_resized_to_bilinear_oracle() {
    let dir = tempfile::tempdir().unwrap();
    png(dir.path(), "c.png", 2, 2, vec![0, 255, 255, 0]);
    let m = DatasetManifest::read(&manifest(dir.path(), "c.png,,test\n")).unwrap();
    let items = m.load(4, None, &ClassMap::numeric(3)).unwrap();
    assert_eq!(items[0].label, None);
    // half-pixel centres: source coordinate (i + 0.5) / 2 - 0.5 clamped to [0, 1]
    let axis = [0.0, 0.25, 0.75, 1.0];
    let img = &items[0].image;
    for (y, v) in axis.iter().enumerate() {
        for (x, u) in axis.iter().enumerate() {
            let want = u + v - 2.0 * u * v;
            assert!((img.data()[y * 4 + x] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn row_errors_carry_row_numbers() {
    let dir = tempfile::tempdir().unwrap();
    png(dir.path(), "a.png", 2, 2, vec![0; 4]);
    std::fs::write(dir.path().join("bad.png"), b"not a png").unwrap();
    let classes = ClassMap::numeric(3);

    let m = DatasetManifest::read(&manifest(dir.path(), "a.png,0,train\nmissing.png,1,train\n")).unwrap();
    match m.load(2, None, &classes) {
        Err(Error::Row { row: 2, message, .. }) => assert!(message.contains("missing.png"), "{message}"),
        other => panic!("{other:?}"),
    }
    let m = DatasetManifest::read(&manifest(dir.path(), "bad.png,0,train\n")).unwrap();
    assert!(matches!(m.load(2, None, &classes), Err(Error::Row { row: 1, .. })));
    let m = DatasetManifest::read(&manifest(dir.path(), "a.png,0,train\na2.png,cat,test\n")).unwrap();
    match m.load(2, None, &classes) {
        Err(Error::Row { row: 2, message, .. }) => assert!(message.contains("unknown label")),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        DatasetManifest::read(&manifest(dir.path(), "a.png,0,validation\n")),
        Err(Error::Row { row: 1, .. })
    ));
}

#[test]
fn splits_must_be_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    let err = DatasetManifest::read(&manifest(dir.path(), "a.png,0,train\nb.png,0,test\na.png,0,test\n")).unwrap_err();
    match err {
        Error::Row { row: 3, message, .. } => assert!(message.contains("row 1"), "{message}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn wrong_header_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    std::fs::write(&p, "file,label,split\na.png,0,train\n").unwrap();
    assert!(matches!(DatasetManifest::read(&p), Err(Error::Parse { .. })));
}

#[test]
fn class_names_resolve_by_name_or_index() {
    let classes = ClassMap::new(vec!["normal".into(), "benign".into(), "malignant".into()], 2).unwrap();
    assert_eq!(classes.resolve("benign"), Some(1));
    assert_eq!(classes.resolve("2"), Some(2));
    assert_eq!(classes.resolve("3"), None);
    assert!(ClassMap::new(vec!["a".into()], 1).is_err());
}

#[test]
fn png_write_then_read() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::new(&[1, 2, 3], vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
    let p = dir.path().join("sub/x.png");
    write_png(&p, &t).unwrap();
    let back = decode_gray(&std::fs::read(&p).unwrap()).unwrap();
    assert_eq!(back.shape(), &[1, 2, 3]);
    for (a, b) in t.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn idx_subset_relabels_digits() {
    let dir = tempfile::tempdir().unwrap();
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2];
    images.extend_from_slice(&[0, 255, 51, 102, 255, 0, 0, 204, 1, 2, 3, 4]);
    let labels = vec![0, 0, 8, 1, 0, 0, 0, 3, 7, 3, 9];
    std::fs::write(dir.path().join("img"), images).unwrap();
    std::fs::write(dir.path().join("lab"), labels).unwrap();
    let s = load_idx_subset(&dir.path().join("img"), &dir.path().join("lab"), &[3, 7], 2).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!((s[0].label, s[1].label), (1, 0));
    assert_eq!(s[1].image.data(), &[1.0, 0.0, 0.0, 0.8]);
    std::fs::write(dir.path().join("empty"), []).unwrap();
    assert!(matches!(
        load_idx_subset(&dir.path().join("empty"), &dir.path().join("lab"), &[3], 2),
        Err(Error::Parse { .. })
    ));
}
