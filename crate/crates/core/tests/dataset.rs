use stegflow_core::colorspace::{quantize_to_storage, RgbImage};
use stegflow_core::dataset::{ingest_dataset, is_validation, write_synthetic_pngs};

#[test]
fn ingests_folder_and_skips_junk() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_pngs(dir.path(), 9, 24, 3).unwrap();
    let gray = RgbImage::from_fn(40, 30, |x, _| {
        let v = x as f64 / 40.0;
        [v, v, v]
    });
    quantize_to_storage(&gray).write_png(dir.path().join("gray.png")).unwrap();
    std::fs::write(dir.path().join("broken.png"), b"\x89PNG truncated").unwrap();
    std::fs::write(dir.path().join("notes.txt"), b"hello").unwrap();

    let data = ingest_dataset(dir.path(), 16, 0.3).unwrap();
    assert_eq!(data.len(), 10);
    for s in data.train.iter().chain(&data.val) {
        assert_eq!((s.lab.width(), s.lab.height()), (16, 16));
        assert!(s.name == "gray.png" || s.name.starts_with("img_"), "{}", s.name);
        assert_eq!(is_validation(&s.name, 0.3), data.val.contains(s));
    }
    let gray = data.train.iter().chain(&data.val).find(|s| s.name.contains("gray")).unwrap();
    assert!(gray.lab.chroma().iter().all(|v| v.abs() < 1e-3));

    let again = ingest_dataset(dir.path(), 16, 0.3).unwrap();
    assert_eq!(again, data);
}

#[test]
fn empty_or_missing_folder_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ingest_dataset(dir.path(), 16, 0.1).is_err());
    assert!(ingest_dataset(dir.path().join("nope"), 16, 0.1).is_err());
}
