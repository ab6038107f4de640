use std::path::Path;

use proptest::prelude::*;
use ssmnet::datasets::*;
use ssmnet::{Error, ImageError};

fn write_tiny(path: &Path, value: u8) {
    let mut bytes = b"P6\n2 2\n255\n".to_vec();
    bytes.extend([value; 12]);
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn table_of_category_counts_scans_to_seven_hundred() {
    let counts = [90, 80, 46, 93, 84, 57, 66, 38, 59, 45, 42];
    let dir = tempfile::tempdir().unwrap();
    for (c, &n) in counts.iter().enumerate() {
        let class = dir.path().join(format!("category_{c:02}"));
        std::fs::create_dir(&class).unwrap();
        for i in 0..n {
            write_tiny(&class.join(format!("{i:03}.ppm")), (i % 256) as u8);
        }
    }
    let m = scan_dataset(dir.path(), 4).unwrap();
    assert_eq!(m.num_classes(), 11);
    assert_eq!(m.len(), 700);
    for (c, &n) in counts.iter().enumerate() {
        assert_eq!(m.records_of_class(c).len(), n);
    }
    assert_eq!(m, scan_dataset(dir.path(), 4).unwrap());
}

#[test]
fn single_image_and_duplicate_names() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("only")).unwrap();
    write_tiny(&dir.path().join("only/a.ppm"), 0);
    let m = scan_dataset(dir.path(), 2).unwrap();
    assert_eq!((m.num_classes(), m.len()), (1, 1));

    for c in ["x", "y"] {
        std::fs::create_dir(dir.path().join(c)).unwrap();
        write_tiny(&dir.path().join(c).join("same.ppm"), 7);
    }
    let m = scan_dataset(dir.path(), 2).unwrap();
    assert_eq!(m.classes, vec!["only", "x", "y"]);
    assert_ne!(m.records[1].path, m.records[2].path);
}

#[test]
fn skip_report_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(scan_dataset(dir.path(), 2), Err(Error::Data(_))));
    assert!(matches!(scan_dataset(&dir.path().join("missing"), 2), Err(Error::Data(_))));

    std::fs::create_dir(dir.path().join("good")).unwrap();
    write_tiny(&dir.path().join("good/1.ppm"), 3);
    std::fs::write(dir.path().join("good/broken.ppm"), b"P6\n2 2\n255\n\x00").unwrap();
    std::fs::write(dir.path().join("good/notes.txt"), b"hello").unwrap();
    let m = scan_dataset(dir.path(), 2).unwrap();
    assert_eq!(m.len(), 1);
    assert_eq!(m.skipped.len(), 2);

    std::fs::create_dir(dir.path().join("empty_class")).unwrap();
    std::fs::write(dir.path().join("empty_class/bad.ppm"), b"junk").unwrap();
    let err = scan_dataset(dir.path(), 2).unwrap_err();
    assert!(err.to_string().contains("empty_class"), "{err}");
}

#[test]
fn load_image_reports_distinct_failures() {
    let dir = tempfile::tempdir().unwrap();
    let header = dir.path().join("h.ppm");
    std::fs::write(&header, b"P6\nxx\n").unwrap();
    let truncated = dir.path().join("t.ppm");
    std::fs::write(&truncated, b"P6\n2 2\n255\n\x00\x00").unwrap();
    match load_image(&header, 4) {
        Err(Error::Image {
            source: ImageError::MalformedHeader(_),
            ..
        }) => {}
        other => panic!("{other:?}"),
    }
    match load_image(&truncated, 4) {
        Err(Error::Image {
            source: ImageError::TruncatedPayload { .. },
            ..
        }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn loaded_pixels_are_in_unit_range_and_augmented_variants_differ() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_dataset(dir.path(), 3, 4, 16, 1).unwrap();
    let m = split_classes(&m, 2, 0, 1, 0).unwrap().with_augmented_copies(2).unwrap();
    assert_eq!(m.len(), 12 + 8);
    let px = load_pixels(&m, &AugmentOp::defaults(), 5).unwrap();
    assert_eq!(px.len(), m.len());
    for p in &px {
        assert_eq!(p.shape(), &[3, 16, 16]);
        assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let (orig, var) = (
        m.records.iter().position(|r| r.variant == 0 && m.split.base.contains(&r.class_id)).unwrap(),
        m.records.iter().position(|r| r.variant == 1).unwrap(),
    );
    assert_eq!(m.records[orig].path, m.records[var].path);
    assert_ne!(px[orig], px[var]);
    assert_eq!(px, load_pixels(&m, &AugmentOp::defaults(), 5).unwrap());
}

/// Nearest class centroid in raw pixel space, fitted on the first 20 images of
/// each class and scored on the remaining 10.
#[test]
fn synthetic_classes_are_separable_by_nearest_centroid() {
    let images = synth_images(20, 30, 32, 2024).unwrap();
    let dim = 3 * 32 * 32;
    let centroids: Vec<Vec<f64>> = images
        .iter()
        .map(|imgs| {
            let mut c = vec![0.0; dim];
            for img in &imgs[..20] {
                for (a, &v) in c.iter_mut().zip(img.data()) {
                    *a += v as f64 / 20.0;
                }
            }
            c
        })
        .collect();
    let mut correct = 0;
    let mut total = 0;
    for (label, imgs) in images.iter().enumerate() {
        for img in &imgs[20..] {
            let mut best = (f64::INFINITY, usize::MAX);
            for (k, c) in centroids.iter().enumerate() {
                let d: f64 = c.iter().zip(img.data()).map(|(a, &v)| (a - v as f64).powi(2)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            correct += usize::from(best.1 == label);
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.8, "nearest-centroid accuracy {acc}");
}

fn manifest_with(classes: usize) -> DatasetManifest {
    let names: Vec<String> = (0..classes).map(|c| format!("k{c}")).collect();
    let records = (0..classes)
        .map(|c| ImageRecord {
            path: format!("{c}.ppm").into(),
            class_name: names[c].clone(),
            class_id: c,
            variant: 0,
        })
        .collect();
    let split = ClassSplit {
        base: (0..classes).collect(),
        ..Default::default()
    };
    DatasetManifest::new(records, names, split, 8, vec![]).unwrap()
}

proptest! {
    #[test]
    fn splits_are_disjoint(classes in 1usize..60, seed in any::<u64>(), a in 0usize..60, b in 0usize..60, c in 0usize..60) {
        let m = manifest_with(classes);
        match split_classes(&m, a, b, c, seed) {
            Ok(s) => {
                prop_assert!(a + b + c <= classes);
                prop_assert!(s.split.is_disjoint());
                prop_assert_eq!((s.split.base.len(), s.split.validation.len(), s.split.test.len()), (a, b, c));
            }
            Err(_) => prop_assert!(a + b + c > classes),
        }
    }
}
