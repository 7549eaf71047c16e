mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use common::{small_synthetic, write_and_load};
use cts::config::RunConfig;
use cts::data::{
    batch_indices, generate_synthetic_dataset, iterate_batches, load_dataset, read_image, Batch, ShapeFamily, Split,
    MANIFEST_FILE,
};
use cts::Error;
use cts_core::metrics::{dice, iou};
use proptest::prelude::*;

fn file_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn generation_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    for family in [ShapeFamily::Ellipse, ShapeFamily::SmoothBlob] {
        let cfg = cts::data::SyntheticConfig { shape_family: family, ..small_synthetic(3) };
        let (a, b) = (dir.path().join(format!("{family:?}a")), dir.path().join(format!("{family:?}b")));
        generate_synthetic_dataset(&cfg, &a).unwrap();
        generate_synthetic_dataset(&cfg, &b).unwrap();
        let (fa, fb) = (file_bytes(&a), file_bytes(&b));
        assert_eq!(fa.len(), 1 + 2 * (8 + 4 + 4));
        assert_eq!(fa, fb);
        let other = dir.path().join(format!("{family:?}c"));
        generate_synthetic_dataset(&cts::data::SyntheticConfig { seed: 4, ..cfg }, &other).unwrap();
        assert_ne!(fa, file_bytes(&other));
    }
}

#[test]
fn loaded_splits_match_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_and_load(&small_synthetic(1), dir.path());
    assert_eq!(data.split(Split::Train).len(), 8);
    assert_eq!(data.split(Split::Val).len(), 4);
    assert_eq!(data.split(Split::Test).len(), 4);
    assert_eq!(data.image_dims(), Some((16, 16)));
    for split in Split::ALL {
        for pair in data.split(split) {
            assert!(pair.id.starts_with(split.as_str()));
            assert!(pair.mask.as_slice().iter().all(|&v| v <= 1));
            assert!(pair.mask.as_slice().iter().any(|&v| v == 1), "{} has no foreground", pair.id);
            assert!(pair.image.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(dice(&pair.mask, &pair.mask).unwrap(), 1.0);
            assert_eq!(iou(&pair.mask, &pair.mask).unwrap(), 1.0);
        }
    }
    let raw = read_image(&dir.path().join("train/images/train_0000.png")).unwrap();
    assert_eq!(raw.dims(), (16, 16));
}

#[test]
fn non_binary_mask_is_reported_with_its_sample_id() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&small_synthetic(2), dir.path()).unwrap();
    let path = dir.path().join("val/masks/val_0002.png");
    image::GrayImage::from_pixel(16, 16, image::Luma([128])).save(&path).unwrap();
    match load_dataset(dir.path(), &RunConfig::default().preprocess) {
        Err(Error::Sample { id, reason }) => {
            assert_eq!(id, "val_0002");
            assert!(reason.contains("128"), "{reason}");
        }
        other => panic!("expected a sample error, got {other:?}"),
    }
}

#[test]
fn mismatched_sizes_and_broken_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&small_synthetic(5), dir.path()).unwrap();
    let pre = RunConfig::default().preprocess;
    image::GrayImage::new(8, 8).save(dir.path().join("test/masks/test_0001.png")).unwrap();
    assert!(matches!(load_dataset(dir.path(), &pre), Err(Error::Sample { id, .. }) if id == "test_0001"));

    let manifest = dir.path().join(MANIFEST_FILE);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    v["format_version"] = 7.into();
    fs::write(&manifest, v.to_string()).unwrap();
    assert!(matches!(load_dataset(dir.path(), &pre), Err(Error::Dataset { .. })));
    fs::remove_file(&manifest).unwrap();
    assert!(load_dataset(dir.path(), &pre).is_err());
}

#[test]
fn too_small_images_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cts::data::SyntheticConfig { image_size: 8, ..small_synthetic(0) };
    assert!(generate_synthetic_dataset(&cfg, dir.path()).is_err());
}

#[test]
fn batches_have_expected_shapes_and_codings() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_and_load(&small_synthetic(6), dir.path());
    let batches = iterate_batches(&data, Split::Train, 3, 0).unwrap();
    assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![3, 3, 2]);
    let b = &batches[0];
    assert_eq!(b.images.dims(), &[3, 1, 16, 16]);
    let enc: Vec<f32> = b.masks_encoded.flatten_all().unwrap().to_vec1().unwrap();
    let lab: Vec<f32> = b.masks.flatten_all().unwrap().to_vec1().unwrap();
    for (e, l) in enc.iter().zip(&lab) {
        assert_eq!(*e, 2.0 * l - 1.0);
    }
    let singles = iterate_batches(&data, Split::Val, 1, 9).unwrap();
    assert_eq!(singles.len(), 4);
    assert!(singles.iter().all(|b| b.images.dims() == [1, 1, 16, 16]));
    let again = iterate_batches(&data, Split::Val, 1, 9).unwrap();
    let ids = |bs: &[Batch]| bs.iter().flat_map(|b| b.ids.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&singles), ids(&again));
    assert!(iterate_batches(&data, Split::Val, 0, 9).is_err());
    assert!(Batch::from_pairs(&[]).is_err());
}

proptest! {
    #[test]
    fn epoch_batches_partition_the_split(len in 1usize..60, bs in 1usize..10, seed in any::<u64>()) {
        let groups = batch_indices(len, bs, seed).unwrap();
        prop_assert_eq!(groups.len(), len.div_ceil(bs));
        prop_assert!(groups.iter().all(|g| !g.is_empty() && g.len() <= bs));
        let mut all: Vec<usize> = groups.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        prop_assert_eq!(groups, batch_indices(len, bs, seed).unwrap());
    }
}
