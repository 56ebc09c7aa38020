use ndarray::{Array2, Array3};
use proptest::prelude::*;

use seg_cyclegan_core::dataset::*;
use seg_cyclegan_core::CoreError;

fn gradient_sample(h: usize, w: usize) -> ImageSample {
    ImageSample::new(
        Array3::from_shape_fn((3, h, w), |(c, r, cc)| ((c * 37 + r * 3 + cc * 7) % 256) as f32),
        RangeTag::Uint8,
        "test",
    )
}

fn empty_mask(h: usize, w: usize) -> SegMask {
    SegMask::binary(Array2::zeros((h, w)), "ship")
}

// --- crop_tiles -----------------------------------------------------------

#[test]
fn tiling_800_gives_16_tiles_with_expected_origins() {
    let img = gradient_sample(800, 800);
    let tiles = crop_tiles(&img, None, 256, 205).unwrap();
    assert_eq!(tiles.len(), 16);
    let origins: Vec<usize> = tile_origins(800, 256, 205);
    assert_eq!(origins, vec![0, 205, 410, 544]);
    for (tile, _) in &tiles {
        assert_eq!(tile.pixels.dim(), (3, 256, 256));
    }
}

#[test]
fn tiling_window_sized_image_gives_single_tile() {
    let img = gradient_sample(256, 256);
    let tiles = crop_tiles(&img, None, 256, 205).unwrap();
    assert_eq!(tiles.len(), 1);
    assert_eq!(tiles[0].0.tile_origin, (0, 0));
}

#[test]
fn tiling_461_deduplicates_clamped_origin() {
    let img = gradient_sample(461, 461);
    let tiles = crop_tiles(&img, None, 256, 205).unwrap();
    assert_eq!(tiles.len(), 4);
    assert_eq!(tile_origins(461, 256, 205), vec![0, 205]);
}

#[test]
fn tiling_rejects_small_images() {
    let img = gradient_sample(100, 300);
    assert!(matches!(
        crop_tiles(&img, None, 256, 205),
        Err(CoreError::RejectedInput(_))
    ));
}

#[test]
fn tiles_crop_masks_at_identical_origins() {
    let img = gradient_sample(461, 461);
    let mut mask = empty_mask(461, 461);
    mask.labels[[300, 120]] = 1;
    let tiles = crop_tiles(&img, Some(&mask), 256, 205).unwrap();
    for (tile, tmask) in &tiles {
        let tmask = tmask.as_ref().unwrap();
        let (r0, c0) = tile.tile_origin;
        let expected = (300 >= r0 && 300 < r0 + 256 && 120 >= c0 && 120 < c0 + 256) as usize;
        assert_eq!(tmask.target_pixel_count(), expected);
    }
}

proptest! {
    // Tiling count formula and full coverage over all dims in [256, 1024].
    #[test]
    fn tiling_count_and_coverage(dim in 256usize..=1024) {
        let origins = tile_origins(dim, 256, 205);
        // Brute-force count: stride origins plus clamped final if off-grid.
        let stride: Vec<usize> = (0..).map(|k| k * 205).take_while(|&o| o + 256 <= dim).collect();
        let expected = stride.len() + usize::from(stride.last() != Some(&(dim - 256)));
        prop_assert_eq!(origins.len(), expected);
        // Pixel-coverage bitmap.
        let mut covered = vec![false; dim];
        for &o in &origins {
            for i in o..o + 256 {
                covered[i] = true;
            }
        }
        prop_assert!(covered.iter().all(|&c| c));
    }
}

// --- filter_min_target_pixels ---------------------------------------------

#[test]
fn filter_boundary_is_keep_at_95() {
    let img = gradient_sample(64, 64);
    for (count, keep) in [(95usize, true), (94, false), (0, false)] {
        let mut mask = empty_mask(64, 64);
        for i in 0..count {
            mask.labels[[i / 64, i % 64]] = 1;
        }
        // Brute-force pixel scan confirms the constructed count.
        assert_eq!(mask.labels.iter().filter(|&&v| v == 1).count(), count);
        assert_eq!(filter_min_target_pixels(&img, &mask, 95).unwrap(), keep);
    }
}

#[test]
fn filter_rejects_misaligned_mask() {
    let img = gradient_sample(64, 64);
    let mask = empty_mask(32, 32);
    assert!(matches!(
        filter_min_target_pixels(&img, &mask, 95),
        Err(CoreError::Shape(_))
    ));
}

// --- augment_rotations ----------------------------------------------------

#[test]
fn nine_angles_give_ten_pairs() {
    let img = gradient_sample(32, 32);
    let mask = empty_mask(32, 32);
    let out = augment_rotations(&img, &mask, &DEFAULT_ROTATION_ANGLES).unwrap();
    assert_eq!(out.len(), 10);
    assert_eq!(out[0].0.rotation_deg, 0);
    for (i, angle) in DEFAULT_ROTATION_ANGLES.iter().enumerate() {
        assert_eq!(out[i + 1].0.rotation_deg, *angle);
    }
    // Mask label set stays closed under rotation.
    for (_, m) in &out {
        assert!(m.labels.iter().all(|&v| v <= 1));
    }
}

#[test]
fn rotation_90_maps_corner_pixel_exactly() {
    let n = 17usize;
    let img = gradient_sample(n, n);
    let mut mask = empty_mask(n, n);
    mask.labels[[0, 0]] = 1;
    let out = augment_rotations(&img, &mask, &[90]).unwrap();
    let rotated = &out[1].1;
    assert_eq!(rotated.target_pixel_count(), 1, "count preserved");
    // Brute-force coordinate map for the implementation's convention:
    // output (r, c) samples input (-(c - cx) + cy, (r - cy) + cx), so the
    // input pixel (0, 0) lands at output (0, n-1).
    assert_eq!(rotated.labels[[0, n - 1]], 1);
}

#[test]
fn rotation_rejects_non_square_input() {
    let img = gradient_sample(32, 64);
    let mask = empty_mask(32, 64);
    assert!(matches!(
        augment_rotations(&img, &mask, &[90]),
        Err(CoreError::RejectedInput(_))
    ));
}

#[test]
fn rotation_rejects_out_of_range_angles() {
    let img = gradient_sample(32, 32);
    let mask = empty_mask(32, 32);
    assert!(augment_rotations(&img, &mask, &[0]).is_err());
    assert!(augment_rotations(&img, &mask, &[360]).is_err());
}

// --- normalize ------------------------------------------------------------

#[test]
fn normalize_endpoints_and_midpoint() {
    let mut img = gradient_sample(4, 4);
    img.pixels[[0, 0, 0]] = 0.0;
    img.pixels[[0, 0, 1]] = 255.0;
    img.pixels[[0, 0, 2]] = 127.5;
    let n = normalize(&img).unwrap();
    assert_eq!(n.range_tag, RangeTag::NormalizedMinus1To1);
    assert_eq!(n.pixels[[0, 0, 0]], -1.0);
    assert_eq!(n.pixels[[0, 0, 1]], 1.0);
    assert_eq!(n.pixels[[0, 0, 2]], 0.0);
}

#[test]
fn normalize_twice_is_an_error() {
    let img = gradient_sample(4, 4);
    let n = normalize(&img).unwrap();
    assert!(matches!(normalize(&n), Err(CoreError::Contract(_))));
}

proptest! {
    // normalize then denormalize recovers the input within one 8-bit step.
    #[test]
    fn normalize_denormalize_round_trip(v in 0u8..=255) {
        let mut img = gradient_sample(4, 4);
        img.pixels.fill(v as f32);
        let back = denormalize(&normalize(&img).unwrap()).unwrap();
        prop_assert!((back.pixels[[0, 0, 0]] - v as f32).abs() <= 1.0);
    }
}

// --- manifests ------------------------------------------------------------

fn write_png_dataset(root: &std::path::Path, n: usize, with_masks: bool) {
    for (dir, mask_dir) in [("sar", "sar_masks"), ("opt", "opt_masks")] {
        std::fs::create_dir_all(root.join(dir)).unwrap();
        if with_masks {
            std::fs::create_dir_all(root.join(mask_dir)).unwrap();
        }
        for i in 0..n {
            let img = gradient_sample(32, 32);
            save_image(&img, &root.join(dir).join(format!("{i:03}.png"))).unwrap();
            if with_masks {
                let mut mask = empty_mask(32, 32);
                mask.labels[[i % 32, i % 32]] = 1;
                save_mask(&mask, &root.join(mask_dir).join(format!("{i:03}.png"))).unwrap();
            }
        }
    }
}

#[test]
fn manifest_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write_png_dataset(dir.path(), 6, false);
    let spec = SplitSpec::default();
    let a = build_manifest(dir.path(), &spec, 7).unwrap();
    let b = build_manifest(dir.path(), &spec, 7).unwrap();
    assert_eq!(a.to_string_lossless(), b.to_string_lossless());
}

#[test]
fn unpaired_mode_breaks_pairing_order() {
    let dir = tempfile::tempdir().unwrap();
    write_png_dataset(dir.path(), 12, false);
    let spec = SplitSpec {
        train_fraction: 1.0,
        unpaired: true,
        masks_required: vec![],
    };
    let m = build_manifest(dir.path(), &spec, 3).unwrap();
    let sar_names: Vec<_> = m
        .entries_for(Domain::Sar, Split::Train)
        .iter()
        .map(|e| e.image_path.file_name().unwrap().to_owned())
        .collect();
    let opt_names: Vec<_> = m
        .entries_for(Domain::Opt, Split::Train)
        .iter()
        .map(|e| e.image_path.file_name().unwrap().to_owned())
        .collect();
    assert_eq!(sar_names.len(), 12);
    // Same file set on both sides of this paired fixture...
    let mut s = sar_names.clone();
    let mut o = opt_names.clone();
    s.sort();
    o.sort();
    assert_eq!(s, o);
    // ...but not in the same order.
    assert_ne!(sar_names, opt_names);
}

#[test]
fn empty_root_is_a_manifest_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        build_manifest(dir.path(), &SplitSpec::default(), 1),
        Err(CoreError::Manifest { .. })
    ));
}

#[test]
fn missing_required_mask_lists_offending_paths() {
    let dir = tempfile::tempdir().unwrap();
    write_png_dataset(dir.path(), 3, false);
    let spec = SplitSpec {
        masks_required: vec![Domain::Sar],
        ..Default::default()
    };
    let err = build_manifest(dir.path(), &spec, 1).unwrap_err();
    match err {
        CoreError::Manifest { details } => {
            assert!(details.contains("sar_masks"));
            assert!(details.contains("000.png"));
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn manifest_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write_png_dataset(dir.path(), 4, true);
    let m = build_manifest(dir.path(), &SplitSpec::default(), 9).unwrap();
    let path = dir.path().join("manifest.tsv");
    m.save(&path).unwrap();
    let loaded = DatasetManifest::load(&path).unwrap();
    assert_eq!(m, loaded);
}

#[test]
fn image_and_mask_png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = gradient_sample(32, 32);
    let ipath = dir.path().join("img.png");
    save_image(&img, &ipath).unwrap();
    let back = load_image(&ipath).unwrap();
    assert_eq!(back.pixels, img.pixels);

    let mut mask = empty_mask(32, 32);
    mask.labels[[5, 6]] = 1;
    let mpath = dir.path().join("mask.png");
    save_mask(&mask, &mpath).unwrap();
    let mback = load_mask(&mpath).unwrap();
    assert_eq!(mback.labels, mask.labels);
}

#[test]
fn mask_loader_rejects_non_binary_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.png");
    let img = image::GrayImage::from_pixel(4, 4, image::Luma([255u8]));
    img.save(&path).unwrap();
    assert!(load_mask(&path).is_err());
}
