//! End-to-end checks for the data pipeline and the training objective:
//! thresholding/thinning oracles, degradation invariants, dataset
//! loading, and closed-form loss identities.

use std::path::Path;

use ndarray::{Array3, Array4};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use obiformer_core::data::{
    apply_transform, assign_splits, binarize, generate_glyph, load_dataset, luminance,
    mask_to_planes, otsu_cut, planes_to_mask, quantize_to_u8_grid, read_gray, read_rgb,
    resize_bilinear, skeleton_from_clean, skeletonize, split_pair, stack_batch, synthesize_noise,
    synthetic_dataset, write_png, DatasetManifest, Layout, NoiseKind, NoiseSpec, Side, Split,
    Transform,
};
use obiformer_core::loss::{
    perceptual_loss, psnr_loss, total_loss, FeatureExtractor, FeatureTap, LossWeights, CACHE_ENV,
    WEIGHTS_FILE,
};
use obiformer_core::model::ImageBatch;
use obiformer_core::Error;

fn rand_planes(c: usize, h: usize, w: usize, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((c, h, w), |_| rng.gen::<f32>())
}

fn rand_batch(b: usize, c: usize, h: usize, w: usize, seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBatch::new(Array4::from_shape_fn((b, c, h, w), |_| rng.gen::<f32>()))
}

// ----------------------------------------------------------------------
// Thresholding
// ----------------------------------------------------------------------

/// Independent brute-force reference: evaluate the between-class
/// variance of every cut and keep the first maximiser.
fn brute_force_otsu(hist: &[u64; 256]) -> Option<usize> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for t in 0..255usize {
        let w0: u64 = hist[..=t].iter().sum();
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = hist[..=t]
            .iter()
            .enumerate()
            .map(|(i, &n)| i as f64 * n as f64)
            .sum::<f64>()
            / w0 as f64;
        let m1 = hist[t + 1..]
            .iter()
            .enumerate()
            .map(|(i, &n)| (t + 1 + i) as f64 * n as f64)
            .sum::<f64>()
            / w1 as f64;
        let score =
            (w0 as f64 / total as f64) * (w1 as f64 / total as f64) * (m0 - m1) * (m0 - m1);
        if best.map_or(true, |(_, b)| score > b) {
            best = Some((t, score));
        }
    }
    best.map(|(t, _)| t)
}

#[test]
fn threshold_search_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..40 {
        let mut hist = [0u64; 256];
        // Mix dense, sparse, and spiky histograms.
        let fill = rng.gen_range(2..40);
        for _ in 0..fill {
            let bin = rng.gen_range(0..256);
            hist[bin] += rng.gen_range(1..500);
        }
        assert_eq!(
            otsu_cut(&hist),
            brute_force_otsu(&hist),
            "trial {trial} disagreed with brute force"
        );
    }
    // Degenerate: one occupied bin has no valid split.
    let mut hist = [0u64; 256];
    hist[97] = 1234;
    assert_eq!(otsu_cut(&hist), None);
    assert_eq!(otsu_cut(&[0u64; 256]), None);
}

#[test]
fn foreground_is_the_minority_class_in_either_polarity() {
    // Bright strokes on a dark ground...
    let mut bright = Array3::from_elem((3, 24, 24), 0.1f32);
    for x in 4..20 {
        for c in 0..3 {
            bright[(c, 12, x)] = 0.9;
            bright[(c, x, 7)] = 0.9;
        }
    }
    let mask_bright = binarize(&bright).unwrap();
    // ...and the photographic negative select the same pixels.
    let dark = bright.mapv(|v| 1.0 - v);
    let mask_dark = binarize(&dark).unwrap();
    assert_eq!(mask_bright, mask_dark);
    let fg = mask_bright.iter().filter(|&&b| b).count();
    assert!(fg > 0, "strokes must be detected");
    assert!(
        fg * 2 <= mask_bright.len(),
        "foreground may not exceed half the pixels"
    );
    for y in 0..24 {
        for x in 0..24 {
            let is_stroke = bright[(0, y, x)] > 0.5;
            assert_eq!(mask_bright[(y, x)], is_stroke, "pixel ({y},{x})");
        }
    }
}

#[test]
fn constant_images_have_no_foreground() {
    let flat = Array3::from_elem((1, 9, 9), 0.5f32);
    let mask = binarize(&flat).unwrap();
    assert!(mask.iter().all(|&b| !b));
}

#[test]
fn luminance_uses_broadcast_weights() {
    let mut planes = Array3::<f32>::zeros((3, 1, 1));
    planes[(0, 0, 0)] = 1.0;
    assert!((luminance(&planes).unwrap()[(0, 0)] - 0.299).abs() < 1e-6);
    let gray = Array3::from_elem((1, 2, 2), 0.25f32);
    assert_eq!(luminance(&gray).unwrap()[(1, 1)], 0.25);
}

// ----------------------------------------------------------------------
// Thinning
// ----------------------------------------------------------------------

fn mask_from_str(rows: &[&str]) -> ndarray::Array2<bool> {
    let h = rows.len();
    let w = rows[0].len();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| rows[y].as_bytes()[x] == b'#')
}

#[test]
fn thinning_reduces_a_solid_square_to_its_center() {
    let mask = mask_from_str(&[".....", ".###.", ".###.", ".###.", "....."]);
    let thin = skeletonize(&mask);
    let on: Vec<(usize, usize)> = thin
        .indexed_iter()
        .filter_map(|(p, &b)| b.then_some(p))
        .collect();
    assert_eq!(on, vec![(2, 2)]);
}

#[test]
fn single_pixel_strokes_are_fixed_points() {
    let line_h = mask_from_str(&[".....", "#####", "....."]);
    assert_eq!(skeletonize(&line_h), line_h);
    let line_v = mask_from_str(&["..#..", "..#..", "..#..", "..#.."]);
    assert_eq!(skeletonize(&line_v), line_v);
    let diag = mask_from_str(&["#....", ".#...", "..#..", "...#.", "....#"]);
    assert_eq!(skeletonize(&diag), diag);
}

#[test]
fn thinning_is_idempotent_and_shrinking_on_a_glyph_corpus() {
    for i in 0..50u64 {
        let glyph = generate_glyph(48, 48, 900 + i);
        let mask = binarize(&glyph).unwrap();
        let thin = skeletonize(&mask);
        for (pos, &b) in thin.indexed_iter() {
            assert!(
                !b || mask[pos],
                "glyph {i}: skeleton pixel {pos:?} outside the stroke mask"
            );
        }
        assert_eq!(skeletonize(&thin), thin, "glyph {i}: thinning not idempotent");
    }
}

#[test]
fn mask_plane_round_trip() {
    let mask = mask_from_str(&["#..", ".#.", "..#"]);
    let planes = mask_to_planes(&mask);
    assert_eq!(planes.dim(), (1, 3, 3));
    assert_eq!(planes[(0, 0, 0)], 1.0);
    assert_eq!(planes[(0, 0, 1)], 0.0);
    assert_eq!(planes_to_mask(&planes), mask);
}

// ----------------------------------------------------------------------
// Degradation synthesis
// ----------------------------------------------------------------------

const ALL_KINDS: [NoiseKind; 5] = [
    NoiseKind::StrokeBroken,
    NoiseKind::BoneCracked,
    NoiseKind::AbnormalEdges,
    NoiseKind::DenseWhite,
    NoiseKind::Mixed,
];

#[test]
fn noise_only_whitens_and_leaves_unmasked_pixels_exact() {
    let clean = generate_glyph(48, 48, 77);
    for kind in ALL_KINDS {
        let spec = NoiseSpec::new(kind, 0.7, 99);
        let noisy = synthesize_noise(&clean, &spec).unwrap();
        let mut touched = 0usize;
        for (pos, &v) in noisy.indexed_iter() {
            let base = clean[pos];
            assert!(
                v >= base,
                "{}: pixel {pos:?} darkened from {base} to {v}",
                kind.label()
            );
            assert!(v <= 1.0 + 1e-6, "{}: pixel {pos:?} overshot: {v}", kind.label());
            if v != base {
                touched += 1;
            }
        }
        assert!(
            touched > 0,
            "{}: intensity 0.7 must visibly degrade the image",
            kind.label()
        );
    }
}

#[test]
fn noise_is_reproducible_and_seed_sensitive() {
    let clean = generate_glyph(40, 40, 3);
    for kind in ALL_KINDS {
        let a = synthesize_noise(&clean, &NoiseSpec::new(kind, 0.5, 42)).unwrap();
        let b = synthesize_noise(&clean, &NoiseSpec::new(kind, 0.5, 42)).unwrap();
        assert_eq!(a, b, "{}: same spec must reproduce bit-exactly", kind.label());
        let c = synthesize_noise(&clean, &NoiseSpec::new(kind, 0.5, 43)).unwrap();
        assert_ne!(a, c, "{}: a different seed must change the output", kind.label());
    }
}

#[test]
fn zero_intensity_is_the_identity() {
    let clean = generate_glyph(32, 32, 8);
    for kind in ALL_KINDS {
        let out = synthesize_noise(&clean, &NoiseSpec::new(kind, 0.0, 5)).unwrap();
        assert_eq!(out, clean, "{}", kind.label());
    }
}

#[test]
fn noise_rejects_invalid_requests() {
    let clean = generate_glyph(16, 16, 1);
    let over = synthesize_noise(&clean, &NoiseSpec::new(NoiseKind::Mixed, 1.5, 0));
    assert!(matches!(over, Err(Error::Config(_))));
    let nan = synthesize_noise(&clean, &NoiseSpec::new(NoiseKind::Mixed, f32::NAN, 0));
    assert!(matches!(nan, Err(Error::Config(_))));
    let mut out_of_range = clean.clone();
    out_of_range[(0, 0, 0)] = 1.5;
    let bad = synthesize_noise(&out_of_range, &NoiseSpec::new(NoiseKind::DenseWhite, 0.5, 0));
    assert!(matches!(bad, Err(Error::Input(_))));
    assert!(matches!(NoiseKind::parse("sparkles"), Err(Error::Config(_))));
    for kind in ALL_KINDS {
        assert_eq!(NoiseKind::parse(kind.label()).unwrap(), kind);
    }
}

#[test]
fn stroke_breaking_noise_concentrates_on_strokes() {
    let clean = generate_glyph(48, 48, 21);
    let spec = NoiseSpec::new(NoiseKind::StrokeBroken, 0.8, 7);
    let noisy = synthesize_noise(&clean, &spec).unwrap();
    // Every altered pixel must be near the glyph's strokes: within a
    // small dilation of the stroke mask (blob radius + dilation step).
    let mask = binarize(&clean).unwrap();
    let (h, w) = mask.dim();
    let near_stroke = |y: usize, x: usize| -> bool {
        let r = 6i64;
        for dy in -r..=r {
            for dx in -r..=r {
                let ny = y as i64 + dy;
                let nx = x as i64 + dx;
                if ny >= 0
                    && nx >= 0
                    && ny < h as i64
                    && nx < w as i64
                    && mask[(ny as usize, nx as usize)]
                {
                    return true;
                }
            }
        }
        false
    };
    for ((ch, y, x), &n) in noisy.indexed_iter() {
        if n != clean[(ch, y, x)] {
            assert!(
                near_stroke(y, x),
                "blob pixel ({y},{x}) is far from every stroke"
            );
        }
    }
}

#[test]
fn border_noise_hugs_the_borders() {
    let clean = Array3::from_elem((3, 40, 40), 0.2f32);
    let spec = NoiseSpec::new(NoiseKind::AbnormalEdges, 0.6, 13);
    let noisy = synthesize_noise(&clean, &spec).unwrap();
    let margin = 10usize;
    let mut changed_any = false;
    for ((ch, y, x), &n) in noisy.indexed_iter() {
        if n != clean[(ch, y, x)] {
            changed_any = true;
            let d = y.min(x).min(39 - y).min(39 - x);
            assert!(d < margin, "border pixel ({y},{x}) too deep inside: {d}");
        }
    }
    assert!(changed_any);
}

#[test]
fn crack_noise_crosses_the_interior() {
    let clean = Array3::from_elem((3, 48, 48), 0.3f32);
    let spec = NoiseSpec::new(NoiseKind::BoneCracked, 0.5, 31);
    let noisy = synthesize_noise(&clean, &spec).unwrap();
    // A crack is a connected band spanning one axis: every row or every
    // column should be touched, depending on orientation.
    let mut rows_touched = vec![false; 48];
    let mut cols_touched = vec![false; 48];
    for ((ch, y, x), &n) in noisy.indexed_iter() {
        if n != clean[(ch, y, x)] {
            rows_touched[y] = true;
            cols_touched[x] = true;
        }
    }
    assert!(
        rows_touched.iter().all(|&b| b) || cols_touched.iter().all(|&b| b),
        "a crack must span the image"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn noise_never_darkens(seed in 0u64..1000, kind_idx in 0usize..5, intensity in 0.0f32..=1.0) {
        let clean = generate_glyph(24, 24, seed);
        let spec = NoiseSpec::new(ALL_KINDS[kind_idx], intensity, seed.wrapping_add(17));
        let noisy = synthesize_noise(&clean, &spec).unwrap();
        for (pos, &v) in noisy.indexed_iter() {
            prop_assert!(v >= clean[pos]);
            prop_assert!(v <= 1.0 + 1e-6);
        }
    }
}

// ----------------------------------------------------------------------
// Augmentation
// ----------------------------------------------------------------------

#[test]
fn transforms_compose_back_to_the_identity() {
    let planes = rand_planes(3, 5, 8, 404);
    for t in Transform::ALL {
        let forward = apply_transform(&planes, t);
        let back = apply_transform(&forward, t.inverse());
        assert_eq!(back, planes, "{t:?} then its inverse must be the identity");
    }
    // Four quarter turns are the identity.
    let mut acc = planes.clone();
    for _ in 0..4 {
        acc = apply_transform(&acc, Transform::Rot90);
    }
    assert_eq!(acc, planes);
    // Two quarter turns equal the half turn.
    let twice = apply_transform(&apply_transform(&planes, Transform::Rot90), Transform::Rot90);
    assert_eq!(twice, apply_transform(&planes, Transform::Rot180));
}

#[test]
fn quarter_turns_move_pixels_where_expected() {
    let mut planes = Array3::<f32>::zeros((1, 3, 4));
    planes[(0, 0, 0)] = 1.0; // top-left corner
    let cw = apply_transform(&planes, Transform::Rot90);
    assert_eq!(cw.dim(), (1, 4, 3));
    assert_eq!(cw[(0, 0, 2)], 1.0, "clockwise sends top-left to top-right");
    let ccw = apply_transform(&planes, Transform::Rot270);
    assert_eq!(ccw.dim(), (1, 4, 3));
    assert_eq!(ccw[(0, 3, 0)], 1.0, "counter-clockwise sends top-left to bottom-left");
}

#[test]
fn sampled_transforms_are_deterministic_and_cover_all_cases() {
    let mut seen = std::collections::HashSet::new();
    for seed in 0..200u64 {
        let t = Transform::sample(seed);
        assert_eq!(t, Transform::sample(seed));
        seen.insert(format!("{t:?}"));
    }
    assert_eq!(seen.len(), Transform::ALL.len(), "all six transforms should appear");
}

#[test]
fn triplets_transform_rigidly_together() {
    let noisy = rand_planes(3, 6, 4, 1);
    let clean = rand_planes(3, 6, 4, 2);
    let skel = rand_planes(1, 6, 4, 3).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let t = Transform::sample(9);
    let (tn, tc, ts) = (
        apply_transform(&noisy, t),
        apply_transform(&clean, t),
        apply_transform(&skel, t),
    );
    assert_eq!(tn.dim().0, 3);
    assert_eq!(ts.dim().0, 1);
    assert_eq!(apply_transform(&tn, t.inverse()), noisy);
    assert_eq!(apply_transform(&tc, t.inverse()), clean);
    assert_eq!(apply_transform(&ts, t.inverse()), skel);
}

// ----------------------------------------------------------------------
// Splits, pairs, and loading
// ----------------------------------------------------------------------

#[test]
fn split_assignment_hits_rounded_fractions_deterministically() {
    let ids: Vec<String> = (0..10).map(|i| format!("id{i:02}")).collect();
    let splits = assign_splits(&ids, 0.7, 0.0, 5);
    let count = |s: Split| splits.iter().filter(|(_, sp)| *sp == s).count();
    assert_eq!(count(Split::Train), 7);
    assert_eq!(count(Split::Val), 0);
    assert_eq!(count(Split::Test), 3);
    assert_eq!(splits, assign_splits(&ids, 0.7, 0.0, 5), "same seed, same split");
    let other = assign_splits(&ids, 0.7, 0.0, 6);
    assert_ne!(splits, other, "different seeds should shuffle differently");
    // Order of returned ids matches the input order.
    for (given, (got, _)) in ids.iter().zip(&splits) {
        assert_eq!(given, got);
    }
    // Validation split carves out of the middle.
    let three_way = assign_splits(&ids, 0.5, 0.2, 5);
    let count3 = |s: Split| three_way.iter().filter(|(_, sp)| *sp == s).count();
    assert_eq!(count3(Split::Train), 5);
    assert_eq!(count3(Split::Val), 2);
    assert_eq!(count3(Split::Test), 3);
}

#[test]
fn pair_splitting_round_trips_and_rejects_odd_widths() {
    let paired = rand_planes(3, 5, 8, 66);
    let (left, right) = split_pair(&paired).unwrap();
    assert_eq!(left.dim(), (3, 5, 4));
    assert_eq!(right.dim(), (3, 5, 4));
    let rejoined = ndarray::concatenate(ndarray::Axis(2), &[left.view(), right.view()]).unwrap();
    assert_eq!(rejoined, paired);
    let odd = rand_planes(3, 5, 7, 67);
    assert!(matches!(split_pair(&odd), Err(Error::Input(_))));
}

#[test]
fn png_round_trip_preserves_quantized_values() {
    let dir = tempfile::tempdir().unwrap();
    let rgb = quantize_to_u8_grid(&rand_planes(3, 9, 7, 12));
    let rgb_path = dir.path().join("rgb.png");
    write_png(&rgb_path, &rgb).unwrap();
    assert_eq!(read_rgb(&rgb_path).unwrap(), rgb);
    let gray = quantize_to_u8_grid(&rand_planes(1, 6, 11, 13));
    let gray_path = dir.path().join("gray.png");
    write_png(&gray_path, &gray).unwrap();
    assert_eq!(read_gray(&gray_path).unwrap(), gray);
    // Reading a missing file is an ingest error naming the path.
    let missing = dir.path().join("absent.png");
    let err = read_rgb(&missing).unwrap_err();
    assert!(err.to_string().contains("absent.png"), "{err}");
}

#[test]
fn resize_preserves_constants_and_changes_shape() {
    let flat = Array3::from_elem((3, 17, 9), 0.42f32);
    let resized = resize_bilinear(&flat, 8, 20).unwrap();
    assert_eq!(resized.dim(), (3, 8, 20));
    for &v in resized.iter() {
        assert!((v - 0.42).abs() < 1e-5, "constant images stay constant, got {v}");
    }
    let same = resize_bilinear(&flat, 17, 9).unwrap();
    assert_eq!(same, flat);
}

fn write_triplet_dataset(root: &Path, ids: &[&str], with_skeleton_for: &[&str]) {
    for sub in ["noisy", "clean", "skeleton"] {
        std::fs::create_dir_all(root.join(sub)).unwrap();
    }
    for (i, id) in ids.iter().enumerate() {
        let clean = quantize_to_u8_grid(&generate_glyph(32, 32, 500 + i as u64));
        let noisy = quantize_to_u8_grid(
            &synthesize_noise(&clean, &NoiseSpec::new(NoiseKind::Mixed, 0.6, 700 + i as u64))
                .unwrap(),
        );
        write_png(&root.join("clean").join(format!("{id}.png")), &clean).unwrap();
        write_png(&root.join("noisy").join(format!("{id}.png")), &noisy).unwrap();
        if with_skeleton_for.contains(id) {
            let skel = skeleton_from_clean(&clean).unwrap();
            write_png(&root.join("skeleton").join(format!("{id}.png")), &skel).unwrap();
        }
    }
}

#[test]
fn triplet_datasets_load_with_derived_or_stored_skeletons() {
    let dir = tempfile::tempdir().unwrap();
    let ids = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot"];
    write_triplet_dataset(dir.path(), &ids, &["alpha", "charlie"]);
    let manifest_text = "layout = triplet_dirs\ntrain_fraction = 0.5\nval_fraction = 0\n\
                         test_fraction = 0.5\nseed = 3\ntarget_height = 32\ntarget_width = 32\n";
    let manifest_path = dir.path().join("dataset.manifest");
    std::fs::write(&manifest_path, manifest_text).unwrap();
    let manifest = DatasetManifest::from_file(&manifest_path).unwrap();
    assert_eq!(manifest.layout, Layout::TripletDirs);
    let records = load_dataset(&manifest).unwrap();
    assert_eq!(records.len(), 6);
    let sorted: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(sorted, ids, "ids are discovered in sorted order");
    let trains = records.iter().filter(|r| r.split == Split::Train).count();
    assert_eq!(trains, 3);
    for rec in &records {
        assert_eq!(rec.noisy.dim(), (3, 32, 32));
        assert_eq!(rec.clean.dim(), (3, 32, 32));
        assert_eq!(rec.skeleton.dim(), (1, 32, 32));
        assert!(rec.skeleton.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(rec.source.contains("triplet_dirs"));
    }
    // Stored and derived skeletons agree for untouched 32x32 images.
    let alpha = records.iter().find(|r| r.id == "alpha").unwrap();
    let derived = skeleton_from_clean(&alpha.clean).unwrap();
    assert_eq!(alpha.skeleton, derived);
    // Records stack into batches.
    let refs: Vec<&_> = records.iter().collect();
    let (noisy, clean, skeleton) = stack_batch(&refs).unwrap();
    assert_eq!(noisy.dims(), (6, 3, 32, 32));
    assert_eq!(clean.dims(), (6, 3, 32, 32));
    assert_eq!(skeleton.dims(), (6, 1, 32, 32));

    // Deleting one clean image turns loading into an ingest error
    // naming the id and path.
    std::fs::remove_file(dir.path().join("clean/delta.png")).unwrap();
    let err = load_dataset(&manifest).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("delta"), "{msg}");
}

#[test]
fn paired_datasets_respect_the_declared_noisy_side() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("pairs")).unwrap();
    let clean = quantize_to_u8_grid(&generate_glyph(24, 24, 50));
    let noisy = quantize_to_u8_grid(
        &synthesize_noise(&clean, &NoiseSpec::new(NoiseKind::DenseWhite, 0.8, 51)).unwrap(),
    );
    let mut paired = Array3::<f32>::zeros((3, 24, 48));
    paired.slice_mut(ndarray::s![.., .., ..24]).assign(&noisy);
    paired.slice_mut(ndarray::s![.., .., 24..]).assign(&clean);
    write_png(&dir.path().join("pairs/sample.png"), &paired).unwrap();

    let base = "layout = paired_sidebyside\ntrain_fraction = 1\nval_fraction = 0\n\
                test_fraction = 0\ntarget_height = 24\ntarget_width = 24\n";
    let left = DatasetManifest::from_kv(&format!("{base}noisy_side = left\n"), dir.path()).unwrap();
    let records = load_dataset(&left).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].noisy, noisy);
    assert_eq!(records[0].clean, clean);

    let right =
        DatasetManifest::from_kv(&format!("{base}noisy_side = right\n"), dir.path()).unwrap();
    let flipped = load_dataset(&right).unwrap();
    assert_eq!(flipped[0].noisy, clean);
    assert_eq!(flipped[0].clean, noisy);

    // An odd-width pair is rejected with the record named.
    let odd = Array3::<f32>::zeros((3, 8, 9));
    write_png(&dir.path().join("pairs/broken.png"), &odd).unwrap();
    let err = load_dataset(&left).unwrap_err();
    assert!(err.to_string().contains("broken"), "{err}");
}

#[test]
fn manifests_validate_and_ignore_unknown_keys() {
    let base = Path::new("/tmp");
    let ok = DatasetManifest::from_kv("layout = triplet_dirs\nfuture_key = whatever\n", base)
        .unwrap();
    assert_eq!(ok.layout, Layout::TripletDirs);
    assert_eq!(ok.noisy_side, Side::Left);
    assert_eq!((ok.target_height, ok.target_width), (256, 256));

    let bad_sum = DatasetManifest::from_kv("train_fraction = 0.9\ntest_fraction = 0.3\n", base);
    assert!(matches!(bad_sum, Err(Error::Config(_))));
    let bad_line = DatasetManifest::from_kv("layout triplet_dirs\n", base);
    assert!(matches!(bad_line, Err(Error::Config(_))));
    let bad_value = DatasetManifest::from_kv("seed = banana\n", base);
    assert!(matches!(bad_value, Err(Error::Config(_))));
    let bad_layout = DatasetManifest::from_kv("layout = scattered\n", base);
    assert!(matches!(bad_layout, Err(Error::Config(_))));

    // Explicit id lists override scanning.
    let listed = DatasetManifest::from_kv("ids = b, a ,c\n", base).unwrap();
    assert_eq!(listed.resolve_ids().unwrap(), vec!["b", "a", "c"]);
}

#[test]
fn synthetic_datasets_are_deterministic_and_well_formed() {
    let a = synthetic_dataset(4, 24, 24, NoiseKind::Mixed, 0.6, 12).unwrap();
    let b = synthetic_dataset(4, 24, 24, NoiseKind::Mixed, 0.6, 12).unwrap();
    assert_eq!(a.len(), 4);
    for (ra, rb) in a.iter().zip(&b) {
        assert_eq!(ra.id, rb.id);
        assert_eq!(ra.noisy, rb.noisy);
        assert_eq!(ra.clean, rb.clean);
        assert_eq!(ra.skeleton, rb.skeleton);
        assert_eq!(ra.noisy.dim(), (3, 24, 24));
        assert_eq!(ra.skeleton.dim(), (1, 24, 24));
    }
    // Different records hold different glyphs.
    assert_ne!(a[0].clean, a[1].clean);
}

// ----------------------------------------------------------------------
// Objective terms
// ----------------------------------------------------------------------

#[test]
fn quality_loss_closed_forms() {
    let x = rand_batch(2, 3, 8, 8, 1);
    // Identical images floor at -80 dB for unit dynamic range.
    let same = psnr_loss(&x, &x, 1.0, 1e-8).unwrap();
    assert!((same - (-80.0)).abs() < 1e-9, "got {same}");
    // A uniform 0.25 offset gives MSE 2^-4 exactly (both constants are
    // dyadic, so f32 arithmetic is exact), hence -40*log10(2) dB.
    let shifted = ImageBatch::new(Array4::from_elem((2, 3, 8, 8), 0.75f32));
    let base = ImageBatch::new(Array4::from_elem((2, 3, 8, 8), 0.5f32));
    let off = psnr_loss(&shifted, &base, 1.0, 1e-8).unwrap();
    let want = -40.0 * std::f64::consts::LOG10_2;
    assert!((off - want).abs() < 1e-9, "got {off}, want {want}");
    // Doubling the dynamic range shifts the loss by -20*log10(2).
    let wide = psnr_loss(&shifted, &base, 2.0, 1e-8).unwrap();
    assert!((wide - (off - 20.0 * 2.0f64.log10())).abs() < 1e-9);
}

#[test]
fn quality_loss_matches_direct_computation_and_is_symmetric() {
    let a = rand_batch(1, 3, 6, 7, 21);
    let b = rand_batch(1, 3, 6, 7, 22);
    let got = psnr_loss(&a, &b, 1.0, 1e-8).unwrap();
    let mse: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    let want = 10.0 * mse.log10();
    assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    let flipped = psnr_loss(&b, &a, 1.0, 1e-8).unwrap();
    assert_eq!(got, flipped);
}

#[test]
fn perceptual_distance_is_a_semimetric() {
    let fx = FeatureExtractor::seeded_random(FeatureTap::Deep, 5);
    let x = rand_batch(1, 3, 16, 16, 31);
    let y = rand_batch(1, 3, 16, 16, 32);
    assert_eq!(perceptual_loss(&x, &x, &fx).unwrap(), 0.0);
    let d = perceptual_loss(&x, &y, &fx).unwrap();
    assert!(d > 1e-6, "clearly different images must be far apart, got {d}");
    let d_rev = perceptual_loss(&y, &x, &fx).unwrap();
    assert!((d - d_rev).abs() < 1e-9, "absolute differences are symmetric");
}

#[test]
fn perceptual_distance_matches_manual_feature_comparison() {
    let fx = FeatureExtractor::seeded_random(FeatureTap::Mid, 8);
    let x = rand_batch(2, 3, 12, 12, 41);
    let y = rand_batch(2, 3, 12, 12, 42);
    let feat_x = fx.extract(&x).unwrap();
    let feat_y = fx.extract(&y).unwrap();
    let manual: f64 = feat_x
        .iter()
        .zip(feat_y.iter())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / feat_x.len() as f64;
    let got = perceptual_loss(&x, &y, &fx).unwrap();
    assert!(
        (got - manual).abs() < 1e-6,
        "got {got}, manual chain {manual}"
    );
}

#[test]
fn grayscale_inputs_replicate_to_three_channels() {
    let fx = FeatureExtractor::seeded_random(FeatureTap::Shallow, 3);
    let gray = rand_batch(1, 1, 10, 10, 51);
    let rgb = ImageBatch::new(
        ndarray::Array4::from_shape_fn((1, 3, 10, 10), |(b, _, y, x)| gray.data[(b, 0, y, x)]),
    );
    let zero = ImageBatch::new(Array4::zeros((1, 1, 10, 10)));
    let zero_rgb = ImageBatch::new(Array4::zeros((1, 3, 10, 10)));
    let via_gray = perceptual_loss(&gray, &zero, &fx).unwrap();
    let via_rgb = perceptual_loss(&rgb, &zero_rgb, &fx).unwrap();
    assert!((via_gray - via_rgb).abs() < 1e-9, "{via_gray} vs {via_rgb}");
}

#[test]
fn composite_objective_is_the_weighted_sum_of_its_terms() {
    let fx = FeatureExtractor::seeded_random(FeatureTap::Deep, 9);
    let den = rand_batch(1, 3, 16, 16, 61);
    let gt = rand_batch(1, 3, 16, 16, 62);
    // Skeleton predictions strictly inside (0,1) so clamping is a no-op.
    let skel = ImageBatch::new(rand_batch(1, 1, 16, 16, 63).data.mapv(|v| 0.1 + 0.8 * v));
    let gt_skel = ImageBatch::new(rand_batch(1, 1, 16, 16, 64).data.mapv(|v| {
        if v > 0.5 {
            1.0
        } else {
            0.0
        }
    }));
    let weights = LossWeights {
        a1: 100.0,
        a2: 100.0,
        a3: 1.0,
        a4: 1.0,
    };
    let total = total_loss(&den, &gt, &skel, &gt_skel, &weights, Some(&fx)).unwrap();
    let t1 = psnr_loss(&den, &gt, 1.0, 1e-8).unwrap();
    let t2 = perceptual_loss(&den, &gt, &fx).unwrap();
    let t3 = psnr_loss(&skel, &gt_skel, 1.0, 1e-8).unwrap();
    let t4 = perceptual_loss(&skel, &gt_skel, &fx).unwrap();
    let manual = 100.0 * t1 + 100.0 * t2 + 1.0 * t3 + 1.0 * t4;
    let rel = (total - manual).abs() / manual.abs().max(1.0);
    assert!(rel < 1e-4, "total {total} vs manual {manual} (rel {rel})");
}

#[test]
fn composite_objective_scales_linearly_in_each_weight() {
    let den = rand_batch(1, 3, 8, 8, 71);
    let gt = rand_batch(1, 3, 8, 8, 72);
    let skel = ImageBatch::new(rand_batch(1, 1, 8, 8, 73).data.mapv(|v| 0.2 + 0.6 * v));
    let gt_skel = rand_batch(1, 1, 8, 8, 74);
    let base = LossWeights {
        a1: 50.0,
        a2: 0.0,
        a3: 2.0,
        a4: 0.0,
    };
    let doubled = LossWeights {
        a1: 100.0,
        a2: 0.0,
        a3: 4.0,
        a4: 0.0,
    };
    let l1 = total_loss(&den, &gt, &skel, &gt_skel, &base, None).unwrap();
    let l2 = total_loss(&den, &gt, &skel, &gt_skel, &doubled, None).unwrap();
    assert!(
        (l2 - 2.0 * l1).abs() < 1e-3 * l1.abs().max(1.0),
        "doubling weights doubles the loss: {l1} vs {l2}"
    );
}

#[test]
fn zero_weights_skip_terms_and_feature_requirements() {
    let den = rand_batch(1, 3, 8, 8, 81);
    let gt = rand_batch(1, 3, 8, 8, 82);
    let skel = rand_batch(1, 1, 8, 8, 83);
    let gt_skel = rand_batch(1, 1, 8, 8, 84);
    let silent = LossWeights {
        a1: 0.0,
        a2: 0.0,
        a3: 0.0,
        a4: 0.0,
    };
    assert!(!silent.needs_features());
    assert_eq!(
        total_loss(&den, &gt, &skel, &gt_skel, &silent, None).unwrap(),
        0.0
    );
    // Quality-only weighting runs without any feature extractor.
    let quality_only = LossWeights {
        a1: 1.0,
        a2: 0.0,
        a3: 1.0,
        a4: 0.0,
    };
    assert!(!quality_only.needs_features());
    total_loss(&den, &gt, &skel, &gt_skel, &quality_only, None).unwrap();
    // Perceptual weighting demands one.
    let perceptual_on = LossWeights {
        a1: 1.0,
        a2: 0.5,
        a3: 0.0,
        a4: 0.0,
    };
    assert!(perceptual_on.needs_features());
    let err = total_loss(&den, &gt, &skel, &gt_skel, &perceptual_on, None);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn objective_rewards_approaching_the_target() {
    let gt = rand_batch(1, 3, 8, 8, 91);
    let far = ImageBatch::new(gt.data.mapv(|v| (v + 0.4).min(1.0)));
    let near = ImageBatch::new(gt.data.mapv(|v| (v + 0.1).min(1.0)));
    let skel = rand_batch(1, 1, 8, 8, 92);
    let weights = LossWeights {
        a1: 1.0,
        a2: 0.0,
        a3: 0.0,
        a4: 0.0,
    };
    let l_far = total_loss(&far, &gt, &skel, &skel, &weights, None).unwrap();
    let l_near = total_loss(&near, &gt, &skel, &skel, &weights, None).unwrap();
    assert!(l_near < l_far, "closer prediction must score lower: {l_near} vs {l_far}");
}

// ----------------------------------------------------------------------
// Feature extractor weights on disk
// ----------------------------------------------------------------------

#[test]
fn extractor_round_trips_through_its_container() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.bin");
    let fx = FeatureExtractor::seeded_random(FeatureTap::Deep, 33);
    fx.save(&path).unwrap();
    let loaded = FeatureExtractor::from_file(&path, FeatureTap::Deep).unwrap();
    let x = rand_batch(1, 3, 12, 12, 35);
    assert_eq!(fx.extract(&x).unwrap(), loaded.extract(&x).unwrap());
    // A shallower tap over the same weights is a prefix of the chain.
    let shallow = FeatureExtractor::from_file(&path, FeatureTap::Shallow).unwrap();
    assert_eq!(shallow.tap(), FeatureTap::Shallow);
    shallow.extract(&x).unwrap();
}

#[test]
fn corrupt_weight_files_are_rejected_with_the_path_named() {
    let dir = tempfile::tempdir().unwrap();
    // Garbage bytes: not even a magic number.
    let garbage = dir.path().join("garbage.bin");
    std::fs::write(&garbage, b"oo").unwrap();
    let err = FeatureExtractor::from_file(&garbage, FeatureTap::Deep).unwrap_err();
    assert!(err.to_string().contains("garbage.bin"), "{err}");

    // Wrong magic.
    let wrong = dir.path().join("wrong.bin");
    let tensor = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[1]));
    obiformer_core::records::write_container_file(
        &wrong,
        *b"NOPE",
        1,
        "",
        [("x", &tensor)],
    )
    .unwrap();
    assert!(FeatureExtractor::from_file(&wrong, FeatureTap::Deep).is_err());

    // Truncation mid-record.
    let path = dir.path().join("truncated.bin");
    FeatureExtractor::seeded_random(FeatureTap::Shallow, 1)
        .save(&path)
        .unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let err = FeatureExtractor::from_file(&path, FeatureTap::Shallow).unwrap_err();
    assert!(err.to_string().contains("truncated.bin"), "{err}");
}

#[test]
fn cache_lookup_reports_actionable_errors_and_loads_when_present() {
    let dir = tempfile::tempdir().unwrap();
    // Point the cache at an empty directory: the error must name the
    // environment variable and the expected file so users can fix it.
    std::env::set_var(CACHE_ENV, dir.path());
    let err = FeatureExtractor::from_cache(FeatureTap::Deep).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains(WEIGHTS_FILE), "{msg}");
    // Drop canonical weights into the cache and loading succeeds.
    let fx = FeatureExtractor::seeded_random(FeatureTap::Deep, 2);
    fx.save(&dir.path().join(WEIGHTS_FILE)).unwrap();
    let loaded = FeatureExtractor::from_cache(FeatureTap::Deep).unwrap();
    let x = rand_batch(1, 3, 8, 8, 3);
    assert_eq!(fx.extract(&x).unwrap(), loaded.extract(&x).unwrap());
    std::env::remove_var(CACHE_ENV);
}

#[test]
fn feature_taps_parse_and_label_consistently() {
    for tap in [FeatureTap::Shallow, FeatureTap::Mid, FeatureTap::Deep] {
        assert_eq!(FeatureTap::parse(tap.label()).unwrap(), tap);
    }
    assert_eq!(FeatureTap::parse("shallow").unwrap(), FeatureTap::Shallow);
    assert_eq!(FeatureTap::parse("deep").unwrap(), FeatureTap::Deep);
    assert!(matches!(FeatureTap::parse("bogus"), Err(Error::Config(_))));
}
