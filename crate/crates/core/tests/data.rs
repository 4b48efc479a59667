use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeSet;
use std::fs;
use std::hash::{Hash, Hasher};

use filterprune::data::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(defective: usize, clean: usize) -> GeneratorConfig {
    GeneratorConfig {
        defective,
        non_defective: clean,
        image_size: 64,
        ..GeneratorConfig::default()
    }
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn all_clean_config_yields_only_non_defective() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small_config(0, 10), 3, dir.path()).unwrap();
    assert_eq!(m.len(), 10);
    assert!(m.records.iter().all(|r| r.label == Label::NonDefective && r.defects.is_empty()));
    let pngs = fs::read_dir(dir.path().join("images")).unwrap().count();
    assert_eq!(pngs, 10);
}

#[test]
fn same_seed_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small_config(6, 6);
    generate_dataset(&cfg, 11, a.path()).unwrap();
    generate_dataset(&cfg, 11, b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    let c = tempfile::tempdir().unwrap();
    generate_dataset(&cfg, 12, c.path()).unwrap();
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

#[test]
fn default_dataset_cardinality_and_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GeneratorConfig::default();
    assert_eq!(cfg.image_size, 224);
    let m = generate_dataset(&cfg, 0, dir.path()).unwrap();
    assert_eq!(m.count(Label::Defective), 242);
    assert_eq!(m.count(Label::NonDefective), 236);
    let allowed = [DefectKind::D1, DefectKind::D2, DefectKind::D3, DefectKind::D6];
    for r in &m.records {
        match r.label {
            Label::Defective => {
                assert!(!r.defects.is_empty());
                assert!(r.defects.iter().all(|d| allowed.contains(d)), "{:?}", r.defects);
            }
            Label::NonDefective => assert!(r.defects.is_empty()),
        }
    }
    let reread = DatasetManifest::read(dir.path()).unwrap();
    assert_eq!(reread.records, m.records);
    let img = load_gray(&reread.image_path(&reread.records[0])).unwrap();
    assert_eq!((img.height, img.width), (224, 224));
}

#[test]
fn defective_images_clear_the_noise_floor() {
    let cfg = small_config(12, 0);
    let floor = (3.0 * cfg.sensor_noise * 255.0).max(2.0);
    let s = cfg.image_size;
    for i in 0..12 {
        let img = render_image(&cfg, Label::Defective, derive_seed(5, i)).unwrap();
        let (a, b) = (img.quantized(), img.quantized_background());
        let mut best: f32 = 0.0;
        for y in 0..=s - 4 {
            for x in 0..=s - 4 {
                let mut sum = 0.0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        let j = (y + dy) * s + x + dx;
                        sum += (a[j] as f32 - b[j] as f32).abs();
                    }
                }
                best = best.max(sum / 16.0);
            }
        }
        assert!(best > floor, "image {i}: {best} <= {floor}");
    }
    let clean = render_image(&cfg, Label::NonDefective, 9).unwrap();
    assert_eq!(clean.quantized(), clean.quantized_background());
}

#[test]
fn manifest_rows_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let bad = ManifestRecord {
        path: "images/0000.png".into(),
        label: Label::Defective,
        defects: vec![DefectKind::D4],
        seed: 0,
        fold: None,
    };
    fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&bad).unwrap()).unwrap();
    assert!(matches!(DatasetManifest::read(dir.path()), Err(filterprune::Error::Input(_))));
}

#[test]
fn invalid_generator_configs_are_rejected() {
    let mut cfg = small_config(1, 1);
    cfg.image_size = 32;
    assert!(cfg.validate().is_err());
    let mut cfg = small_config(1, 1);
    cfg.kinds = vec![DefectKind::D5];
    assert!(cfg.validate().is_err());
    let mut cfg = small_config(1, 1);
    cfg.d2.contrast = [0.3, 0.1];
    assert!(cfg.validate().is_err());
    let text = r#"{"defective": 3, "bogus": 1}"#;
    assert!(serde_json::from_str::<GeneratorConfig>(text).is_err());
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    fs::write(&file, b"x").unwrap();
    let err = generate_dataset(&small_config(1, 1), 0, &file.join("sub")).unwrap_err();
    assert_eq!(err.kind(), "io");
}

fn default_labels() -> Vec<usize> {
    let mut labels = vec![1; 242];
    labels.extend(vec![0; 236]);
    labels
}

#[test]
fn ten_folds_of_478_records() {
    // 478 = 10 * 47 + 8: eight folds of 48, two of 47
    let plan = kfold_split(&default_labels(), 10, 7, false).unwrap();
    let mut sizes = plan.sizes();
    sizes.sort();
    assert_eq!(sizes, [47, 47, 48, 48, 48, 48, 48, 48, 48, 48]);
    let all: BTreeSet<usize> = (0..10).flat_map(|f| plan.fold(f)).collect();
    assert_eq!(all.len(), 478);
}

#[test]
fn stratified_defective_counts() {
    // 242 = 10 * 24 + 2
    let labels = default_labels();
    for seed in 0..5 {
        let plan = kfold_split(&labels, 10, seed, true).unwrap();
        let mut counts: Vec<usize> = (0..10).map(|f| plan.fold(f).iter().filter(|&&i| labels[i] == 1).count()).collect();
        counts.sort();
        assert_eq!(counts, [24, 24, 24, 24, 24, 24, 24, 24, 25, 25]);
    }
}

#[test]
fn leave_one_out() {
    let labels = vec![0, 1, 0, 1, 1, 0, 0];
    let plan = kfold_split(&labels, labels.len(), 1, true).unwrap();
    assert!(plan.sizes().iter().all(|&s| s == 1));
    assert_eq!(plan.training(3).len(), labels.len() - 1);
}

#[test]
fn k_out_of_range() {
    assert!(kfold_split(&[0, 1, 0], 1, 0, true).is_err());
    assert!(kfold_split(&[0, 1, 0], 4, 0, true).is_err());
}

#[test]
fn split_is_seeded() {
    let labels = default_labels();
    assert_eq!(kfold_split(&labels, 10, 3, true).unwrap(), kfold_split(&labels, 10, 3, true).unwrap());
    assert_ne!(kfold_split(&labels, 10, 3, true).unwrap(), kfold_split(&labels, 10, 4, true).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fold_plan_invariants(n in 20usize..=1000, k in 2usize..=10, seed in any::<u64>(), p in 0.05f64..0.95, stratified in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|_| usize::from(rng.gen_bool(p))).collect();
        let plan = kfold_split(&labels, k, seed, stratified).unwrap();
        let folds: Vec<Vec<usize>> = (0..k).map(|f| plan.fold(f)).collect();
        let mut seen = vec![0; n];
        for f in &folds {
            for &i in f {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let (lo, hi) = (folds.iter().map(Vec::len).min().unwrap(), folds.iter().map(Vec::len).max().unwrap());
        prop_assert!(hi - lo <= 1);
        if stratified {
            let positives = labels.iter().filter(|&&l| l == 1).count() as f64;
            for f in &folds {
                let got = f.iter().filter(|&&i| labels[i] == 1).count() as f64;
                let expected = positives * f.len() as f64 / n as f64;
                prop_assert!((got - expected).abs() <= 1.0, "fold of {} has {} positives, expected {}", f.len(), got, expected);
            }
        }
    }
}

fn random_image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..h * w).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn flip_is_an_involution() {
    let img = random_image(1, 9, 13);
    let once = hflip(&img);
    assert_ne!(once, img);
    assert_eq!(once.at(2, 0), img.at(2, 12));
    assert_eq!(hflip(&once), img);
}

#[test]
fn zero_offset_crop_is_identity() {
    let img = random_image(2, 10, 10);
    assert_eq!(pad_crop(&img, 0, 0, 0), img);
    // centered crop of the padded image is also the identity
    assert_eq!(pad_crop(&img, AUGMENT_PAD, AUGMENT_PAD, AUGMENT_PAD), img);
}

#[test]
fn crop_shifts_and_zero_fills() {
    let img = random_image(3, 6, 6);
    let c = pad_crop(&img, 2, 0, 4);
    for y in 0..6 {
        for x in 0..6 {
            let (sy, sx) = (y as isize - 2, x as isize + 2);
            let want = if (0..6).contains(&sy) && (0..6).contains(&sx) { img.at(sy as usize, sx as usize) } else { 0.0 };
            assert_eq!(c.at(y, x), want);
        }
    }
}

fn stream_hashes(seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..100)
        .map(|i| {
            let out = augment(&random_image(i, 16, 16), AUGMENT_PAD, &mut rng);
            let mut h = DefaultHasher::new();
            out.pixels.iter().for_each(|v| v.to_bits().hash(&mut h));
            h.finish()
        })
        .collect()
}

#[test]
fn seeded_augmentation_is_reproducible() {
    let a = stream_hashes(42);
    assert_eq!(a, stream_hashes(42));
    assert_ne!(a, stream_hashes(43));
}

#[test]
fn threshold_extremes() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small_config(7, 5), 1, dir.path()).unwrap();
    let r = threshold_baseline(&m, 4, &[f64::INFINITY, 0.0]).unwrap();
    assert_eq!(r.rows[0].1, 5.0 / 12.0);
    assert_eq!(r.rows[1].1, 7.0 / 12.0);
    assert_eq!((r.best_threshold, r.best_accuracy), (0.0, 7.0 / 12.0));
    assert!(threshold_baseline(&m, 65, &[1.0]).is_err());
    assert!(threshold_baseline(&m, 4, &[]).is_err());
}

#[test]
fn window_deviation_matches_direct_scan() {
    let img = random_image(4, 12, 9);
    for window in [1, 3, 9] {
        let n = (img.height * img.width) as f64;
        let global: f64 = img.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mut want: f64 = 0.0;
        for y in 0..=img.height - window {
            for x in 0..=img.width - window {
                let mut s = 0.0;
                for dy in 0..window {
                    for dx in 0..window {
                        s += img.at(y + dy, x + dx) as f64;
                    }
                }
                want = want.max((s / (window * window) as f64 - global).abs());
            }
        }
        let got = window_deviation(&img, window).unwrap();
        assert!((got - want).abs() < 1e-9, "window {window}: {got} vs {want}");
    }
    assert!(window_deviation(&img, 10).is_err());
}

#[test]
fn dataset_loading_normalizes_and_resizes() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small_config(2, 2), 8, dir.path()).unwrap();
    let full = load_dataset(&m, 64).unwrap();
    let raw = load_gray(&m.image_path(&m.records[0])).unwrap();
    let want = (raw.pixels[100] / 255.0 - NORM_MEAN) / NORM_STD;
    assert_eq!(full.images[0].pixels[100], want);
    assert_eq!(full.labels, m.labels());
    let small = load_dataset(&m, 32).unwrap();
    assert_eq!(small.images[3].pixels.len(), 32 * 32);
}
