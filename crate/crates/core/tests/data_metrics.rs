use freqseg::config::KeyValues;
use freqseg::data::*;
use freqseg::metrics::*;
use freqseg::numerics::Tensor;
use freqseg::Error;
use proptest::prelude::*;

fn disk_scene(h: usize, w: usize, cx: f64, cy: f64, r: f64) -> SegSample {
    rasterize(
        Tensor::zeros([h, w, 3]),
        &[PlacedShape {
            shape: Shape::Disk { cx, cy, r },
            class: 1,
            color: [1.0, 1.0, 1.0],
        }],
    )
    .unwrap()
}

fn brute_disk(h: usize, w: usize, cx: f64, cy: f64, r: f64) -> usize {
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                n += 1;
            }
        }
    }
    n
}

fn edge_mask(h: usize, w: usize, col: usize) -> Mask {
    Mask::from_fn(h, w, |_, x| usize::from(x >= col))
}

fn mask_strategy(h: usize, w: usize, k: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(0..k, h * w).prop_map(move |labels| Mask { h, w, labels })
}

#[test]
fn centered_disk_matches_enumeration() {
    for (h, w, r) in [(40, 40, 9.5), (64, 64, 12.0), (33, 47, 7.3)] {
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let s = disk_scene(h, w, cx, cy, r);
        assert_eq!(s.mask.count(1), brute_disk(h, w, cx, cy, r));
        assert_eq!(s.mask.count(0) + s.mask.count(1), h * w);
    }
}

#[test]
fn empty_scene_is_all_background() {
    let cfg = SceneConfig {
        shapes_min: 0,
        shapes_max: 0,
        ..Default::default()
    };
    for i in 0..4 {
        let s = generate_scene(&cfg, i).unwrap();
        assert_eq!(s.mask, Mask::filled(64, 64, 0));
    }
}

#[test]
fn generation_is_deterministic_per_seed_and_index() {
    let cfg = SceneConfig::default();
    assert_eq!(generate_scene(&cfg, 3).unwrap(), generate_scene(&cfg, 3).unwrap());
    assert_ne!(generate_scene(&cfg, 3).unwrap(), generate_scene(&cfg, 4).unwrap());
    let other = SceneConfig { seed: 1, ..Default::default() };
    assert_ne!(generate_scene(&cfg, 3).unwrap(), generate_scene(&other, 3).unwrap());
}

#[test]
fn later_shapes_occlude_earlier_ones() {
    let rect = |class: usize, x0: f64| PlacedShape {
        shape: Shape::Rect { x0, y0: 2.0, x1: x0 + 6.0, y1: 8.0 },
        class,
        color: [0.1 * class as f32, 0.0, 0.0],
    };
    let s = rasterize(Tensor::zeros([10, 12, 3]), &[rect(1, 1.0), rect(2, 4.0)]).unwrap();
    assert_eq!(s.mask.at(5, 2), 1);
    assert_eq!(s.mask.at(5, 5), 2);
    assert_eq!(s.mask.at(5, 9), 2);
    assert_eq!(s.mask.at(0, 5), 0);
    assert_eq!(s.image.data()[(5 * 12 + 5) * 3], 0.2);
}

#[test]
fn image_is_antialiased_and_mask_is_not() {
    let s = disk_scene(32, 32, 16.0, 16.0, 7.3);
    let partial = s.image.data().chunks(3).filter(|p| p[0] > 0.0 && p[0] < 1.0).count();
    assert!(partial > 0);
    assert!(s.mask.labels.iter().all(|&c| c <= 1));
    assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn generated_samples_satisfy_sample_invariants() {
    let cfg = SceneConfig::default();
    for i in 0..8 {
        let s = generate_scene(&cfg, i).unwrap();
        assert_eq!(s.image.shape(), [cfg.h, cfg.w, 3]);
        assert_eq!((s.mask.h, s.mask.w), (cfg.h, cfg.w));
        assert!(s.mask.labels.iter().all(|&c| c < cfg.num_classes));
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(s.hflip().hflip(), s);
    }
}

#[test]
fn scene_config_requires_background_class() {
    let cfg = SceneConfig { num_classes: 3, ..Default::default() };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    assert!(generate_scene(&cfg, 0).is_err());
}

#[test]
fn miou_hand_examples() {
    let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).unwrap();
    assert_eq!(cm.miou().unwrap(), 0.6);

    let gt = Mask::from_fn(4, 4, |_, x| usize::from(x >= 2));
    let mut cm = ConfusionMatrix::new(2);
    cm.add(&Mask::filled(4, 4, 0), &gt).unwrap();
    assert_eq!(cm.class_iou(), vec![Some(0.5), Some(0.0)]);
    assert_eq!(cm.miou().unwrap(), 0.25);
    assert_eq!(cm.pixel_accuracy().unwrap(), 0.5);

    let mut perfect = ConfusionMatrix::new(3);
    perfect.add(&gt, &gt).unwrap();
    assert_eq!(perfect.miou().unwrap(), 1.0);
}

#[test]
fn miou_skips_absent_classes_and_rejects_empty() {
    let m = Mask::from_fn(2, 2, |y, _| y);
    let mut cm = ConfusionMatrix::new(5);
    cm.add(&m, &m).unwrap();
    assert_eq!(cm.miou().unwrap(), 1.0);
    assert!(matches!(ConfusionMatrix::new(3).miou(), Err(Error::Data(_))));
    assert!(matches!(cm.add(&Mask::filled(2, 3, 0), &m), Err(Error::Dimension(_))));
    assert!(matches!(cm.add(&Mask::filled(2, 2, 5), &m), Err(Error::Data(_))));
}

#[test]
fn boundary_identity_and_shift_cases() {
    let (h, w, col) = (12, 24, 8);
    let gt = edge_mask(h, w, col);
    assert_eq!(boundary_f_score(&gt, &gt, 2).unwrap(), 1.0);
    for r in 1..=3 {
        for shift in 0..=r {
            assert_eq!(boundary_f_score(&edge_mask(h, w, col + shift), &gt, r).unwrap(), 1.0);
        }
        let far = edge_mask(h, w, col + r + 1);
        let c = boundary_counts(&far, &gt, r).unwrap();
        assert_eq!(c.precision(), 0.0);
        assert_eq!(c.f_score(), 0.0);
    }
}

#[test]
fn boundary_degenerate_cases() {
    let flat = Mask::filled(6, 6, 2);
    assert_eq!(boundary_f_score(&flat, &flat, 1).unwrap(), 1.0);
    assert_eq!(boundary_f_score(&flat, &edge_mask(6, 6, 3), 1).unwrap(), 0.0);
    assert!(matches!(boundary_f_score(&flat, &Mask::filled(6, 5, 2), 1), Err(Error::Dimension(_))));
    assert!(matches!(boundary_f_score(&flat, &flat, 0), Err(Error::Parameter(_))));
}

#[test]
fn dataset_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig { seed: 9, ..Default::default() };
    write_dataset(dir.path(), &cfg, 4, 0).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    let want = Dataset::generate(&cfg, 0, 4).unwrap();
    assert_eq!(back.num_classes, 4);
    for (a, b) in back.samples.iter().zip(&want.samples) {
        assert_eq!(a.mask, b.mask);
        let same = a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same);
    }
    let m = read_manifest(dir.path()).unwrap();
    for key in ["count", "H", "W", "K", "seed"] {
        assert!(m.contains(key), "{key}");
    }
    assert_eq!(m.get("count"), Some("4"));
}

#[test]
fn dataset_read_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(read_dataset(dir.path()).is_err());

    let cfg = SceneConfig::default();
    write_dataset(dir.path(), &cfg, 3, 0).unwrap();
    let mut m = read_manifest(dir.path()).unwrap();
    m.set("count", 5);
    m.write(&dir.path().join("manifest.txt")).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));

    m.set("count", 3);
    m.write(&dir.path().join("manifest.txt")).unwrap();
    std::fs::write(dir.path().join("img_00001.ntf"), b"NTF?").unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn out_of_range_mask_values_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = SegSample {
        image: Tensor::zeros([2, 2, 3]),
        mask: Mask::from_fn(2, 2, |y, x| y * 2 + x),
    };
    let mut m = KeyValues::new();
    m.set("K", 3);
    write_samples(dir.path(), &[s], &m).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Data(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn disk_cardinality(cx in 4.0f64..28.0, cy in 4.0f64..28.0, r in 0.5f64..10.0) {
        let s = disk_scene(32, 32, cx, cy, r);
        prop_assert_eq!(s.mask.count(1), brute_disk(32, 32, cx, cy, r));
    }

    #[test]
    fn rect_matches_pixel_center_ranges(x0 in 0.0f64..10.0, y0 in 0.0f64..10.0, ww in 0.5f64..10.0, hh in 0.5f64..10.0) {
        let s = rasterize(Tensor::zeros([20, 20, 3]), &[PlacedShape {
            shape: Shape::Rect { x0, y0, x1: x0 + ww, y1: y0 + hh },
            class: 2,
            color: [0.5; 3],
        }]).unwrap();
        for y in 0..20 {
            for x in 0..20 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = px >= x0 && px < x0 + ww && py >= y0 && py < y0 + hh;
                prop_assert_eq!(s.mask.at(y, x) == 2, inside);
            }
        }
    }

    #[test]
    fn miou_matches_pixel_sets(pred in mask_strategy(8, 8, 3), gt in mask_strategy(8, 8, 3)) {
        let mut cm = ConfusionMatrix::new(3);
        cm.add(&pred, &gt).unwrap();
        prop_assert_eq!(cm.total(), 64);
        let mut ious = vec![];
        for c in 0..3 {
            let p: std::collections::BTreeSet<usize> = (0..64).filter(|&i| pred.labels[i] == c).collect();
            let g: std::collections::BTreeSet<usize> = (0..64).filter(|&i| gt.labels[i] == c).collect();
            let union = p.union(&g).count();
            if union > 0 {
                ious.push(p.intersection(&g).count() as f64 / union as f64);
            }
        }
        let want = ious.iter().sum::<f64>() / ious.len() as f64;
        prop_assert_eq!(cm.miou().unwrap(), want);
        let correct = (0..64).filter(|&i| pred.labels[i] == gt.labels[i]).count();
        prop_assert_eq!(cm.pixel_accuracy().unwrap(), correct as f64 / 64.0);
    }

    #[test]
    fn boundary_swap_exchanges_precision_and_recall(a in mask_strategy(8, 8, 3), b in mask_strategy(8, 8, 3), r in 1usize..4) {
        let ab = boundary_counts(&a, &b, r).unwrap();
        let ba = boundary_counts(&b, &a, r).unwrap();
        prop_assert_eq!(ab.precision(), ba.recall());
        prop_assert_eq!(ab.recall(), ba.precision());
        prop_assert_eq!(ab.f_score(), ba.f_score());
        prop_assert!((0.0..=1.0).contains(&ab.f_score()));
    }
}
