use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqa_fusion::seed::rng_for;
use vqa_fusion::world::*;

fn object(id: u32, shape: Shape, color: Color, bbox: (u32, u32, u32, u32)) -> SceneObject {
    SceneObject {
        id,
        shape,
        color,
        size: SizeClass::Small,
        material: Material::Matte,
        bbox: BBox {
            x: bbox.0,
            y: bbox.1,
            w: bbox.2,
            h: bbox.3,
        },
    }
}

fn scene(objects: Vec<SceneObject>) -> SceneGraph {
    SceneGraph {
        image_id: 1,
        width: 224,
        height: 224,
        objects,
    }
}

#[test]
fn forced_count_and_seed_determinism() {
    let cfg = WorldConfig {
        min_objects: 3,
        max_objects: 3,
        ..WorldConfig::default()
    };
    let s = gen_scene(&mut ChaCha8Rng::seed_from_u64(1), &cfg, 0).unwrap();
    assert_eq!(s.objects.len(), 3);
    let a = gen_scene(
        &mut ChaCha8Rng::seed_from_u64(9),
        &WorldConfig::default(),
        4,
    )
    .unwrap();
    let b = gen_scene(
        &mut ChaCha8Rng::seed_from_u64(9),
        &WorldConfig::default(),
        4,
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn separation_holds_over_1000_seeds() {
    let cfg = WorldConfig::default();
    let mut counts = BTreeSet::new();
    for seed in 0..1000u64 {
        let s = gen_scene(&mut rng_for(seed, "scene", 0), &cfg, 0).unwrap();
        counts.insert(s.objects.len());
        for (i, a) in s.objects.iter().enumerate() {
            let b = a.bbox;
            assert!(b.x + b.w <= s.width && b.y + b.h <= s.height && b.w > 0 && b.h > 0);
            for c in &s.objects[i + 1..] {
                let (ax, ay) = a.bbox.center();
                let (cx, cy) = c.bbox.center();
                assert!(((ax - cx).powi(2) + (ay - cy).powi(2)).sqrt() >= cfg.min_sep);
                assert!((ax - cx).abs() >= cfg.min_axis_gap && (ay - cy).abs() >= cfg.min_axis_gap);
            }
        }
    }
    assert_eq!(counts, (3..=8).collect());
}

#[test]
fn config_errors() {
    let inverted = WorldConfig {
        min_objects: 5,
        max_objects: 4,
        ..WorldConfig::default()
    };
    assert!(matches!(
        gen_scene(&mut ChaCha8Rng::seed_from_u64(0), &inverted, 0),
        Err(WorldError::Config(_))
    ));
    let crowded = WorldConfig {
        min_objects: 8,
        max_objects: 8,
        min_axis_gap: 40.0,
        ..WorldConfig::default()
    };
    assert!(matches!(
        gen_scene(&mut ChaCha8Rng::seed_from_u64(0), &crowded, 0),
        Err(WorldError::Config(_))
    ));
    let tiny = WorldConfig {
        width: 32,
        ..WorldConfig::default()
    };
    assert!(gen_scene(&mut ChaCha8Rng::seed_from_u64(0), &tiny, 0).is_err());
}

#[test]
fn bbox_normalize_examples() {
    let full = bbox_normalize(
        BBox {
            x: 0,
            y: 0,
            w: 224,
            h: 100,
        },
        224.0,
        100.0,
    )
    .unwrap();
    assert_eq!(full, [0.5, 0.5, 1.0, 1.0]);
    let b = bbox_normalize(
        BBox {
            x: 20,
            y: 30,
            w: 40,
            h: 60,
        },
        200.0,
        100.0,
    )
    .unwrap();
    let want = [0.2, 0.6, 0.2, 0.6];
    for (g, w) in b.iter().zip(want) {
        assert!((g - w).abs() < 1e-15);
    }
    assert!(matches!(
        bbox_normalize(
            BBox {
                x: 0,
                y: 0,
                w: 1,
                h: 1
            },
            0.0,
            10.0
        ),
        Err(WorldError::Parameter(_))
    ));
    assert!(bbox_normalize(
        BBox {
            x: 0,
            y: 0,
            w: 1,
            h: 1
        },
        10.0,
        -1.0
    )
    .is_err());
}

proptest! {
    #[test]
    fn normalized_boxes_lie_in_unit_cube(w in 1u32..300, h in 1u32..300, fx in 0.0f64..1.0, fy in 0.0f64..1.0, fw in 0.0f64..1.0, fh in 0.0f64..1.0) {
        let bw = ((fw * f64::from(w)).floor() as u32).max(1);
        let bh = ((fh * f64::from(h)).floor() as u32).max(1);
        let bx = (fx * f64::from(w - bw)).floor() as u32;
        let by = (fy * f64::from(h - bh)).floor() as u32;
        let nb = bbox_normalize(BBox { x: bx, y: by, w: bw, h: bh }, f64::from(w), f64::from(h)).unwrap();
        prop_assert!(nb.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn noiseless_detection_decodes_exactly() {
    let space = FeatureSpace::standard(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..50 {
        let s = gen_scene(&mut rng_for(seed, "scene", 0), &WorldConfig::default(), 0).unwrap();
        let det = synth_detection_features(&space, &s, 0.0, &mut rng);
        assert_eq!(det.shape(), &[s.objects.len(), 64]);
        for (i, o) in s.objects.iter().enumerate() {
            assert_eq!(
                space.decode_detection(det.row_slice(i)),
                (o.shape, o.color, o.size, o.material)
            );
        }
    }
    let five = WorldConfig {
        min_objects: 5,
        max_objects: 5,
        ..WorldConfig::default()
    };
    let s = gen_scene(&mut rng, &five, 0).unwrap();
    assert_eq!(
        synth_detection_features(&space, &s, 0.4, &mut rng).shape(),
        &[5, 64]
    );
}

fn decode_accuracy(space: &FeatureSpace, sigma: f64, objects: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut correct, mut total) = (0, 0);
    let mut image = 0;
    while total < objects {
        let s = gen_scene(
            &mut rng_for(seed, "scene", image),
            &WorldConfig::default(),
            0,
        )
        .unwrap();
        image += 1;
        let det = synth_detection_features(space, &s, sigma, &mut rng);
        for (i, o) in s.objects.iter().enumerate() {
            if total == objects {
                break;
            }
            total += 1;
            if space.decode_detection(det.row_slice(i)) == (o.shape, o.color, o.size, o.material) {
                correct += 1;
            }
        }
    }
    correct as f64 / total as f64
}

#[test]
fn decode_accuracy_orders_by_quality() {
    let space = FeatureSpace::standard(11);
    let acc: Vec<f64> = Quality::ALL
        .iter()
        .map(|q| decode_accuracy(&space, q.sigma(), 1000, 5))
        .collect();
    let (low, med, high) = (acc[0], acc[1], acc[2]);
    assert!(high >= med && med >= low, "{acc:?}");
    assert!(high - low >= 0.02, "{acc:?}");
    assert!(decode_accuracy(&space, Quality::High.sigma(), 10_000, 6) >= 0.99);
}

#[test]
fn unknown_quality_tag_is_parameter_error() {
    assert!(matches!(
        "bogus".parse::<Quality>(),
        Err(WorldError::Parameter(_))
    ));
    assert_eq!("med".parse::<Quality>().unwrap(), Quality::Med);
}

#[test]
fn single_cell_object_lights_one_cell() {
    let space = FeatureSpace::standard(1);
    // cells are 32×32 px; this box sits strictly inside cell (row 2, col 3)
    let s = scene(vec![object(0, Shape::Cube, Color::Red, (100, 70, 20, 16))]);
    let grid = synth_spatial_features(&space, &s, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(grid.shape(), &[7, 7, 32]);
    for r in 0..7 {
        for c in 0..7 {
            let cell = &grid.values()[(r * 7 + c) * 32..(r * 7 + c + 1) * 32];
            let nonzero = cell.iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, (r, c) == (2, 3), "cell {r},{c}");
        }
    }
}

#[test]
fn translating_by_one_cell_shifts_the_grid() {
    let space = FeatureSpace::standard(1);
    let a = scene(vec![object(
        0,
        Shape::Sphere,
        Color::Blue,
        (36, 40, 40, 20),
    )]);
    let b = scene(vec![object(
        0,
        Shape::Sphere,
        Color::Blue,
        (68, 40, 40, 20),
    )]);
    let ga = synth_spatial_features(&space, &a, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    let gb = synth_spatial_features(&space, &b, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    let cell = |g: &vqa_fusion::autodiff::Tensor, r: usize, c: usize| {
        g.values()[(r * 7 + c) * 32..(r * 7 + c + 1) * 32].to_vec()
    };
    for r in 0..7 {
        for c in 0..7 {
            let shifted = if c == 0 {
                vec![0.0; 32]
            } else {
                cell(&ga, r, c - 1)
            };
            assert_eq!(cell(&gb, r, c), shifted);
        }
    }
}

/// Brute-force oracle: cells containing at least one pixel of the box.
fn pixel_scan_cells(s: &SceneGraph, o: &SceneObject, grid: usize) -> BTreeSet<(usize, usize)> {
    let cw = s.width as usize / grid;
    let ch = s.height as usize / grid;
    let mut cells = BTreeSet::new();
    for py in o.bbox.y..o.bbox.y + o.bbox.h {
        for px in o.bbox.x..o.bbox.x + o.bbox.w {
            cells.insert((py as usize / ch, px as usize / cw));
        }
    }
    cells
}

#[test]
fn spanning_objects_hit_exactly_their_cells() {
    let space = FeatureSpace::standard(1);
    let two = scene(vec![object(0, Shape::Cube, Color::Green, (50, 10, 30, 12))]);
    assert_eq!(pixel_scan_cells(&two, &two.objects[0], 7).len(), 2);
    let grid = synth_spatial_features(&space, &two, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    let lit: BTreeSet<_> = (0..49)
        .filter(|k| {
            grid.values()[k * 32..(k + 1) * 32]
                .iter()
                .any(|&v| v != 0.0)
        })
        .map(|k| (k / 7, k % 7))
        .collect();
    assert_eq!(lit, pixel_scan_cells(&two, &two.objects[0], 7));

    for seed in 0..200 {
        let s = gen_scene(&mut rng_for(seed, "scene", 1), &WorldConfig::default(), 0).unwrap();
        for o in &s.objects {
            let fast: BTreeSet<_> = covered_cells(&s, o, 7).into_iter().collect();
            assert_eq!(fast, pixel_scan_cells(&s, o, 7));
        }
    }
}

#[test]
fn bundle_assembly() {
    let space = FeatureSpace::standard(4);
    let s = gen_scene(&mut rng_for(4, "scene", 0), &WorldConfig::default(), 0).unwrap();
    let n = s.objects.len();
    let det_only = FeatureFlags {
        use_detection: true,
        use_spatial: false,
        use_bbox_position: false,
        use_bbox_size: false,
    };
    let b = build_feature_bundle(&space, &s, Quality::High, det_only, 4);
    assert!(b.spatial.is_none());
    assert_eq!(b.detection.shape(), &[n, 64]);

    let full = build_feature_bundle(&space, &s, Quality::High, FeatureFlags::default(), 4);
    assert_eq!(full.detection.shape(), &[n, 68]);
    assert_eq!(full.spatial.as_ref().unwrap().shape(), &[7, 7, 32]);
    for (i, o) in s.objects.iter().enumerate() {
        let (x, y, w, h) = (
            o.bbox.x as f64,
            o.bbox.y as f64,
            o.bbox.w as f64,
            o.bbox.h as f64,
        );
        let want = [
            (x + w / 2.0) / 224.0,
            (y + h / 2.0) / 224.0,
            w / 224.0,
            h / 224.0,
        ];
        let row = full.detection.row_slice(i);
        for k in 0..4 {
            assert!((row[64 + k] - want[k]).abs() < 1e-15);
            assert!((full.bbox.row_slice(i)[k] - want[k]).abs() < 1e-15);
        }
        assert_eq!(&row[..64], b.detection.row_slice(i));
    }
    let pos_only = FeatureFlags {
        use_bbox_size: false,
        ..FeatureFlags::default()
    };
    assert_eq!(
        build_feature_bundle(&space, &s, Quality::High, pos_only, 4)
            .detection
            .shape(),
        &[n, 66]
    );
}

#[test]
fn detection_features_ignore_position() {
    let space = FeatureSpace::standard(8);
    let s = gen_scene(&mut rng_for(8, "scene", 3), &WorldConfig::default(), 3).unwrap();
    let mut moved = s.clone();
    for o in &mut moved.objects {
        o.bbox.x = if o.bbox.x >= 10 {
            o.bbox.x - 10
        } else {
            o.bbox.x + 10
        };
    }
    let a = RawFeatures::synthesize(&space, &s, Quality::Med, 8);
    let b = RawFeatures::synthesize(&space, &moved, Quality::Med, 8);
    let bits = |t: &vqa_fusion::autodiff::Tensor| {
        t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(bits(&a.detection), bits(&b.detection));
    assert_ne!(a.bbox, b.bbox);
    assert_ne!(a.spatial, b.spatial);
}

#[test]
fn regeneration_is_bitwise_identical() {
    let space_a = FeatureSpace::standard(21);
    let space_b = FeatureSpace::standard(21);
    assert_eq!(space_a, space_b);
    for id in 0..20 {
        let s = gen_scene(
            &mut rng_for(21, "scene", id),
            &WorldConfig::default(),
            id as u32,
        )
        .unwrap();
        let a = RawFeatures::synthesize(&space_a, &s, Quality::Low, 21);
        let b = RawFeatures::synthesize(&space_b, &s, Quality::Low, 21);
        assert_eq!(a, b);
        assert!(a.detection.values().iter().all(|&v| v == round_sig9(v)));
    }
}
