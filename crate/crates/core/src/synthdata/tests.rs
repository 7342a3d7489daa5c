use std::path::Path;

use proptest::prelude::*;

use super::*;

fn square(start: [f64; 2], velocity: [f64; 2], size: f64) -> ObjectSpec {
    ObjectSpec {
        shape: ObjectShape::Square,
        size,
        color: [0.9, 0.2, 0.1],
        start,
        velocity,
    }
}

fn scene(objects: Vec<ObjectSpec>, frames: usize, noise: f64) -> SceneSpec {
    SceneSpec {
        height: 16,
        width: 16,
        objects,
        background: Background::Constant([0.1, 0.3, 0.5]),
        noise_sigma: noise,
        frames,
        seed: 42,
        position_start: 1.0,
        position_step: 1.0,
    }
}

#[test]
fn anchor_follows_velocity() {
    let o = square([4.0, 4.0], [1.0, 0.0], 3.0);
    assert_eq!(o.anchor_rc(3), (4.0, 7.0));
}

#[test]
fn zero_frames_rejected() {
    assert!(generate(&scene(vec![], 0, 0.0)).is_err());
}

#[test]
fn same_seed_same_frames() {
    let s = scene(vec![square([2.0, 3.0], [1.0, 1.0], 4.0)], 5, 0.05);
    let a = generate(&s).unwrap();
    let b = generate(&s).unwrap();
    assert!(a.frames.bitwise_eq(&b.frames));
    let mut other = s.clone();
    other.seed = 43;
    assert!(!generate(&other).unwrap().frames.bitwise_eq(&a.frames));
}

#[test]
fn frame_difference_confined_to_object_support() {
    let obj = ObjectSpec {
        shape: ObjectShape::Circle,
        ..square([3.0, 5.0], [2.0, -1.0], 5.0)
    };
    let s = scene(vec![obj.clone()], 4, 0.0);
    let seq = generate(&s).unwrap();
    // independent support oracle: pixel centre inside the disc
    let inside = |f: usize, r: usize, c: usize| {
        let (r0, c0) = obj.anchor_rc(f);
        let (cy, cx) = (r0 + 2.5, c0 + 2.5);
        let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
        dy * dy + dx * dx <= 6.25
    };
    for f in 0..3 {
        for r in 0..16 {
            for c in 0..16 {
                let changed = (0..3).any(|k| seq.frames.get(f, k, r, c) != seq.frames.get(f + 1, k, r, c));
                let support = inside(f, r, c) || inside(f + 1, r, c);
                if changed {
                    assert!(support, "change off support at frame {f} ({r},{c})");
                }
                if support && !(inside(f, r, c) && inside(f + 1, r, c)) {
                    assert!(changed, "support pixel unchanged at frame {f} ({r},{c})");
                }
            }
        }
    }
}

#[test]
fn fractional_square_uses_area_coverage() {
    let s = SceneSpec {
        background: Background::Constant([0.0; 3]),
        ..scene(
            vec![ObjectSpec {
                color: [1.0; 3],
                ..square([0.5, 0.0], [0.0, 0.0], 1.0)
            }],
            1,
            0.0,
        )
    };
    let seq = generate(&s).unwrap();
    assert_eq!(seq.frames.get(0, 0, 0, 0), 0.5);
    assert_eq!(seq.frames.get(0, 0, 0, 1), 0.5);
    assert_eq!(seq.frames.get(0, 0, 0, 2), 0.0);
}

#[test]
fn split_sizes_and_determinism() {
    let items: Vec<usize> = (0..10).collect();
    let (tr, va, te) = split(&items, (0.8, 0.1, 0.1), 5).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
    assert_eq!(split(&items, (0.8, 0.1, 0.1), 5).unwrap(), (tr, va, te));
    let (tr, va, te) = split(&items, (1.0, 0.0, 0.0), 5).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (10, 0, 0));
}

#[test]
fn split_rejects_empty_part_and_bad_ratios() {
    let items: Vec<usize> = (0..3).collect();
    assert!(split(&items, (0.9, 0.05, 0.05), 0).is_err());
    assert!(split(&items, (0.5, 0.2, 0.2), 0).is_err());
}

#[test]
fn ppm_header_for_32x32() {
    let img = Rgb8Image {
        width: 32,
        height: 32,
        data: vec![7; 3072],
    };
    let bytes = img.to_ppm_bytes();
    assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
    assert_eq!(bytes.len(), b"P6\n32 32\n255\n".len() + 3072);
}

#[test]
fn ppm_errors_are_distinct() {
    let p = Path::new("x.ppm");
    let good = Rgb8Image {
        width: 2,
        height: 2,
        data: (0..12).collect(),
    }
    .to_ppm_bytes();
    assert_eq!(Rgb8Image::from_ppm_bytes(&good, p).unwrap().data, (0..12).collect::<Vec<u8>>());

    match Rgb8Image::from_ppm_bytes(&good[..good.len() - 2], p) {
        Err(Error::PpmShortFile { expected, actual, .. }) => assert_eq!((expected, actual), (12, 10)),
        other => panic!("expected short file, got {other:?}"),
    }
    assert!(matches!(
        Rgb8Image::from_ppm_bytes(b"P3\n2 2\n255\n", p),
        Err(Error::PpmBadMagic { .. })
    ));
    assert!(matches!(
        Rgb8Image::from_ppm_bytes(b"P6\n2 x\n255\n", p),
        Err(Error::PpmMalformedHeader { .. })
    ));
    assert!(matches!(
        Rgb8Image::from_ppm_bytes(b"P6\n2 2\n65535\n", p),
        Err(Error::PpmMalformedHeader { .. })
    ));
}

#[test]
fn ppm_comments_are_skipped() {
    let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
    bytes.extend_from_slice(&[1, 2, 3]);
    let img = Rgb8Image::from_ppm_bytes(&bytes, Path::new("c.ppm")).unwrap();
    assert_eq!(img.data, vec![1, 2, 3]);
}

#[test]
fn frames_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let seq = generate(&scene(vec![square([1.5, 2.0], [1.0, 0.5], 4.0)], 3, 0.03)).unwrap();
    write_frames(&seq, dir.path()).unwrap();
    let back = read_frames(dir.path()).unwrap();
    assert!(back.frames.max_abs_diff(&seq.frames) <= 0.5 / 255.0 + 1e-12);
    assert_eq!(back.positions, seq.positions);
    assert_eq!(back.meta, seq.meta);
}

#[test]
fn missing_meta_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("meta.txt"), "frames = 1\nheight = 1\n").unwrap();
    assert!(matches!(read_frames(dir.path()), Err(Error::Meta { .. })));
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.txt");
    let entries = vec![
        ManifestEntry {
            dir: "seq_0000".into(),
            split: "train".into(),
        },
        ManifestEntry {
            dir: "seq_0001".into(),
            split: "test".into(),
        },
    ];
    write_manifest(&path, &entries).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), entries);
}

#[test]
fn direction_preset_pairs_reversals() {
    let data = generate_dataset(DataPreset::Direction, 16, 2, 9).unwrap();
    assert_eq!(data.len(), 4);
    let n = data[0].len();
    for i in 0..n {
        assert_eq!(data[0].frames.item_at(i), data[1].frames.item_at(n - 1 - i));
    }
}

#[test]
fn sampled_objects_stay_inside() {
    for preset in [DataPreset::Extrapolate, DataPreset::Interpolate] {
        let sampler = SceneSampler::for_preset(preset, 16);
        for spec in sampler.sample_many(50, 1) {
            for o in &spec.objects {
                for f in 0..spec.frames {
                    let (r, c) = o.anchor_rc(f);
                    assert!(r >= 0.0 && c >= 0.0);
                    assert!(r + o.size <= 16.0 && c + o.size <= 16.0);
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn integer_motion_is_an_exact_shift(
        x in 0i32..8, y in 0i32..8, vx in -2i32..=2, vy in -2i32..=2, size in 1i32..6,
    ) {
        let s = scene(vec![square([x as f64, y as f64], [vx as f64, vy as f64], size as f64)], 3, 0.0);
        let seq = generate(&s).unwrap();
        for f in 0..2 {
            for r in 0..16i32 {
                for c in 0..16i32 {
                    let (sr, sc) = (r - vy, c - vx);
                    if !(0..16).contains(&sr) || !(0..16).contains(&sc) {
                        continue;
                    }
                    for k in 0..3 {
                        prop_assert_eq!(
                            seq.frames.get(f + 1, k, r as usize, c as usize),
                            seq.frames.get(f, k, sr as usize, sc as usize)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn split_is_a_disjoint_cover(n in 3usize..40, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        if let Ok((a, b, c)) = split(&items, (0.6, 0.2, 0.2), seed) {
            let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
            all.sort();
            prop_assert_eq!(all, items);
        }
    }

    #[test]
    fn ppm_bytes_round_trip(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
        let data: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
        let img = Rgb8Image { width: w, height: h, data };
        prop_assert_eq!(Rgb8Image::from_ppm_bytes(&img.to_ppm_bytes(), Path::new("p")).unwrap(), img);
    }
}

#[test]
fn motion_presets_always_move() {
    for (preset, size) in [(DataPreset::Extrapolate, 16), (DataPreset::Interpolate, 16)] {
        for spec in SceneSampler::for_preset(preset, size).sample_many(40, 3) {
            assert!(spec.objects.iter().all(|o| o.velocity != [0.0, 0.0]));
        }
    }
}
