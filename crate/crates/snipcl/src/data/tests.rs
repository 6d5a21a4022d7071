use super::*;
use crate::rng::stream;

fn pairwise_distances(seq: &SkeletonSequence, frame: usize) -> Vec<f64> {
    let j = seq.j();
    let mut out = Vec::new();
    for a in 0..j {
        for b in a + 1..j {
            let mut d = 0.0;
            for k in 0..3 {
                let diff = seq.joints.at3(frame, a, k) - seq.joints.at3(frame, b, k);
                d += diff * diff;
            }
            out.push(d.sqrt());
        }
    }
    out
}

#[test]
fn generation_is_deterministic_under_seed() {
    let cfg = SyntheticConfig {
        num_sequences: 4,
        seed: 11,
        ..SyntheticConfig::default()
    };
    let a = generate_synthetic_dataset(&cfg).unwrap();
    let b = generate_synthetic_dataset(&cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_background_fraction_labels_every_frame() {
    let cfg = SyntheticConfig {
        num_sequences: 3,
        background_fraction: 0.0,
        seed: 2,
        ..SyntheticConfig::default()
    };
    for (seq, _) in generate_synthetic_dataset(&cfg).unwrap() {
        assert!(seq.frame_labels.iter().all(|&l| l >= 1));
    }
}

#[test]
fn default_config_covers_every_class() {
    let cfg = SyntheticConfig::default();
    let data = generate_synthetic_dataset(&cfg).unwrap();
    let mut seen = vec![false; cfg.num_classes + 1];
    for (seq, _) in &data {
        for &l in &seq.frame_labels {
            seen[l] = true;
        }
    }
    for class in 1..=cfg.num_classes {
        assert!(seen[class], "class {class} never appears");
    }
}

#[test]
fn too_small_t_is_a_configuration_error() {
    let cfg = SyntheticConfig {
        t: 20,
        background_fraction: 0.5,
        ..SyntheticConfig::default()
    };
    assert!(generate_synthetic_dataset(&cfg).is_err());
}

#[test]
fn labels_and_annotations_are_mutually_derivable() {
    let cfg = SyntheticConfig {
        num_sequences: 8,
        seed: 5,
        ..SyntheticConfig::default()
    };
    for (seq, segs) in generate_synthetic_dataset(&cfg).unwrap() {
        assert_eq!(segments_from_labels(&seq.frame_labels), segs);
    }
}

#[test]
fn annotations_sorted_and_non_overlapping() {
    let cfg = SyntheticConfig {
        num_sequences: 16,
        seed: 9,
        ..SyntheticConfig::default()
    };
    for (_, segs) in generate_synthetic_dataset(&cfg).unwrap() {
        for w in segs.windows(2) {
            assert!(w[0].end <= w[1].start);
        }
        for s in &segs {
            assert!(s.start < s.end);
        }
    }
}

#[test]
fn preprocess_zeroes_root_every_frame() {
    let cfg = SyntheticConfig {
        num_sequences: 1,
        seed: 3,
        ..SyntheticConfig::default()
    };
    let (seq, _) = &generate_synthetic_dataset(&cfg).unwrap()[0];
    let (p, skipped) = preprocess_sequence(seq, 0, (3, 4)).unwrap();
    assert_eq!(skipped, 0);
    for t in 0..p.t() {
        for d in 0..3 {
            assert_eq!(p.joints.at3(t, 0, d), 0.0);
        }
    }
}

#[test]
fn preprocess_aligns_shoulders_to_x_axis() {
    // shoulders at (-1,-1,0) and (1,1,0): post-rotation y-component must vanish
    let mut data = vec![0.0; 4 * 3];
    data[1 * 3..1 * 3 + 3].copy_from_slice(&[-1.0, -1.0, 0.0]);
    data[2 * 3..2 * 3 + 3].copy_from_slice(&[1.0, 1.0, 0.0]);
    data[3 * 3..3 * 3 + 3].copy_from_slice(&[0.3, 0.4, 0.5]);
    let seq = SkeletonSequence {
        joints: Tensor::new(vec![1, 4, 3], data).unwrap(),
        frame_labels: vec![0],
        fps: 30.0,
    };
    let (p, _) = preprocess_sequence(&seq, 0, (1, 2)).unwrap();
    let vy = p.joints.at3(0, 2, 1) - p.joints.at3(0, 1, 1);
    let vx = p.joints.at3(0, 2, 0) - p.joints.at3(0, 1, 0);
    assert!(vy.abs() < 1e-9, "vy = {vy}");
    assert!((vx - 2.0 * std::f64::consts::SQRT_2).abs() < 1e-9, "vx = {vx}");
}

#[test]
fn preprocess_is_idempotent_and_rigid() {
    let cfg = SyntheticConfig {
        num_sequences: 1,
        seed: 7,
        ..SyntheticConfig::default()
    };
    let (seq, _) = &generate_synthetic_dataset(&cfg).unwrap()[0];
    let before = pairwise_distances(seq, 10);
    let (p1, _) = preprocess_sequence(seq, 0, (3, 4)).unwrap();
    let after = pairwise_distances(&p1, 10);
    for (a, b) in before.iter().zip(&after) {
        assert!((a - b).abs() < 1e-9, "rigidity violated: {a} vs {b}");
    }
    let (p2, _) = preprocess_sequence(&p1, 0, (3, 4)).unwrap();
    assert!(p1.joints.max_abs_diff(&p2.joints) < 1e-9);
}

#[test]
fn preprocess_skips_degenerate_axis_frames() {
    let seq = SkeletonSequence {
        joints: Tensor::new(vec![1, 3, 3], vec![0.0; 9]).unwrap(),
        frame_labels: vec![0],
        fps: 30.0,
    };
    let (_, skipped) = preprocess_sequence(&seq, 0, (1, 2)).unwrap();
    assert_eq!(skipped, 1);
}

#[test]
fn zero_magnitude_augmentation_is_identity() {
    let cfg = SyntheticConfig {
        num_sequences: 1,
        seed: 4,
        ..SyntheticConfig::default()
    };
    let (seq, _) = &generate_synthetic_dataset(&cfg).unwrap()[0];
    let mut rng = stream(4, "augment/test");
    let out = augment_sequence(seq, &AugmentPolicy::identity(), &mut rng).unwrap();
    assert_eq!(&out, seq);
}

#[test]
fn rotation_preserves_pairwise_distances() {
    let cfg = SyntheticConfig {
        num_sequences: 1,
        seed: 12,
        ..SyntheticConfig::default()
    };
    let (seq, _) = &generate_synthetic_dataset(&cfg).unwrap()[0];
    let policy = AugmentPolicy {
        rotate: true,
        ..AugmentPolicy::identity()
    };
    let mut rng = stream(4, "augment/rot");
    let out = augment_sequence(seq, &policy, &mut rng).unwrap();
    let before = pairwise_distances(seq, 42);
    let after = pairwise_distances(&out, 42);
    for (a, b) in before.iter().zip(&after) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn augmentation_preserves_shapes_and_label_length() {
    let cfg = SyntheticConfig {
        num_sequences: 2,
        seed: 21,
        ..SyntheticConfig::default()
    };
    let policy = AugmentPolicy {
        joint_mask: true,
        ..AugmentPolicy::default()
    };
    for (i, (seq, _)) in generate_synthetic_dataset(&cfg).unwrap().iter().enumerate() {
        let mut rng = stream(21, &format!("augment/{i}"));
        let out = augment_sequence(seq, &policy, &mut rng).unwrap();
        assert_eq!(out.t(), seq.t());
        assert_eq!(out.j(), seq.j());
        assert_eq!(out.frame_labels.len(), seq.frame_labels.len());
    }
}

#[test]
fn crop_labels_match_index_mapping_oracle() {
    // deterministic crop of the first half: labels must equal a nearest-index
    // resample of the original first-half labels
    let t = 100usize;
    let labels: Vec<usize> = (0..t).map(|i| if i < 30 { 1 } else if i < 60 { 0 } else { 2 }).collect();
    let win_len = t / 2;
    let expected: Vec<usize> = (0..t)
        .map(|to| labels[crop_resample_index(to, 0, win_len, t)])
        .collect();
    // oracle: independently recompute the nearest source index
    let oracle: Vec<usize> = (0..t)
        .map(|to| {
            let pos = to as f64 * (win_len - 1) as f64 / (t - 1) as f64;
            labels[pos.round() as usize]
        })
        .collect();
    assert_eq!(expected, oracle);
}

#[test]
fn dataset_roundtrip_preserves_content() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        num_sequences: 3,
        seed: 31,
        ..SyntheticConfig::default()
    };
    let items = generate_synthetic_dataset(&cfg).unwrap();
    let ds = Dataset { items };
    save_dataset(&ds, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.len(), 3);
    for ((a, sa), (b, sb)) in ds.items.iter().zip(&loaded.items) {
        assert_eq!(sa, sb);
        assert_eq!(a.frame_labels, b.frame_labels);
        // 32-bit storage: loaded values are the f32 rounding of the originals
        for (x, y) in a.joints.data().iter().zip(b.joints.data()) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }
}

#[test]
fn dataset_serialize_twice_is_byte_identical() {
    let dir1 = tempfile::tempdir().unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        num_sequences: 5,
        seed: 77,
        ..SyntheticConfig::default()
    };
    let ds = Dataset {
        items: generate_synthetic_dataset(&cfg).unwrap(),
    };
    save_dataset(&ds, dir1.path()).unwrap();
    let reloaded = load_dataset(dir1.path()).unwrap();
    save_dataset(&reloaded, dir2.path()).unwrap();
    for entry in std::fs::read_dir(dir1.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(dir1.path().join(&name)).unwrap();
        let b = std::fs::read(dir2.path().join(&name)).unwrap();
        assert_eq!(a, b, "file {name:?} differs after re-serialization");
    }
}

#[test]
fn empty_dataset_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&Dataset::default(), dir.path()).unwrap();
    assert!(load_dataset(dir.path()).unwrap().is_empty());
}

#[test]
fn truncated_blob_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        num_sequences: 1,
        seed: 1,
        ..SyntheticConfig::default()
    };
    let ds = Dataset {
        items: generate_synthetic_dataset(&cfg).unwrap(),
    };
    save_dataset(&ds, dir.path()).unwrap();
    let blob = dir.path().join("seq_00000.f32");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(
        load_dataset(dir.path()),
        Err(DatasetError::Format { .. })
    ));
}
