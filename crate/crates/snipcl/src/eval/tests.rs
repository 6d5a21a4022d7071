use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng::stream;

fn seg(class_id: usize, start: usize, end: usize, score: f64) -> Segment {
    Segment {
        class_id,
        start,
        end,
        score,
    }
}

fn gt(class_id: usize, start: usize, end: usize) -> SegmentAnnotation {
    SegmentAnnotation {
        class_id,
        start,
        end,
    }
}

#[test]
fn tiou_closed_forms() {
    assert_eq!(tiou((3, 9), (3, 9)), 1.0);
    assert_eq!(tiou((0, 5), (5, 10)), 0.0);
    assert!((tiou((0, 10), (5, 15)) - 5.0 / 15.0).abs() < 1e-12);
}

#[test]
fn threshold_segments_run_scan_oracle() {
    // class-1 probabilities [0.9, 0.9, 0.1, 0.8] at theta = 0.5
    let probs = Tensor::from_rows(&[
        vec![0.1, 0.9],
        vec![0.1, 0.9],
        vec![0.9, 0.1],
        vec![0.2, 0.8],
    ])
    .unwrap();
    let segs = threshold_segments(&probs, &[0.5]).unwrap();
    assert_eq!(segs.len(), 2);
    assert_eq!((segs[0].start, segs[0].end), (0, 2));
    assert!((segs[0].score - 0.9).abs() < 1e-12);
    assert_eq!((segs[1].start, segs[1].end), (3, 4));
    assert!((segs[1].score - 0.8).abs() < 1e-12);
}

#[test]
fn threshold_segments_empty_and_saturated() {
    let low = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.8, 0.2]]).unwrap();
    assert!(threshold_segments(&low, &[0.5]).unwrap().is_empty());

    let high = Tensor::from_rows(&[vec![0.1, 0.9], vec![0.1, 0.9], vec![0.2, 0.8]]).unwrap();
    let segs = threshold_segments(&high, &[0.5]).unwrap();
    assert_eq!(segs.len(), 1);
    assert_eq!((segs[0].start, segs[0].end), (0, 3));
}

#[test]
fn threshold_segments_contract_errors() {
    let probs = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
    assert!(threshold_segments(&probs, &[]).is_err());
    assert!(threshold_segments(&probs, &[0.0]).is_err());
    assert!(threshold_segments(&probs, &[1.0]).is_err());
    let bad = Tensor::from_rows(&[vec![0.5, 0.6]]).unwrap();
    assert!(threshold_segments(&bad, &[0.5]).is_err());
}

#[test]
fn nms_keeps_single_and_suppresses_duplicates() {
    let single = vec![seg(1, 0, 5, 0.7)];
    assert_eq!(nms(&single, 0.4), single);

    let dup = vec![seg(1, 0, 5, 0.9), seg(1, 0, 5, 0.8)];
    let kept = nms(&dup, 0.4);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].score, 0.9);
}

#[test]
fn nms_ignores_cross_class_overlap() {
    let cands = vec![seg(1, 0, 5, 0.9), seg(2, 0, 5, 0.8)];
    assert_eq!(nms(&cands, 0.4).len(), 2);
}

/// Independent greedy simulation used by the randomized comparison.
fn nms_oracle(cands: &[Segment], thr: f64) -> Vec<Segment> {
    let mut remaining: Vec<Segment> = cands.to_vec();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (a, b) = (&remaining[i], &remaining[best]);
            let better = a.score > b.score
                || (a.score == b.score && a.start < b.start)
                || (a.score == b.score && a.start == b.start && a.len() > b.len());
            if better {
                best = i;
            }
        }
        let chosen = remaining.remove(best);
        remaining.retain(|s| {
            s.class_id != chosen.class_id
                || tiou((s.start, s.end), (chosen.start, chosen.end)) <= thr
        });
        kept.push(chosen);
    }
    kept
}

#[test]
fn nms_matches_brute_force_oracle_on_random_fixtures() {
    let mut rng = stream(50, "nms-fixtures");
    for _ in 0..150 {
        let n = rng.gen_range(0..=10);
        let cands: Vec<Segment> = (0..n)
            .map(|_| {
                let start = rng.gen_range(0..40);
                let len = rng.gen_range(1..12);
                seg(
                    rng.gen_range(1..4),
                    start,
                    start + len,
                    // coarse scores so ties actually occur
                    (rng.gen_range(0..10) as f64) / 10.0,
                )
            })
            .collect();
        let thr = rng.gen_range(2..8) as f64 / 10.0;
        assert_eq!(nms(&cands, thr), nms_oracle(&cands, thr));
    }
}

proptest! {
    #[test]
    fn tiou_is_symmetric_and_bounded(
        a0 in 0usize..50, al in 1usize..20,
        b0 in 0usize..50, bl in 1usize..20,
    ) {
        let (a, b) = ((a0, a0 + al), (b0, b0 + bl));
        let v = tiou(a, b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, tiou(b, a));
        // 1 exactly when the intervals coincide
        prop_assert_eq!(v == 1.0, a == b);
    }

    #[test]
    fn nms_output_is_valid_subset(
        raw in proptest::collection::vec((0usize..30, 1usize..10, 1usize..4, 0u8..10), 0..10),
        thr10 in 2u8..8,
    ) {
        let cands: Vec<Segment> = raw
            .iter()
            .map(|&(s, l, c, sc)| seg(c, s, s + l, sc as f64 / 10.0))
            .collect();
        let thr = thr10 as f64 / 10.0;
        let kept = nms(&cands, thr);
        for k in &kept {
            prop_assert!(cands.contains(k));
        }
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                if kept[i].class_id == kept[j].class_id {
                    let ov = tiou((kept[i].start, kept[i].end), (kept[j].start, kept[j].end));
                    prop_assert!(ov <= thr);
                }
            }
        }
    }
}

#[test]
fn average_precision_closed_forms() {
    let gts = vec![(0usize, gt(1, 10, 20))];
    // perfect prediction
    let perfect = vec![(0usize, seg(1, 10, 20, 0.9))];
    assert_eq!(average_precision(&perfect, &gts, 0.5), 1.0);
    // no predictions
    assert_eq!(average_precision(&[], &gts, 0.5), 0.0);
    // false positive ranked first: P-R points (0, 0) then (1/2, 1) -> AP 0.5
    let mixed = vec![
        (0usize, seg(1, 50, 60, 0.95)),
        (0usize, seg(1, 10, 20, 0.80)),
    ];
    assert!((average_precision(&mixed, &gts, 0.5) - 0.5).abs() < 1e-12);
}

#[test]
fn average_precision_does_not_match_across_sequences() {
    let gts = vec![(0usize, gt(1, 10, 20))];
    let preds = vec![(1usize, seg(1, 10, 20, 0.9))]; // right interval, wrong sequence
    assert_eq!(average_precision(&preds, &gts, 0.5), 0.0);
}

#[test]
fn average_precision_is_rank_invariant_under_score_scaling() {
    let mut rng = stream(51, "ap-scale");
    let gts: Vec<(usize, SegmentAnnotation)> = (0..5)
        .map(|i| (i % 2, gt(1, i * 10, i * 10 + 8)))
        .collect();
    let preds: Vec<(usize, Segment)> = (0..8)
        .map(|_| {
            let s = rng.gen_range(0..45);
            (rng.gen_range(0..2), seg(1, s, s + rng.gen_range(3..10), rng.gen_range(0.01..1.0)))
        })
        .collect();
    let scaled: Vec<(usize, Segment)> = preds
        .iter()
        .map(|(q, s)| (*q, Segment { score: s.score * 7.5, ..s.clone() }))
        .collect();
    for thr in [0.1, 0.3, 0.5] {
        let a = average_precision(&preds, &gts, thr);
        let b = average_precision(&scaled, &gts, thr);
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn average_precision_is_monotone_in_tiou_threshold() {
    let mut rng = stream(52, "ap-mono");
    for _ in 0..20 {
        let gts: Vec<(usize, SegmentAnnotation)> = (0..rng.gen_range(1..6))
            .map(|_| {
                let s = rng.gen_range(0..40);
                (0usize, gt(1, s, s + rng.gen_range(5..15)))
            })
            .collect();
        let preds: Vec<(usize, Segment)> = (0..rng.gen_range(0..8))
            .map(|_| {
                let s = rng.gen_range(0..40);
                (0usize, seg(1, s, s + rng.gen_range(5..15), rng.gen_range(0.0..1.0)))
            })
            .collect();
        let mut prev = f64::INFINITY;
        for thr in [0.1, 0.2, 0.3, 0.4, 0.5] {
            let ap = average_precision(&preds, &gts, thr);
            assert!(ap <= prev + 1e-12);
            prev = ap;
        }
    }
}

/// Exhaustive AP recomputation with an independent matching loop.
fn ap_oracle(
    preds: &[(usize, Segment)],
    gts: &[(usize, SegmentAnnotation)],
    thr: f64,
) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| {
        preds[j]
            .1
            .score
            .total_cmp(&preds[i].1.score)
            .then(preds[i].0.cmp(&preds[j].0))
            .then(preds[i].1.start.cmp(&preds[j].1.start))
    });
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::new();
    for &pi in &order {
        let (sq, sg) = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gq, g)) in gts.iter().enumerate() {
            if used[gi] || gq != sq || g.class_id != sg.class_id {
                continue;
            }
            let ov = tiou((sg.start, sg.end), (g.start, g.end));
            if ov >= thr && best.map_or(true, |(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        if let Some((gi, _)) = best {
            used[gi] = true;
            hits.push(1.0);
        } else {
            hits.push(0.0);
        }
    }
    // direct area computation: sum over true positives of the best
    // precision at any rank with recall >= this one's
    let total = gts.len() as f64;
    let mut ap = 0.0;
    let mut cum = 0.0;
    for (rank, h) in hits.iter().enumerate() {
        cum += h;
        if *h > 0.0 {
            let mut best_p = 0.0f64;
            let mut c2 = 0.0;
            for (r2, h2) in hits.iter().enumerate() {
                c2 += h2;
                if r2 >= rank {
                    best_p = best_p.max(c2 / (r2 as f64 + 1.0));
                }
            }
            ap += best_p / total;
        }
    }
    ap
}

#[test]
fn average_precision_matches_exhaustive_oracle() {
    let mut rng = stream(53, "ap-fixtures");
    for _ in 0..150 {
        let gts: Vec<(usize, SegmentAnnotation)> = (0..rng.gen_range(1..=6))
            .map(|_| {
                let s = rng.gen_range(0..40);
                (rng.gen_range(0..2), gt(1, s, s + rng.gen_range(4..12)))
            })
            .collect();
        let preds: Vec<(usize, Segment)> = (0..rng.gen_range(0..=8))
            .map(|_| {
                let s = rng.gen_range(0..40);
                (
                    rng.gen_range(0..2),
                    seg(1, s, s + rng.gen_range(4..12), rng.gen_range(0.0..1.0)),
                )
            })
            .collect();
        let thr = rng.gen_range(1..6) as f64 / 10.0;
        let a = average_precision(&preds, &gts, thr);
        let b = ap_oracle(&preds, &gts, thr);
        assert!((a - b).abs() < 1e-9, "ap {a} vs oracle {b}");
    }
}

#[test]
fn map_report_perfect_and_empty() {
    let gts = vec![(0usize, gt(1, 0, 10)), (0usize, gt(2, 20, 30))];
    let perfect = vec![(0usize, seg(1, 0, 10, 0.9)), (0usize, seg(2, 20, 30, 0.8))];
    let rep = map_report(&perfect, &gts, &DEFAULT_TIOU_THRESHOLDS);
    for row in rep.per_class.values() {
        for &v in row.values() {
            assert_eq!(v, 1.0);
        }
    }
    assert_eq!(rep.avg_map, 1.0);

    let rep = map_report(&[], &gts, &DEFAULT_TIOU_THRESHOLDS);
    assert_eq!(rep.avg_map, 0.0);
}

#[test]
fn map_report_average_is_mean_of_threshold_maps() {
    let mut rng = stream(54, "map-avg");
    let gts: Vec<(usize, SegmentAnnotation)> = (0..6)
        .map(|i| {
            let s = rng.gen_range(0..40);
            (i % 2, gt(1 + i % 3, s, s + rng.gen_range(5..12)))
        })
        .collect();
    let preds: Vec<(usize, Segment)> = (0..10)
        .map(|_| {
            let s = rng.gen_range(0..40);
            (
                rng.gen_range(0..2),
                seg(rng.gen_range(1..4), s, s + rng.gen_range(5..12), rng.gen_range(0.0..1.0)),
            )
        })
        .collect();
    let rep = map_report(&preds, &gts, &DEFAULT_TIOU_THRESHOLDS);
    let mean: f64 = rep.per_tiou_map.values().sum::<f64>() / rep.per_tiou_map.len() as f64;
    assert!((rep.avg_map - mean).abs() < 1e-12);
    for v in rep.per_tiou_map.values().chain(rep.per_class.values().flat_map(|r| r.values())) {
        assert!((0.0..=1.0).contains(v));
    }
}

#[test]
fn map_report_excludes_absent_classes() {
    let gts = vec![(0usize, gt(2, 0, 10))];
    let preds = vec![(0usize, seg(1, 0, 10, 0.9))]; // class 1 has no GT
    let rep = map_report(&preds, &gts, &[0.5]);
    assert!(!rep.per_class.contains_key(&1));
    assert_eq!(rep.per_class[&2]["0.5"], 0.0);
}

#[test]
fn report_csv_has_one_row_per_cell() {
    let gts = vec![(0usize, gt(1, 0, 10))];
    let preds = vec![(0usize, seg(1, 0, 10, 0.9))];
    let rep = map_report(&preds, &gts, &DEFAULT_TIOU_THRESHOLDS);
    let csv = rep.to_csv();
    // header + 5 per-class rows + 5 map rows + avg row
    assert_eq!(csv.lines().count(), 1 + 5 + 5 + 1);
    assert!(csv.starts_with("kind,class,tiou,value\n"));
}

#[test]
fn knn_exact_match_and_constant_labels() {
    let train = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let (labels, scores, k_eff) =
        knn_frame_classify(&train, &[1, 2], &Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), 1, 2)
            .unwrap();
    assert_eq!(labels, vec![1]);
    assert_eq!(k_eff, 1);
    assert_eq!(scores.at2(0, 1), 1.0);

    let (labels, _, _) =
        knn_frame_classify(&train, &[2, 2], &Tensor::from_rows(&[vec![0.3, 0.7]]).unwrap(), 2, 2)
            .unwrap();
    assert_eq!(labels, vec![2]);
}

#[test]
fn knn_clamps_oversized_k() {
    let train = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let (_, scores, k_eff) =
        knn_frame_classify(&train, &[0, 1], &Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), 9, 1)
            .unwrap();
    assert_eq!(k_eff, 2);
    // vote fractions still sum to 1 after clamping
    let s: f64 = scores.row(0).iter().sum();
    assert!((s - 1.0).abs() < 1e-12);
}

#[test]
fn knn_matches_brute_force_oracle() {
    let mut rng = stream(55, "knn-fixtures");
    for _ in 0..100 {
        let n = rng.gen_range(3..20);
        let d = rng.gen_range(2..5);
        let classes = 3usize;
        let mk = |rng: &mut crate::rng::RngStream, rows: usize| {
            Tensor::new(
                vec![rows, d],
                (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let train = mk(&mut rng, n);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=classes)).collect();
        let test = mk(&mut rng, 4);
        let k = rng.gen_range(1..=5);
        let (pred, scores, k_eff) =
            knn_frame_classify(&train, &labels, &test, k, classes).unwrap();
        // oracle: exhaustive sort per test row
        for r in 0..4 {
            let mut sims: Vec<(f64, usize)> = (0..n)
                .map(|i| (cosine(test.row(r), train.row(i)), i))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; classes + 1];
            for &(_, i) in sims.iter().take(k_eff) {
                votes[labels[i]] += 1;
            }
            let best = votes
                .iter()
                .enumerate()
                .max_by(|(ca, va), (cb, vb)| va.cmp(vb).then(cb.cmp(ca)))
                .unwrap()
                .0;
            assert_eq!(pred[r], best);
            for (c, &v) in votes.iter().enumerate() {
                assert_eq!(scores.at2(r, c), v as f64 / k_eff as f64);
            }
        }
    }
}
