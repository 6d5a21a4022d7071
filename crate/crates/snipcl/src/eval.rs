//! Segment-level postprocessing and evaluation: thresholded segment
//! generation, per-class NMS, average precision over tIoU thresholds, and
//! cosine-KNN frame classification on frozen features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::SegmentAnnotation;
use crate::tensor::{cosine, Tensor, TensorError};

/// A scored temporal prediction; `end` is exclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// Temporal intersection over union of two frame intervals.
pub fn tiou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Candidate segments from per-frame class probabilities: for each action
/// class and each threshold, maximal runs of frames at or above the
/// threshold, scored by the mean class probability over the run.
/// Candidates from all thresholds are pooled.
pub fn threshold_segments(
    probs: &Tensor,
    thresholds: &[f64],
) -> Result<Vec<Segment>, TensorError> {
    if thresholds.is_empty() {
        return Err(TensorError::Config("empty threshold list".into()));
    }
    if let Some(&bad) = thresholds.iter().find(|t| !(0.0 < **t && **t < 1.0)) {
        return Err(TensorError::Config(format!(
            "segment thresholds must lie in (0, 1), got {bad}"
        )));
    }
    if probs.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "threshold_segments",
            lhs: probs.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (t, k1) = (probs.shape()[0], probs.shape()[1]);
    for r in 0..t {
        let s: f64 = probs.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(TensorError::Config(format!(
                "probability row {r} sums to {s}, expected 1"
            )));
        }
    }
    let mut out = Vec::new();
    for class in 1..k1 {
        for &theta in thresholds {
            let mut run_start: Option<usize> = None;
            for r in 0..=t {
                let above = r < t && probs.at2(r, class) >= theta;
                match (run_start, above) {
                    (None, true) => run_start = Some(r),
                    (Some(s), false) => {
                        let score = (s..r).map(|i| probs.at2(i, class)).sum::<f64>()
                            / (r - s) as f64;
                        out.push(Segment {
                            class_id: class,
                            start: s,
                            end: r,
                            score,
                        });
                        run_start = None;
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(out)
}

/// Greedy per-class non-maximum suppression. Ties are broken by earlier
/// start, then by longer segment.
pub fn nms(candidates: &[Segment], iou_threshold: f64) -> Vec<Segment> {
    debug_assert!(0.0 < iou_threshold && iou_threshold < 1.0);
    let mut sorted: Vec<&Segment> = candidates.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.start.cmp(&b.start))
            .then(b.len().cmp(&a.len()))
    });
    let mut kept: Vec<Segment> = Vec::new();
    for cand in sorted {
        let suppressed = kept.iter().any(|k| {
            k.class_id == cand.class_id
                && tiou((k.start, k.end), (cand.start, cand.end)) > iou_threshold
        });
        if !suppressed {
            kept.push(cand.clone());
        }
    }
    kept
}

/// Detection AP for a single class at one tIoU threshold: predictions and
/// ground truths are tagged with a sequence index so matching never crosses
/// sequences. All-points interpolation of the PR curve.
pub fn average_precision(
    preds: &[(usize, Segment)],
    gts: &[(usize, SegmentAnnotation)],
    tiou_threshold: f64,
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
    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(preds.len());
    for &pi in &order {
        let (seq, seg) = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gseq, gt)) in gts.iter().enumerate() {
            if matched[gi] || gseq != seq || gt.class_id != seg.class_id {
                continue;
            }
            let ov = tiou((seg.start, seg.end), (gt.start, gt.end));
            if ov >= tiou_threshold && best.map_or(true, |(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    // precision-recall curve, all-points interpolation
    let total_gt = gts.len() as f64;
    let mut precisions = Vec::with_capacity(tp.len());
    let mut recalls = Vec::with_capacity(tp.len());
    let (mut cum_tp, mut cum_fp) = (0.0f64, 0.0f64);
    for &hit in &tp {
        if hit {
            cum_tp += 1.0;
        } else {
            cum_fp += 1.0;
        }
        precisions.push(cum_tp / (cum_tp + cum_fp));
        recalls.push(cum_tp / total_gt);
    }
    // make precision monotone non-increasing from the right
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precisions.iter().zip(&recalls) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Per-class AP at each tIoU threshold plus the per-threshold and average
/// mAP. Keys are formatted thresholds ("0.1", ...).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub per_class: BTreeMap<usize, BTreeMap<String, f64>>,
    pub per_tiou_map: BTreeMap<String, f64>,
    pub avg_map: f64,
}

pub const DEFAULT_TIOU_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

fn tiou_key(t: f64) -> String {
    format!("{t:.1}")
}

/// Builds the full report. Classes absent from the ground truth are
/// excluded from every mean.
pub fn map_report(
    preds: &[(usize, Segment)],
    gts: &[(usize, SegmentAnnotation)],
    thresholds: &[f64],
) -> EvalReport {
    let mut classes: Vec<usize> = gts.iter().map(|(_, g)| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class: BTreeMap<usize, BTreeMap<String, f64>> = BTreeMap::new();
    let mut per_tiou_map: BTreeMap<String, f64> = BTreeMap::new();
    for &thr in thresholds {
        let mut aps = Vec::with_capacity(classes.len());
        for &class in &classes {
            let cls_preds: Vec<(usize, Segment)> = preds
                .iter()
                .filter(|(_, s)| s.class_id == class)
                .cloned()
                .collect();
            let cls_gts: Vec<(usize, SegmentAnnotation)> = gts
                .iter()
                .filter(|(_, g)| g.class_id == class)
                .cloned()
                .collect();
            let ap = average_precision(&cls_preds, &cls_gts, thr);
            per_class.entry(class).or_default().insert(tiou_key(thr), ap);
            aps.push(ap);
        }
        let map = if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        };
        per_tiou_map.insert(tiou_key(thr), map);
    }
    let avg_map = if per_tiou_map.is_empty() {
        0.0
    } else {
        per_tiou_map.values().sum::<f64>() / per_tiou_map.len() as f64
    };
    EvalReport {
        per_class,
        per_tiou_map,
        avg_map,
    }
}

impl EvalReport {
    /// Flat CSV: one row per (class, tiou) plus mAP and average rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,class,tiou,value\n");
        for (class, row) in &self.per_class {
            for (t, ap) in row {
                out.push_str(&format!("ap,{class},{t},{ap}\n"));
            }
        }
        for (t, map) in &self.per_tiou_map {
            out.push_str(&format!("map,,{t},{map}\n"));
        }
        out.push_str(&format!("avg_map,,,{}\n", self.avg_map));
        out
    }
}

/// Cosine-KNN over frozen features: per test frame, majority vote among the
/// K nearest training frames; per-class score is the vote fraction.
/// Returns (labels, scores T x (num_classes+1), clamped_k).
pub fn knn_frame_classify(
    train_feats: &Tensor,
    train_labels: &[usize],
    test_feats: &Tensor,
    k: usize,
    num_classes: usize,
) -> Result<(Vec<usize>, Tensor, usize), TensorError> {
    let n = train_feats.shape()[0];
    if n == 0 || k == 0 {
        return Err(TensorError::Config("knn needs K >= 1 and training frames".into()));
    }
    if train_labels.len() != n || train_feats.shape()[1] != test_feats.shape()[1] {
        return Err(TensorError::ShapeMismatch {
            op: "knn_frame_classify",
            lhs: train_feats.shape().to_vec(),
            rhs: test_feats.shape().to_vec(),
        });
    }
    if let Some(&bad) = train_labels.iter().find(|&&l| l > num_classes) {
        return Err(TensorError::Config(format!(
            "knn label {bad} exceeds num_classes {num_classes}"
        )));
    }
    let k_eff = k.min(n);
    let t = test_feats.shape()[0];
    let mut labels = Vec::with_capacity(t);
    let mut scores = vec![0.0; t * (num_classes + 1)];
    for r in 0..t {
        let q = test_feats.row(r);
        let mut sims: Vec<(f64, usize)> = (0..n)
            .map(|i| (cosine(q, train_feats.row(i)), i))
            .collect();
        // ties broken by training index for determinism
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; num_classes + 1];
        for &(_, i) in sims.iter().take(k_eff) {
            votes[train_labels[i]] += 1;
        }
        let best = (0..=num_classes)
            .max_by(|&a, &b| votes[a].cmp(&votes[b]).then(b.cmp(&a)))
            .unwrap();
        labels.push(best);
        for (c, &v) in votes.iter().enumerate() {
            scores[r * (num_classes + 1) + c] = v as f64 / k_eff as f64;
        }
    }
    let scores = Tensor::new(vec![t, num_classes + 1], scores)?;
    Ok((labels, scores, k_eff))
}

#[cfg(test)]
mod tests;
