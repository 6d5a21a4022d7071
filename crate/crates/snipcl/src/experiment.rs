//! Desk-scale experiment driver: the pretraining loop, frozen-feature
//! linear probes, and the three-arm directional comparison
//! (random features vs. global-only pretraining vs. the full method).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{EvalConfig, RunConfig};
use crate::data::{
    generate_synthetic_dataset, preprocess_sequence, segments_from_labels, SegmentAnnotation,
    SkeletonSequence,
};
use crate::encoder::{encode, EncoderConfig, GraphAdjacency};
use crate::eval::{map_report, nms, threshold_segments, EvalReport, Segment};
use crate::params::{Bound, Params, Sgd};
use crate::pretrain::{pretrain_step, PretrainError, PretrainState};
use crate::rng::stream;
use crate::tensor::{Tape, Tensor, TensorError};

/// Root joint and the shoulder pair used by sequence preprocessing.
pub const ROOT_JOINT: usize = 0;
pub const AXIS_JOINTS: (usize, usize) = (3, 4);

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error("experiment setup error: {0}")]
    Setup(String),
}

/// One row of the pretraining loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub l_global: f64,
    pub l_dense: f64,
    pub l_total: f64,
}

/// CSV for the loss curve. The dense column only appears when the dense
/// loss participates, so a global-only run visibly lacks it.
pub fn loss_curves_csv(rows: &[LossRow], dense_enabled: bool) -> String {
    let mut out = String::from(if dense_enabled {
        "step,l_global,l_dense,l_total\n"
    } else {
        "step,l_global,l_total\n"
    });
    for r in rows {
        if dense_enabled {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.step, r.l_global, r.l_dense, r.l_total
            ));
        } else {
            out.push_str(&format!("{},{},{}\n", r.step, r.l_global, r.l_total));
        }
    }
    out
}

/// Full pretraining loop: shuffled batches each epoch, optional 10x
/// learning-rate drop at 75% of the epochs.
pub fn pretrain_run(
    seqs: &[SkeletonSequence],
    cfg: &RunConfig,
    seed: u64,
) -> Result<(PretrainState, Vec<LossRow>), ExperimentError> {
    if seqs.is_empty() {
        return Err(ExperimentError::Setup("pretraining needs at least one sequence".into()));
    }
    let adj = GraphAdjacency::lite_body(seqs[0].j());
    let mut init_rng = stream(seed, "init");
    let mut state = PretrainState::init(&cfg.encoder, &cfg.pretrain, &mut init_rng);
    let mut step_rng = stream(seed, "pretrain");
    let mut order_rng = stream(seed, "batch-order");
    let mut rows = Vec::new();
    let mut step = 0;
    let decay_epoch = (cfg.pretrain.epochs * 3) / 4;
    for epoch in 0..cfg.pretrain.epochs {
        if cfg.pretrain.lr_step_decay && epoch == decay_epoch && epoch > 0 {
            state.opt.lr *= 0.1;
        }
        let mut idx: Vec<usize> = (0..seqs.len()).collect();
        idx.shuffle(&mut order_rng);
        for chunk in idx.chunks(cfg.pretrain.batch_size) {
            let batch: Vec<SkeletonSequence> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let stats = pretrain_step(
                &batch,
                &mut state,
                &cfg.encoder,
                &cfg.pretrain,
                &adj,
                &cfg.augment,
                &mut step_rng,
            )?;
            step += 1;
            rows.push(LossRow {
                step,
                l_global: stats.l_global,
                l_dense: stats.l_dense,
                l_total: stats.l_total,
            });
        }
    }
    Ok((state, rows))
}

/// Frozen per-frame features for the linear probe: every encoder level's
/// intermediate, linearly upsampled back to the sequence length and
/// concatenated along channels. No learned parameters beyond the encoder.
pub fn probe_features(
    params: &Params,
    enc_cfg: &EncoderConfig,
    adj: &GraphAdjacency,
    seq: &SkeletonSequence,
) -> Result<Tensor, ExperimentError> {
    let mut tape = Tape::new();
    let x = tape.constant(seq.joints.clone());
    let bound = Bound::bind(&mut tape, params, false);
    let (_, intermediates) = encode(&mut tape, x, &bound, enc_cfg, adj)?;
    let t = seq.t();
    let mut ups = Vec::with_capacity(intermediates.len());
    for v in intermediates {
        ups.push(tape.upsample_linear(v, t)?);
    }
    let cat = tape.concat_channels(&ups)?;
    Ok(tape.value(cat).clone())
}

/// Per-channel mean and standard deviation over every frame of the given
/// sequences; the deviation is floored to keep division safe.
pub fn feature_stats(feats: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
    let c = feats[0].shape()[1];
    let mut mean = vec![0.0; c];
    let mut count = 0usize;
    for f in feats {
        for r in 0..f.shape()[0] {
            for (m, v) in mean.iter_mut().zip(f.row(r)) {
                *m += v;
            }
        }
        count += f.shape()[0];
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0; c];
    for f in feats {
        for r in 0..f.shape()[0] {
            for ((s, v), m) in var.iter_mut().zip(f.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std = var
        .into_iter()
        .map(|s| (s / count as f64).sqrt().max(1e-6))
        .collect();
    (mean, std)
}

/// In-place standardization with precomputed statistics.
pub fn apply_feature_stats(feats: &mut [Tensor], mean: &[f64], std: &[f64]) {
    let c = mean.len();
    for f in feats {
        for (i, v) in f.data_mut().iter_mut().enumerate() {
            let ch = i % c;
            *v = (*v - mean[ch]) / std[ch];
        }
    }
}

/// Multinomial logistic regression on frozen frame features, trained
/// full-batch with SGD. Returns the weight matrix and bias.
pub fn train_linear_probe(
    feats: &[Tensor],
    labels: &[Vec<usize>],
    num_classes: usize,
    steps: usize,
    lr: f64,
) -> Result<(Tensor, Tensor), ExperimentError> {
    if feats.is_empty() || feats.len() != labels.len() {
        return Err(ExperimentError::Setup("probe needs matching features and labels".into()));
    }
    let c = feats[0].shape()[1];
    let mut all_rows = Vec::new();
    let mut all_labels = Vec::new();
    for (f, l) in feats.iter().zip(labels) {
        if f.shape()[0] != l.len() {
            return Err(ExperimentError::Setup(format!(
                "feature rows {} != label count {}",
                f.shape()[0],
                l.len()
            )));
        }
        all_rows.extend_from_slice(f.data());
        all_labels.extend_from_slice(l);
    }
    let x = Tensor::new(vec![all_labels.len(), c], all_rows)?;
    let mut w = Tensor::zeros(&[c, num_classes + 1]);
    let mut b = Tensor::zeros(&[num_classes + 1]);
    let mut opt = Sgd::new(lr, 0.9, 1e-4);
    let mut params = Params::new();
    params.push("probe.w", w.clone());
    params.push("probe.b", b.clone());
    for _ in 0..steps {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bound = Bound::bind(&mut tape, &params, true);
        let logits = tape.matmul(xv, bound.var("probe.w"))?;
        let logits = tape.add_bias(logits, bound.var("probe.b"))?;
        let logp = tape.log_softmax_rows(logits)?;
        let loss = tape.nll_mean(logp, &all_labels)?;
        tape.backward(loss)?;
        let grads = bound.grads(&tape);
        opt.step(&mut params, &grads);
    }
    w = params.get("probe.w").unwrap().clone();
    b = params.get("probe.b").unwrap().clone();
    Ok((w, b))
}

/// Per-frame class probabilities under a trained probe.
pub fn probe_probs(feats: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, ExperimentError> {
    let (t, c) = (feats.shape()[0], feats.shape()[1]);
    let k1 = w.shape()[1];
    let mut out = vec![0.0; t * k1];
    for r in 0..t {
        let row = feats.row(r);
        let mut logits: Vec<f64> = (0..k1)
            .map(|k| {
                b.data()[k] + (0..c).map(|i| row[i] * w.at2(i, k)).sum::<f64>()
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for l in logits.iter_mut() {
            *l = (*l - m).exp() / z;
        }
        out[r * k1..(r + 1) * k1].copy_from_slice(&logits);
    }
    Ok(Tensor::new(vec![t, k1], out)?)
}

/// Localization metrics from per-sequence probability maps: candidate
/// segments at every threshold, per-class NMS, then the mAP report.
pub fn localize_and_score(
    probs_per_seq: &[Tensor],
    labels_per_seq: &[Vec<usize>],
    eval_cfg: &EvalConfig,
) -> Result<EvalReport, ExperimentError> {
    let mut preds: Vec<(usize, Segment)> = Vec::new();
    let mut gts: Vec<(usize, SegmentAnnotation)> = Vec::new();
    for (i, (probs, labels)) in probs_per_seq.iter().zip(labels_per_seq).enumerate() {
        let cands = threshold_segments(probs, &eval_cfg.segment_thresholds)?;
        for s in nms(&cands, eval_cfg.nms_iou) {
            preds.push((i, s));
        }
        for g in segments_from_labels(labels) {
            gts.push((i, g));
        }
    }
    Ok(map_report(&preds, &gts, &eval_cfg.tiou_thresholds))
}

/// The three comparison arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    /// Probe on a randomly initialized, untrained encoder.
    RandomInit,
    /// Probe after pretraining with the global loss only.
    GlobalOnly,
    /// Probe after pretraining with global + dense losses.
    FullMethod,
}

impl Arm {
    pub fn key(self) -> &'static str {
        match self {
            Arm::RandomInit => "a_random_init",
            Arm::GlobalOnly => "b_global_only",
            Arm::FullMethod => "c_full_method",
        }
    }
}

/// Number of full-batch probe steps and their learning rate.
pub const PROBE_STEPS: usize = 120;
pub const PROBE_LR: f64 = 0.5;

/// Runs one arm for one seed and returns (avg mAP, pretraining curve).
pub fn run_arm(
    train: &[SkeletonSequence],
    test: &[SkeletonSequence],
    cfg: &RunConfig,
    seed: u64,
    arm: Arm,
) -> Result<(f64, Vec<LossRow>), ExperimentError> {
    let mut arm_cfg = cfg.clone();
    match arm {
        Arm::RandomInit => {}
        Arm::GlobalOnly => {
            arm_cfg.pretrain.lambda = 0.0;
            arm_cfg.pretrain.dense_enabled = false;
        }
        Arm::FullMethod => {}
    }
    let adj = GraphAdjacency::lite_body(train[0].j());
    let (params, rows) = match arm {
        Arm::RandomInit => {
            let mut init_rng = stream(seed, "init");
            let state = PretrainState::init(&arm_cfg.encoder, &arm_cfg.pretrain, &mut init_rng);
            (state.query, Vec::new())
        }
        _ => {
            let (state, rows) = pretrain_run(train, &arm_cfg, seed)?;
            (state.query, rows)
        }
    };
    let feats = |seqs: &[SkeletonSequence]| -> Result<Vec<Tensor>, ExperimentError> {
        seqs.iter()
            .map(|s| probe_features(&params, &arm_cfg.encoder, &adj, s))
            .collect()
    };
    let mut train_feats = feats(train)?;
    let mut test_feats = feats(test)?;
    // standardize with training statistics so the probe sees comparable
    // scales regardless of how the encoder was (or wasn't) trained
    let (mean, std) = feature_stats(&train_feats);
    apply_feature_stats(&mut train_feats, &mean, &std);
    apply_feature_stats(&mut test_feats, &mean, &std);
    let train_labels: Vec<Vec<usize>> = train.iter().map(|s| s.frame_labels.clone()).collect();
    let test_labels: Vec<Vec<usize>> = test.iter().map(|s| s.frame_labels.clone()).collect();
    let (w, b) = train_linear_probe(
        &train_feats,
        &train_labels,
        cfg.data.num_classes,
        PROBE_STEPS,
        PROBE_LR,
    )?;
    let probs: Vec<Tensor> = test_feats
        .iter()
        .map(|f| probe_probs(f, &w, &b))
        .collect::<Result<_, _>>()?;
    let report = localize_and_score(&probs, &test_labels, &cfg.eval)?;
    Ok((report.avg_map, rows))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArmResult {
    /// Seed (as a string key for stable JSON) -> linear-probe avg mAP.
    pub per_seed: BTreeMap<String, f64>,
    pub median: f64,
}

/// Outcome of the three-arm comparison, written as report.json.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentReport {
    pub seeds: Vec<u64>,
    pub arms: BTreeMap<String, ArmResult>,
    /// Median full-method mAP minus median random-init mAP, in points.
    pub gap_points: f64,
    /// Medians satisfy full >= global-only >= random-init.
    pub ordering_ok: bool,
    /// Gap of at least five mAP points.
    pub gap_ok: bool,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Deterministic train/test split: every fourth sequence is held out.
pub fn split_dataset(seqs: Vec<SkeletonSequence>) -> (Vec<SkeletonSequence>, Vec<SkeletonSequence>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in seqs.into_iter().enumerate() {
        if i % 4 == 3 {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    (train, test)
}

/// Generates and preprocesses the experiment corpus. The corpus is fixed
/// by `cfg.data.seed`; experiment seeds only vary initialization and
/// training, so arm differences are not confounded by dataset difficulty.
pub fn prepared_dataset(cfg: &RunConfig) -> Result<Vec<SkeletonSequence>, ExperimentError> {
    let raw = generate_synthetic_dataset(&cfg.data)?;
    raw.into_iter()
        .map(|(s, _)| Ok(preprocess_sequence(&s, ROOT_JOINT, AXIS_JOINTS)?.0))
        .collect()
}

/// The full three-arm, multi-seed comparison.
pub fn run_experiment(cfg: &RunConfig, seeds: &[u64]) -> Result<ExperimentReport, ExperimentError> {
    if seeds.is_empty() {
        return Err(ExperimentError::Setup("experiment needs at least one seed".into()));
    }
    let arms = [Arm::RandomInit, Arm::GlobalOnly, Arm::FullMethod];
    let mut results: BTreeMap<String, ArmResult> = BTreeMap::new();
    for arm in arms {
        results.insert(
            arm.key().to_string(),
            ArmResult {
                per_seed: BTreeMap::new(),
                median: 0.0,
            },
        );
    }
    let seqs = prepared_dataset(cfg)?;
    let (train, test) = split_dataset(seqs);
    for &seed in seeds {
        for arm in arms {
            let (avg_map, _) = run_arm(&train, &test, cfg, seed, arm)?;
            results
                .get_mut(arm.key())
                .unwrap()
                .per_seed
                .insert(seed.to_string(), avg_map);
        }
    }
    for r in results.values_mut() {
        let vals: Vec<f64> = r.per_seed.values().cloned().collect();
        r.median = median(&vals);
    }
    let (a, b, c) = (
        results[Arm::RandomInit.key()].median,
        results[Arm::GlobalOnly.key()].median,
        results[Arm::FullMethod.key()].median,
    );
    let gap_points = (c - a) * 100.0;
    Ok(ExperimentReport {
        seeds: seeds.to_vec(),
        arms: results,
        gap_points,
        ordering_ok: c >= b && b >= a,
        gap_ok: gap_points >= 5.0,
    })
}

/// Per-frame class probabilities of a trained model (encoder + fusion or
/// bypass + head) on one sequence.
pub fn model_frame_probs(
    params: &Params,
    enc_cfg: &EncoderConfig,
    fus_cfg: &crate::fusion::FusionConfig,
    adj: &GraphAdjacency,
    seq: &SkeletonSequence,
) -> Result<Tensor, ExperimentError> {
    let mut tape = Tape::new();
    let x = tape.constant(seq.joints.clone());
    let bound = Bound::bind(&mut tape, params, false);
    let f = crate::fusion::fused_features(&mut tape, x, &bound, enc_cfg, fus_cfg, adj)?;
    let logits = crate::fusion::classify_frames(&mut tape, f, &bound)?;
    let logp = tape.log_softmax_rows(logits)?;
    let lp = tape.value(logp);
    let data: Vec<f64> = lp.data().iter().map(|v| v.exp()).collect();
    Ok(Tensor::new(lp.shape().to_vec(), data)?)
}

/// Writes report.json and report.csv atomically, plus loss_curves.csv
/// when a loss curve is supplied.
pub fn emit_metrics(
    report: &EvalReport,
    curves_csv: Option<&str>,
    out_dir: &std::path::Path,
) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| ExperimentError::Setup(format!("cannot create {}: {e}", out_dir.display())))?;
    let json = serde_json::to_vec_pretty(report)
        .map_err(|e| ExperimentError::Setup(format!("report serialization failed: {e}")))?;
    let write = |name: &str, bytes: &[u8]| {
        crate::checkpoint::write_atomic(&out_dir.join(name), bytes)
            .map_err(|e| ExperimentError::Setup(e.to_string()))
    };
    write("report.json", &json)?;
    write("report.csv", report.to_csv().as_bytes())?;
    if let Some(csv) = curves_csv {
        write("loss_curves.csv", csv.as_bytes())?;
    }
    Ok(())
}

/// Desk-scale defaults for the directional experiment: a dataset large
/// enough to be meaningful but small enough for a laptop CPU.
pub fn desk_experiment_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.num_sequences = 200;
    cfg.data.t = 300;
    cfg.data.num_classes = 4;
    // fixed benchmark corpus; experiment seeds vary training only
    cfg.data.seed = 1;
    // Heavy measurement noise: random projections of the raw frames carry
    // it straight into the probe, while pretraining under even stronger
    // coordinate jitter forces features onto the smooth motion structure.
    cfg.data.noise_std = 0.25;
    cfg.augment.jitter_std = 0.3;
    cfg.augment.crop_min_fraction = 0.85;
    cfg.encoder.channels = vec![8, 16, 32];
    cfg.pretrain.epochs = 10;
    cfg
}
