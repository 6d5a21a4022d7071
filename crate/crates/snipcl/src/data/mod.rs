//! Synthetic untrimmed skeleton sequences: generation, preprocessing,
//! augmentation, and the on-disk dataset format.

mod io;

pub use io::{load_dataset, save_dataset, Dataset, DatasetError};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, RngStream};
use crate::tensor::{Tensor, TensorError};

/// One untrimmed sequence: T x J x 3 joint coordinates in meters with a
/// per-frame class label (0 = background).
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub joints: Tensor,
    pub frame_labels: Vec<usize>,
    pub fps: f64,
}

impl SkeletonSequence {
    pub fn t(&self) -> usize {
        self.joints.shape()[0]
    }

    pub fn j(&self) -> usize {
        self.joints.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_sequences: usize,
    pub t: usize,
    pub j: usize,
    pub num_classes: usize,
    pub background_fraction: f64,
    pub noise_std: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_sequences: 64,
            t: 300,
            j: 8,
            num_classes: 4,
            background_fraction: 0.3,
            noise_std: 0.02,
            fps: 30.0,
            seed: 0,
        }
    }
}

const MIN_SEGMENT_FRAMES: usize = 15;

/// Rest pose for the lite 8-joint body; extra joints interpolate on a chain.
fn rest_pose(j: usize) -> Vec<[f64; 3]> {
    // root, spine, head, l-shoulder, r-shoulder, l-hand, r-hand, foot
    let base: [[f64; 3]; 8] = [
        [0.0, 0.0, 1.0],
        [0.0, 0.0, 1.3],
        [0.0, 0.0, 1.6],
        [-0.2, 0.0, 1.45],
        [0.2, 0.0, 1.45],
        [-0.45, 0.0, 1.2],
        [0.45, 0.0, 1.2],
        [0.0, 0.0, 0.0],
    ];
    (0..j)
        .map(|i| {
            if i < 8 {
                base[i]
            } else {
                let f = i as f64 / j as f64;
                [0.1 * f, 0.1, 1.0 + 0.5 * f]
            }
        })
        .collect()
}

/// Per-class parametric joint trajectories. Class ids start at 1;
/// class 0 is low-motion background drift.
fn motion_offset(
    class: usize,
    frame_in_seg: usize,
    joint: usize,
    fps: f64,
    phase: f64,
    freq_jitter: f64,
    amp_jitter: f64,
) -> [f64; 3] {
    let t = frame_in_seg as f64 / fps;
    let side = if joint % 2 == 0 { 1.0 } else { -1.0 };
    match class {
        // oscillatory "walk": limbs swing antiphase at ~1.5 Hz
        1 => {
            let w = 2.0 * std::f64::consts::PI * 1.5 * freq_jitter;
            let a = 0.25 * amp_jitter;
            [
                a * (w * t + phase).sin() * side,
                a * 0.5 * (w * t + phase).cos(),
                0.05 * (2.0 * w * t).sin(),
            ]
        }
        // ramped "sit": upper body folds down and leans forward relative to
        // the root, then holds — survives per-frame root centering
        2 => {
            let ramp = 1.0 / (1.0 + (-15.0 * (t - 0.2)).exp());
            match joint {
                0 => [0.0, 0.0, 0.0],
                7 => [0.15 * amp_jitter * ramp, 0.0, 0.25 * amp_jitter * ramp],
                _ => [0.0, 0.2 * amp_jitter * ramp, -0.4 * amp_jitter * ramp],
            }
        }
        // burst "jump": periodic crouch-and-extend, limbs move against the
        // root rather than with it
        3 => {
            let period = 1.2 / freq_jitter;
            let tp = (t + phase / (2.0 * std::f64::consts::PI)) % period;
            let burst = (-((tp - 0.3) / 0.12).powi(2)).exp();
            let a = amp_jitter * burst;
            match joint {
                0 => [0.0, 0.0, 0.0],
                7 => [0.0, 0.0, 0.45 * a], // leg tuck
                5 | 6 => [0.0, 0.0, 0.35 * a], // arms swing up
                _ => [0.0, 0.0, 0.12 * a],
            }
        }
        // low-amplitude "wave": only hand-like joints oscillate fast
        4 => {
            let w = 2.0 * std::f64::consts::PI * 4.0 * freq_jitter;
            let a = if joint == 5 || joint == 6 { 0.18 } else { 0.01 };
            [
                a * amp_jitter * (w * t + phase).sin(),
                a * amp_jitter * (w * t + phase).cos(),
                0.0,
            ]
        }
        // any further classes: slow figure-eight sway scaled by class index
        c if c >= 5 => {
            let w = 2.0 * std::f64::consts::PI * (0.5 + 0.3 * c as f64) * freq_jitter;
            let a = 0.15 * amp_jitter;
            [a * (w * t).sin(), a * (2.0 * w * t).sin() * side, 0.0]
        }
        // background: barely moves
        _ => {
            let w = 2.0 * std::f64::consts::PI * 0.2;
            [0.008 * (w * t + phase).sin(), 0.008 * (w * t).cos(), 0.0]
        }
    }
}

/// Splits `total` into `parts` chunks, each at least `min_len`, randomly.
fn random_partition(total: usize, parts: usize, min_len: usize, rng: &mut RngStream) -> Vec<usize> {
    let slack = total - parts * min_len;
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.gen_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(min_len + c - prev);
        prev = c;
    }
    out.push(min_len + slack - prev);
    out
}

/// Generates the full synthetic dataset deterministically from the seed.
pub fn generate_synthetic_dataset(
    cfg: &SyntheticConfig,
) -> Result<Vec<(SkeletonSequence, Vec<SegmentAnnotation>)>, TensorError> {
    if cfg.num_sequences == 0 || cfg.t == 0 || cfg.j < 2 || cfg.num_classes == 0 {
        return Err(TensorError::Config("all synthetic counts must be >= 1, J >= 2".into()));
    }
    if !(0.0..1.0).contains(&cfg.background_fraction) {
        return Err(TensorError::Config(format!(
            "background_fraction must be in [0, 1), got {}",
            cfg.background_fraction
        )));
    }
    let max_segments = 6.min(cfg.t / MIN_SEGMENT_FRAMES).max(1);
    let action_budget = ((cfg.t as f64) * (1.0 - cfg.background_fraction)).round() as usize;
    if action_budget < 2 * MIN_SEGMENT_FRAMES {
        return Err(TensorError::Config(format!(
            "T={} too small for two {MIN_SEGMENT_FRAMES}-frame segments at background_fraction {}",
            cfg.t, cfg.background_fraction
        )));
    }
    (0..cfg.num_sequences)
        .map(|i| Ok(generate_sequence(cfg, i, max_segments, action_budget)))
        .collect()
}

fn generate_sequence(
    cfg: &SyntheticConfig,
    index: usize,
    max_segments: usize,
    action_budget: usize,
) -> (SkeletonSequence, Vec<SegmentAnnotation>) {
    let mut rng = stream(cfg.seed, &format!("data/{index}"));
    let n_seg = rng.gen_range(2..=max_segments.max(2).min(action_budget / MIN_SEGMENT_FRAMES));
    let seg_lens = random_partition(action_budget, n_seg, MIN_SEGMENT_FRAMES, &mut rng);
    let background_total = cfg.t - action_budget;
    let gaps = if background_total == 0 {
        vec![0; n_seg + 1]
    } else {
        random_partition(background_total + n_seg + 1, n_seg + 1, 1, &mut rng)
            .into_iter()
            .map(|g| g - 1)
            .collect()
    };

    // round-robin over classes guarantees coverage, shuffled for variety
    let mut classes: Vec<usize> = (0..n_seg).map(|k| 1 + (index + k) % cfg.num_classes).collect();
    classes.shuffle(&mut rng);

    let mut frame_labels = vec![0usize; cfg.t];
    let mut annotations = Vec::with_capacity(n_seg);
    let mut cursor = gaps[0];
    for (k, (&len, &class)) in seg_lens.iter().zip(&classes).enumerate() {
        for t in cursor..cursor + len {
            frame_labels[t] = class;
        }
        annotations.push(SegmentAnnotation {
            class_id: class,
            start: cursor,
            end: cursor + len,
        });
        cursor += len + gaps[k + 1];
    }

    let pose = rest_pose(cfg.j);
    let heading: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let (ch, sh) = (heading.cos(), heading.sin());
    let offset = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0];
    let phase: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let freq_jitter: f64 = rng.gen_range(0.85..1.15);
    let amp_jitter: f64 = rng.gen_range(0.8..1.2);

    let mut seg_start = vec![0usize; cfg.t];
    {
        let mut start = 0;
        for t in 0..cfg.t {
            if t > 0 && frame_labels[t] != frame_labels[t - 1] {
                start = t;
            }
            seg_start[t] = start;
        }
    }

    let mut data = Vec::with_capacity(cfg.t * cfg.j * 3);
    for t in 0..cfg.t {
        let class = frame_labels[t];
        let local = t - seg_start[t];
        for (jj, rest) in pose.iter().enumerate() {
            let m = motion_offset(class, local, jj, cfg.fps, phase, freq_jitter, amp_jitter);
            let x = rest[0] + m[0];
            let y = rest[1] + m[1];
            let z = rest[2] + m[2];
            // global heading rotation about the vertical (z) axis plus offset
            let gx = ch * x - sh * y + offset[0];
            let gy = sh * x + ch * y + offset[1];
            let nx = gauss(&mut rng);
            let ny = gauss(&mut rng);
            let nz = gauss(&mut rng);
            data.push(gx + cfg.noise_std * nx);
            data.push(gy + cfg.noise_std * ny);
            data.push(z + cfg.noise_std * nz);
        }
    }
    let joints = Tensor::new(vec![cfg.t, cfg.j, 3], data).unwrap();
    (
        SkeletonSequence {
            joints,
            frame_labels,
            fps: cfg.fps,
        },
        annotations,
    )
}

fn gauss(rng: &mut RngStream) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Rebuilds segment annotations from frame labels (maximal non-background runs).
pub fn segments_from_labels(frame_labels: &[usize]) -> Vec<SegmentAnnotation> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < frame_labels.len() {
        if frame_labels[t] == 0 {
            t += 1;
            continue;
        }
        let class = frame_labels[t];
        let start = t;
        while t < frame_labels.len() && frame_labels[t] == class {
            t += 1;
        }
        out.push(SegmentAnnotation {
            class_id: class,
            start,
            end: t,
        });
    }
    out
}

/// Root-centering and shoulder alignment. Returns the processed sequence and
/// the number of frames whose rotation was skipped for a degenerate axis.
pub fn preprocess_sequence(
    x: &SkeletonSequence,
    root_joint: usize,
    axis_joints: (usize, usize),
) -> Result<(SkeletonSequence, usize), TensorError> {
    let (t, j) = (x.t(), x.j());
    if root_joint >= j || axis_joints.0 >= j || axis_joints.1 >= j {
        return Err(TensorError::Config(format!(
            "joint index out of range for J={j}"
        )));
    }
    let mut data = x.joints.data().to_vec();
    let mut skipped = 0usize;
    for ti in 0..t {
        let base = ti * j * 3;
        let root = [
            data[base + root_joint * 3],
            data[base + root_joint * 3 + 1],
            data[base + root_joint * 3 + 2],
        ];
        for jj in 0..j {
            for d in 0..3 {
                data[base + jj * 3 + d] -= root[d];
            }
        }
        let a = axis_joints.0 * 3;
        let b = axis_joints.1 * 3;
        let vx = data[base + b] - data[base + a];
        let vy = data[base + b + 1] - data[base + a + 1];
        let norm = (vx * vx + vy * vy).sqrt();
        if norm < 1e-9 {
            skipped += 1;
            continue;
        }
        let (c, s) = (vx / norm, vy / norm);
        // rotate by -angle about the vertical axis so the shoulder pair lies on x
        for jj in 0..j {
            let px = data[base + jj * 3];
            let py = data[base + jj * 3 + 1];
            data[base + jj * 3] = c * px + s * py;
            data[base + jj * 3 + 1] = -s * px + c * py;
        }
    }
    Ok((
        SkeletonSequence {
            joints: Tensor::new(vec![t, j, 3], data)?,
            frame_labels: x.frame_labels.clone(),
            fps: x.fps,
        },
        skipped,
    ))
}

/// Augmentation suite; each policy is independently switchable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub crop_resize: bool,
    pub crop_min_fraction: f64,
    pub rotate: bool,
    pub rotate_max_degrees: f64,
    pub jitter: bool,
    pub jitter_std: f64,
    pub joint_mask: bool,
    pub joint_mask_prob: f64,
    pub shear: bool,
    pub shear_magnitude: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            crop_resize: true,
            crop_min_fraction: 0.6,
            rotate: true,
            rotate_max_degrees: 30.0,
            jitter: true,
            jitter_std: 0.01,
            joint_mask: false,
            joint_mask_prob: 0.1,
            shear: true,
            shear_magnitude: 0.1,
        }
    }
}

impl AugmentPolicy {
    /// Zero-magnitude policy; augmentation becomes the identity.
    pub fn identity() -> Self {
        AugmentPolicy {
            crop_resize: false,
            rotate: false,
            jitter: false,
            joint_mask: false,
            shear: false,
            ..AugmentPolicy::default()
        }
    }
}

/// Nearest-index source frame for resampling a crop window back to length T.
pub fn crop_resample_index(t_out: usize, win_start: usize, win_len: usize, t: usize) -> usize {
    debug_assert!(win_len >= 1);
    let pos = if t <= 1 {
        0.0
    } else {
        t_out as f64 * (win_len - 1) as f64 / (t - 1) as f64
    };
    win_start + (pos.round() as usize).min(win_len - 1)
}

/// Applies the enabled policies in a fixed order. T, J, and label length
/// are preserved; labels follow the temporal resampling of the crop.
pub fn augment_sequence(
    x: &SkeletonSequence,
    policy: &AugmentPolicy,
    rng: &mut RngStream,
) -> Result<SkeletonSequence, TensorError> {
    let (t, j) = (x.t(), x.j());
    let mut joints = x.joints.data().to_vec();
    let mut labels = x.frame_labels.clone();

    if policy.crop_resize && t >= 2 {
        let min_len = ((t as f64) * policy.crop_min_fraction).round() as usize;
        let win_len = rng.gen_range(min_len.max(2)..=t);
        if win_len < 2 {
            return Err(TensorError::Config(
                "crop window shorter than 2 frames".into(),
            ));
        }
        let win_start = rng.gen_range(0..=t - win_len);
        let mut new_joints = vec![0.0; t * j * 3];
        let mut new_labels = vec![0usize; t];
        for to in 0..t {
            // linear interpolation for coordinates, nearest for labels
            let pos = if t <= 1 {
                0.0
            } else {
                to as f64 * (win_len - 1) as f64 / (t - 1) as f64
            };
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(win_len - 1);
            let frac = pos - i0 as f64;
            let s0 = (win_start + i0) * j * 3;
            let s1 = (win_start + i1) * j * 3;
            for k in 0..j * 3 {
                new_joints[to * j * 3 + k] = (1.0 - frac) * joints[s0 + k] + frac * joints[s1 + k];
            }
            new_labels[to] = labels[crop_resample_index(to, win_start, win_len, t)];
        }
        joints = new_joints;
        labels = new_labels;
    }

    if policy.rotate && policy.rotate_max_degrees > 0.0 {
        let axis = random_unit_axis(rng);
        let angle = rng.gen_range(0.0..policy.rotate_max_degrees.to_radians());
        let rot = axis_angle_matrix(axis, angle);
        apply_matrix(&mut joints, &rot);
    }

    if policy.shear && policy.shear_magnitude > 0.0 {
        let m = policy.shear_magnitude;
        let sh = [
            [1.0, rng.gen_range(-m..m), rng.gen_range(-m..m)],
            [rng.gen_range(-m..m), 1.0, rng.gen_range(-m..m)],
            [rng.gen_range(-m..m), rng.gen_range(-m..m), 1.0],
        ];
        apply_matrix(&mut joints, &sh);
    }

    if policy.jitter && policy.jitter_std > 0.0 {
        for v in joints.iter_mut() {
            *v += policy.jitter_std * gauss(rng);
        }
    }

    if policy.joint_mask {
        for jj in 0..j {
            if rng.gen_bool(policy.joint_mask_prob) {
                for ti in 0..t {
                    for d in 0..3 {
                        joints[(ti * j + jj) * 3 + d] = 0.0;
                    }
                }
            }
        }
    }

    Ok(SkeletonSequence {
        joints: Tensor::new(vec![t, j, 3], joints)?,
        frame_labels: labels,
        fps: x.fps,
    })
}

fn random_unit_axis(rng: &mut RngStream) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn axis_angle_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let (x, y, z) = (axis[0], axis[1], axis[2]);
    let (c, s) = (angle.cos(), angle.sin());
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn apply_matrix(joints: &mut [f64], m: &[[f64; 3]; 3]) {
    for p in joints.chunks_exact_mut(3) {
        let (x, y, z) = (p[0], p[1], p[2]);
        p[0] = m[0][0] * x + m[0][1] * y + m[0][2] * z;
        p[1] = m[1][0] * x + m[1][1] * y + m[1][2] * z;
        p[2] = m[2][0] * x + m[2][1] * y + m[2][2] * z;
    }
}

#[cfg(test)]
mod tests;
