//! Stage 2: U-shaped multiscale feature fusion with nested skip connections
//! and the frame-wise classification head, plus the finetuning step with
//! linear/full freeze modes.

use serde::{Deserialize, Serialize};

use crate::data::SkeletonSequence;
use crate::encoder::{encode, EncoderConfig, GraphAdjacency};
use crate::params::{Bound, Params, Sgd};
use crate::rng::RngStream;
use crate::tensor::{Padding, Tape, TensorError, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Hidden dimension d that every fused feature is projected to.
    pub d: usize,
    /// Kernel size of the projection convolution 𝓗.
    pub kernel: usize,
    /// Restrict the lattice to a plain U (single pass deep-to-shallow)
    /// instead of the full nested grid.
    pub plain_u: bool,
    /// When false the module is bypassed: the deepest feature is upsampled
    /// and channel-projected directly (the "w/o feature fusion" ablation).
    pub enabled: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            d: 512,
            kernel: 1,
            plain_u: false,
            enabled: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.d == 0 || self.kernel == 0 {
            return Err(TensorError::Config("fusion needs d >= 1 and kernel >= 1".into()));
        }
        Ok(())
    }
}

fn node_name(a: usize, b: usize) -> (String, String) {
    (format!("fuse.a{a}.b{b}.w"), format!("fuse.a{a}.b{b}.b"))
}

/// Channel width of lattice node Z_a^b given encoder channels.
fn node_width(channels: &[usize], d: usize, a: usize, b: usize) -> usize {
    if b == 0 {
        channels[a]
    } else {
        d
    }
}

/// Input width of the projection at node (a, b): all of Z_a^0..Z_a^{b-1}
/// plus the upsampled Z_{a+1}^{b-1}.
fn nested_input_width(channels: &[usize], d: usize, a: usize, b: usize) -> usize {
    (0..b).map(|s| node_width(channels, d, a, s)).sum::<usize>()
        + node_width(channels, d, a + 1, b - 1)
}

/// Adds fusion and head parameters to an existing tree.
pub fn init_fusion_params(
    p: &mut Params,
    channels: &[usize],
    cfg: &FusionConfig,
    num_classes: usize,
    rng: &mut RngStream,
) {
    let l = channels.len();
    let d = cfg.d;
    if cfg.enabled {
        if l == 1 {
            // degenerate U: a single channel projection
            let (w, b) = node_name(0, 1);
            p.init_uniform(&w, &[cfg.kernel, channels[0], d], cfg.kernel * channels[0], rng);
            p.init_zeros(&b, &[d]);
        } else if cfg.plain_u {
            for a in (0..l - 1).rev() {
                let up = if a == l - 2 { channels[l - 1] } else { d };
                let c_in = channels[a] + up;
                let (w, b) = node_name(a, 1);
                p.init_uniform(&w, &[cfg.kernel, c_in, d], cfg.kernel * c_in, rng);
                p.init_zeros(&b, &[d]);
            }
        } else {
            for b_step in 1..l {
                for a in 0..l - b_step {
                    let c_in = nested_input_width(channels, d, a, b_step);
                    let (w, b) = node_name(a, b_step);
                    p.init_uniform(&w, &[cfg.kernel, c_in, d], cfg.kernel * c_in, rng);
                    p.init_zeros(&b, &[d]);
                }
            }
        }
    } else {
        let c_e = *channels.last().unwrap();
        p.init_uniform("fuse.bypass.w", &[cfg.kernel, c_e, d], cfg.kernel * c_e, rng);
        p.init_zeros("fuse.bypass.b", &[d]);
    }
    p.init_uniform("head.w", &[d, num_classes + 1], d, rng);
    p.init_zeros("head.b", &[num_classes + 1]);
}

fn project(
    tape: &mut Tape,
    x: Var,
    bound: &Bound,
    a: usize,
    b: usize,
) -> Result<Var, TensorError> {
    let (w, bias) = node_name(a, b);
    let z = tape.conv1d(x, bound.var(&w), 1, Padding::Same)?;
    tape.add_bias(z, bound.var(&bias))
}

/// Builds the full triangular lattice; `grid[a][b]` is Z_a^b. Column 0 is
/// the encoder intermediates verbatim.
pub fn u_fuse_grid(
    tape: &mut Tape,
    intermediates: &[Var],
    bound: &Bound,
    cfg: &FusionConfig,
) -> Result<Vec<Vec<Var>>, TensorError> {
    cfg.validate()?;
    let l = intermediates.len();
    if l == 0 {
        return Err(TensorError::Config("u_fuse needs at least one level".into()));
    }
    for w in intermediates.windows(2) {
        let (shallow, deep) = (tape.value(w[0]).shape()[0], tape.value(w[1]).shape()[0]);
        if shallow < deep {
            return Err(TensorError::Config(format!(
                "intermediates must be ordered shallow (long) to deep (short): {shallow} < {deep}"
            )));
        }
    }
    let mut grid: Vec<Vec<Var>> = intermediates.iter().map(|&v| vec![v]).collect();
    if l == 1 {
        let z = project(tape, intermediates[0], bound, 0, 1)?;
        grid[0].push(z);
        return Ok(grid);
    }
    if cfg.plain_u {
        // single deep-to-shallow pass: each node sees only its own
        // intermediate and the upsampled node from below
        let mut below = intermediates[l - 1];
        for a in (0..l - 1).rev() {
            let t_a = tape.value(intermediates[a]).shape()[0];
            let up = tape.upsample_linear(below, t_a)?;
            let cat = tape.concat_channels(&[intermediates[a], up])?;
            below = project(tape, cat, bound, a, 1)?;
            grid[a].push(below);
        }
        return Ok(grid);
    }
    for b in 1..l {
        for a in 0..l - b {
            let t_a = tape.value(grid[a][0]).shape()[0];
            let up = tape.upsample_linear(grid[a + 1][b - 1], t_a)?;
            let mut inputs: Vec<Var> = grid[a][..b].to_vec();
            inputs.push(up);
            let cat = tape.concat_channels(&inputs)?;
            let z = project(tape, cat, bound, a, b)?;
            grid[a].push(z);
        }
    }
    Ok(grid)
}

/// Fused feature map at the original (pre-padding) resolution `t_out`.
pub fn u_fuse(
    tape: &mut Tape,
    intermediates: &[Var],
    bound: &Bound,
    cfg: &FusionConfig,
    t_out: usize,
) -> Result<Var, TensorError> {
    let grid = u_fuse_grid(tape, intermediates, bound, cfg)?;
    let top = *grid[0].last().unwrap();
    tape.truncate_rows(top, t_out)
}

/// Ablation bypass: upsample the deepest feature to `t_out` and project it
/// to d channels, skipping the lattice entirely.
pub fn fuse_bypass(
    tape: &mut Tape,
    deepest: Var,
    bound: &Bound,
    t_out: usize,
) -> Result<Var, TensorError> {
    let up = tape.upsample_linear(deepest, t_out)?;
    let z = tape.conv1d(up, bound.var("fuse.bypass.w"), 1, Padding::Same)?;
    tape.add_bias(z, bound.var("fuse.bypass.b"))
}

/// Encoder + fusion (or bypass) returning T x d features at the input's
/// original temporal length.
pub fn fused_features(
    tape: &mut Tape,
    x: Var,
    bound: &Bound,
    enc_cfg: &EncoderConfig,
    fus_cfg: &FusionConfig,
    adj: &GraphAdjacency,
) -> Result<Var, TensorError> {
    let t = tape.value(x).shape()[0];
    let (h, intermediates) = encode(tape, x, bound, enc_cfg, adj)?;
    if fus_cfg.enabled {
        u_fuse(tape, &intermediates, bound, fus_cfg, t)
    } else {
        fuse_bypass(tape, h, bound, t)
    }
}

/// Frame-wise logits from fused features via the linear head.
pub fn classify_frames(tape: &mut Tape, features: Var, bound: &Bound) -> Result<Var, TensorError> {
    let logits = tape.matmul(features, bound.var("head.w"))?;
    tape.add_bias(logits, bound.var("head.b"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// Only the classification head trains.
    Linear,
    /// Encoder, fusion, and head all train.
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    /// Fraction of labeled sequences used (semi-supervised protocol).
    pub label_fraction: f64,
    pub lr: f64,
    /// Learning-rate multiplier for the freshly initialized head.
    pub head_lr_multiplier: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::Linear,
            label_fraction: 1.0,
            lr: 0.1,
            head_lr_multiplier: 5.0,
            grad_clip: 1.0,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 8,
        }
    }
}

/// Deterministic subsample of sequence indices for semi-supervised runs.
/// Always selects at least one sequence for a valid fraction.
pub fn select_labeled(
    num_sequences: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>, TensorError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TensorError::Config(format!(
            "label fraction must be in (0, 1], got {fraction}"
        )));
    }
    if num_sequences == 0 {
        return Err(TensorError::Config("label fraction selects zero sequences".into()));
    }
    let take = ((num_sequences as f64 * fraction).ceil() as usize).clamp(1, num_sequences);
    let mut indices: Vec<usize> = (0..num_sequences).collect();
    let mut rng = crate::rng::stream(seed, "label-subsample");
    use rand::seq::SliceRandom;
    indices.shuffle(&mut rng);
    let mut chosen = indices[..take].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, Copy)]
pub struct FinetuneStats {
    pub cross_entropy: f64,
    pub frame_accuracy: f64,
}

pub struct FinetuneState {
    pub params: Params,
    pub opt: Sgd,
    pub head_lr_multiplier: f64,
    pub grad_clip: f64,
}

impl FinetuneState {
    pub fn new(params: Params, cfg: &FinetuneConfig) -> Self {
        FinetuneState {
            params,
            opt: Sgd::new(cfg.lr, cfg.sgd_momentum, cfg.weight_decay),
            head_lr_multiplier: cfg.head_lr_multiplier,
            grad_clip: cfg.grad_clip,
        }
    }
}

/// One supervised step: cross-entropy over every frame of the batch, SGD
/// update respecting the freeze mask of the chosen mode.
pub fn finetune_step(
    batch: &[SkeletonSequence],
    state: &mut FinetuneState,
    enc_cfg: &EncoderConfig,
    fus_cfg: &FusionConfig,
    adj: &GraphAdjacency,
    mode: FinetuneMode,
) -> Result<FinetuneStats, TensorError> {
    if batch.is_empty() {
        return Err(TensorError::Config("finetune_step on empty batch".into()));
    }
    let mut tape = Tape::new();
    let bound = match mode {
        FinetuneMode::Full => Bound::bind(&mut tape, &state.params, true),
        FinetuneMode::Linear => {
            Bound::bind_masked(&mut tape, &state.params, |name| name.starts_with("head."))
        }
    };
    let mut losses = Vec::with_capacity(batch.len());
    let mut correct = 0usize;
    let mut total = 0usize;
    for seq in batch {
        let x = tape.constant(seq.joints.clone());
        let feats = fused_features(&mut tape, x, &bound, enc_cfg, fus_cfg, adj)?;
        let logits = classify_frames(&mut tape, feats, &bound)?;
        let logp = tape.log_softmax_rows(logits)?;
        losses.push(tape.nll_mean(logp, &seq.frame_labels)?);

        let lp = tape.value(logp);
        let k = lp.shape()[1];
        for (t, &label) in seq.frame_labels.iter().enumerate() {
            let row = lp.row(t);
            let pred = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            correct += usize::from(pred == label);
            total += 1;
        }
    }
    let stacked = tape.stack_scalars(&losses)?;
    let loss = tape.mean_all(stacked);
    let ce = tape.value(loss).item();
    tape.backward(loss)?;
    let mut grads = bound.grads(&tape);
    if state.grad_clip > 0.0 {
        let norm: f64 = grads
            .values()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > state.grad_clip {
            let s = state.grad_clip / norm;
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
    }
    let boost = state.head_lr_multiplier;
    state.opt.step_scaled(&mut state.params, &grads, |name| {
        if name.starts_with("head.") {
            boost
        } else {
            1.0
        }
    });
    Ok(FinetuneStats {
        cross_entropy: ce,
        frame_accuracy: correct as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests;
