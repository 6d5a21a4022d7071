//! Stage 1: snippet discrimination pretraining. Global and dense projection
//! heads, similarity-based snippet matching, both contrastive losses, FIFO
//! memory banks, and the SGD training step with a momentum-updated key path.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{augment_sequence, AugmentPolicy, SkeletonSequence};
use crate::encoder::{encode, init_encoder_params, EncoderConfig, GraphAdjacency};
use crate::params::{Bound, Params, Sgd};
use crate::rng::RngStream;
use crate::tensor::{cosine, Padding, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss: L_global={l_global}, L_dense={l_dense}, grad norm={grad_norm}")]
    NonFiniteLoss {
        l_global: f64,
        l_dense: f64,
        grad_norm: f64,
    },
    #[error("memory bank expects dimension {expected}, got {got}")]
    BankDimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// InfoNCE temperature.
    pub tau: f64,
    /// Memory bank capacity M. The reference setting is 32768; the
    /// desk-scale default keeps the bank smaller than the dataset.
    pub bank_capacity: usize,
    /// Number of temporal snippets N.
    pub snippets: usize,
    /// Dense-loss weight.
    pub lambda: f64,
    /// Key-network momentum coefficient.
    pub key_momentum: f64,
    /// Embedding dimension C of both projection heads.
    pub embed_dim: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Step-decay of the learning rate at 75% of epochs.
    pub lr_step_decay: bool,
    /// Disables the dense objective entirely (`--no-dense-loss`).
    pub dense_enabled: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            tau: 0.007,
            bank_capacity: 1024,
            snippets: 19,
            lambda: 1.5,
            key_momentum: 0.999,
            embed_dim: 32,
            lr: 0.02,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 8,
            lr_step_decay: true,
            dense_enabled: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.tau <= 0.0 {
            return Err(TensorError::Config("tau must be > 0".into()));
        }
        if self.snippets == 0 || self.lambda < 0.0 {
            return Err(TensorError::Config("need N >= 1 and lambda >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.key_momentum) {
            return Err(TensorError::Config("key momentum must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Fixed-capacity FIFO queue of unit-norm embeddings.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        MemoryBank {
            capacity,
            dim,
            entries: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest-first iteration.
    pub fn entries(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.entries.iter()
    }

    /// FIFO enqueue; the earliest entries are dequeued once full.
    pub fn enqueue(&mut self, batch: &[Vec<f64>]) -> Result<(), PretrainError> {
        for e in batch {
            if e.len() != self.dim {
                return Err(PretrainError::BankDimension {
                    expected: self.dim,
                    got: e.len(),
                });
            }
            debug_assert!((cosine(e, e) - 1.0).abs() < 1e-6 || e.iter().all(|v| *v == 0.0));
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(e.clone());
        }
        Ok(())
    }
}

/// Adds the global and dense projection head parameters to a tree that
/// already holds encoder parameters.
pub fn init_head_params(p: &mut Params, c_e: usize, c: usize, rng: &mut RngStream) {
    p.init_uniform("gproj.w", &[c_e, c], c_e, rng);
    p.init_zeros("gproj.b", &[c]);
    p.init_uniform("dproj.w1", &[1, c_e, c_e], c_e, rng);
    p.init_zeros("dproj.b1", &[c_e]);
    p.init_uniform("dproj.w2", &[1, c_e, c], c_e, rng);
    p.init_zeros("dproj.b2", &[c]);
}

/// Full query (or key) network: encoder plus both projection heads.
pub fn init_pipeline_params(
    enc_cfg: &EncoderConfig,
    embed_dim: usize,
    rng: &mut RngStream,
) -> Params {
    let mut p = init_encoder_params(enc_cfg, rng);
    init_head_params(&mut p, enc_cfg.c_e(), embed_dim, rng);
    p
}

/// Global projection: temporal mean, linear map, L2 normalization.
pub fn global_project(tape: &mut Tape, h: Var, bound: &Bound) -> Result<Var, TensorError> {
    let pooled = tape.mean_axis0(h)?;
    let c_e = tape.value(pooled).numel();
    let row = tape.reshape(pooled, vec![1, c_e])?;
    let mapped = tape.matmul(row, bound.var("gproj.w"))?;
    let mapped = tape.add_bias(mapped, bound.var("gproj.b"))?;
    let c = tape.value(mapped).numel();
    let vec = tape.reshape(mapped, vec![c])?;
    tape.l2_normalize(vec)
}

/// Dense projection: adaptive pooling into N snippets, then two 1x1
/// convolutions with a ReLU between. Returns both the normalized snippet
/// embeddings S (used by the loss) and the pooled features F_d (used by
/// the matching step).
pub fn dense_project(
    tape: &mut Tape,
    h: Var,
    bound: &Bound,
    n: usize,
) -> Result<(Var, Var), TensorError> {
    let f_d = tape.adaptive_avg_pool1d(h, n)?;
    let z = tape.conv1d(f_d, bound.var("dproj.w1"), 1, Padding::Valid)?;
    let z = tape.add_bias(z, bound.var("dproj.b1"))?;
    let z = tape.relu(z);
    let z = tape.conv1d(z, bound.var("dproj.w2"), 1, Padding::Valid)?;
    let z = tape.add_bias(z, bound.var("dproj.b2"))?;
    let s = tape.l2_normalize(z)?;
    Ok((s, f_d))
}

/// For each row of `f_anchor`, the index of the most cosine-similar row of
/// `f_positive`; ties break toward the smallest index.
pub fn match_snippets(f_anchor: &Tensor, f_positive: &Tensor) -> Result<Vec<usize>, TensorError> {
    let n = f_anchor.shape()[0];
    let m = f_positive.shape()[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let fi = f_anchor.row(i);
        if crate::tensor::l2_norm(fi) <= 1e-12 {
            return Err(TensorError::DegenerateEmbedding);
        }
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for j in 0..m {
            let fj = f_positive.row(j);
            if crate::tensor::l2_norm(fj) <= 1e-12 {
                return Err(TensorError::DegenerateEmbedding);
            }
            let sim = cosine(fi, fj);
            if sim > best_sim {
                best_sim = sim;
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// InfoNCE on the tape: anchor and positive are unit-norm C-vectors,
/// negatives are bank entries (no gradient flows into them).
pub fn info_nce(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    negatives: &[Vec<f64>],
    tau: f64,
) -> Result<Var, TensorError> {
    if tau <= 0.0 {
        return Err(TensorError::Config(format!("tau must be > 0, got {tau}")));
    }
    let pos_dot = tape.dot(anchor, positive)?;
    let pos_logit = tape.scale(pos_dot, 1.0 / tau);
    let mut logits = vec![pos_logit];
    for q in negatives {
        let qv = tape.constant(Tensor::new(vec![q.len()], q.clone())?);
        let d = tape.dot(anchor, qv)?;
        logits.push(tape.scale(d, 1.0 / tau));
    }
    let stacked = tape.stack_scalars(&logits)?;
    let lse = tape.logsumexp(stacked)?;
    tape.sub(lse, pos_logit)
}

/// Pure-scalar InfoNCE over precomputed similarities. Used as a test oracle
/// and for monotonicity checks on the similarity scalars.
pub fn info_nce_scalar(pos_sim: f64, neg_sims: &[f64], tau: f64) -> f64 {
    let logits: Vec<f64> = std::iter::once(pos_sim / tau)
        .chain(neg_sims.iter().map(|s| s / tau))
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - pos_sim / tau
}

/// Dense snippet loss: a sum (not a mean) of per-snippet contrastive terms.
pub fn dense_contrastive_loss(
    tape: &mut Tape,
    s_anchor: Var,
    s_positive: Var,
    matches: &[usize],
    bank: &MemoryBank,
    tau: f64,
) -> Result<Var, TensorError> {
    let n = tape.value(s_anchor).shape()[0];
    if matches.len() != n {
        return Err(TensorError::Config(format!(
            "expected {n} matches, got {}",
            matches.len()
        )));
    }
    let negatives: Vec<Vec<f64>> = bank.entries().cloned().collect();
    let mut terms = Vec::with_capacity(n);
    for (i, &j) in matches.iter().enumerate() {
        let si = tape.row(s_anchor, i)?;
        let sj = tape.row(s_positive, j)?;
        terms.push(info_nce(tape, si, sj, &negatives, tau)?);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t)?;
    }
    Ok(total)
}

/// Combined objective: global term plus `lambda` times the dense term.
pub fn total_loss(tape: &mut Tape, l_global: Var, l_dense: Var, lambda: f64) -> Result<Var, TensorError> {
    let weighted = tape.scale(l_dense, lambda);
    tape.add(l_global, weighted)
}

/// Row-mean of the snippet embeddings, re-normalized; `None` when the mean
/// degenerates to (near) zero.
pub fn negative_snippet_embedding(s: &Tensor) -> Option<Vec<f64>> {
    let (n, c) = (s.shape()[0], s.shape()[1]);
    let mut mean = vec![0.0; c];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(s.row(i)) {
            *m += v / n as f64;
        }
    }
    let norm = crate::tensor::l2_norm(&mean);
    if norm <= 1e-9 {
        return None;
    }
    for m in mean.iter_mut() {
        *m /= norm;
    }
    Some(mean)
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub l_global: f64,
    pub l_dense: f64,
    pub l_total: f64,
    pub bank_video_len: usize,
    pub bank_snippet_len: usize,
}

pub struct PretrainState {
    pub query: Params,
    pub key: Params,
    pub opt: Sgd,
    pub bank_video: MemoryBank,
    pub bank_snippet: MemoryBank,
    /// Snippet pools skipped because their mean embedding degenerated.
    pub degenerate_skips: usize,
}

impl PretrainState {
    pub fn init(enc_cfg: &EncoderConfig, cfg: &PretrainConfig, rng: &mut RngStream) -> Self {
        let query = init_pipeline_params(enc_cfg, cfg.embed_dim, rng);
        let key = query.clone();
        PretrainState {
            query,
            key,
            opt: Sgd::new(cfg.lr, cfg.sgd_momentum, cfg.weight_decay),
            bank_video: MemoryBank::new(cfg.bank_capacity, cfg.embed_dim),
            bank_snippet: MemoryBank::new(cfg.bank_capacity, cfg.embed_dim),
            degenerate_skips: 0,
        }
    }
}

/// One pretraining step over a batch of preprocessed sequences: two
/// augmented views per sample, query path with gradients, key path through
/// the momentum duplicates, both losses, SGD update, momentum update, enqueue.
pub fn pretrain_step(
    batch: &[SkeletonSequence],
    state: &mut PretrainState,
    enc_cfg: &EncoderConfig,
    cfg: &PretrainConfig,
    adj: &GraphAdjacency,
    policy: &AugmentPolicy,
    rng: &mut RngStream,
) -> Result<StepStats, PretrainError> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let q_bound = Bound::bind(&mut tape, &state.query, true);
    let k_bound = Bound::bind(&mut tape, &state.key, false);

    let mut global_terms = Vec::with_capacity(batch.len());
    let mut dense_terms = Vec::with_capacity(batch.len());
    let mut video_keys: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
    let mut snippet_keys: Vec<Vec<f64>> = Vec::new();

    for seq in batch {
        let anchor_view = augment_sequence(seq, policy, rng)?;
        let key_view = augment_sequence(seq, policy, rng)?;
        let x_anchor = tape.constant(anchor_view.joints.clone());
        let x_key = tape.constant(key_view.joints.clone());

        let (h_q, _) = encode(&mut tape, x_anchor, &q_bound, enc_cfg, adj)?;
        let (h_k, _) = encode(&mut tape, x_key, &k_bound, enc_cfg, adj)?;

        let p_anchor = global_project(&mut tape, h_q, &q_bound)?;
        let p_key = global_project(&mut tape, h_k, &k_bound)?;
        let negatives: Vec<Vec<f64>> = state.bank_video.entries().cloned().collect();
        global_terms.push(info_nce(&mut tape, p_anchor, p_key, &negatives, cfg.tau)?);
        video_keys.push(tape.value(p_key).data().to_vec());

        if cfg.dense_enabled {
            let (s_anchor, f_anchor) = dense_project(&mut tape, h_q, &q_bound, cfg.snippets)?;
            let (s_key, f_key) = dense_project(&mut tape, h_k, &k_bound, cfg.snippets)?;
            let matches = match_snippets(tape.value(f_anchor), tape.value(f_key))?;
            dense_terms.push(dense_contrastive_loss(
                &mut tape,
                s_anchor,
                s_key,
                &matches,
                &state.bank_snippet,
                cfg.tau,
            )?);
            match negative_snippet_embedding(tape.value(s_key)) {
                Some(e) => snippet_keys.push(e),
                None => state.degenerate_skips += 1,
            }
        }
    }

    let l_global = {
        let stacked = tape.stack_scalars(&global_terms)?;
        tape.mean_all(stacked)
    };
    let l_dense = if dense_terms.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let stacked = tape.stack_scalars(&dense_terms)?;
        tape.mean_all(stacked)
    };
    let loss = total_loss(&mut tape, l_global, l_dense, cfg.lambda)?;

    let lg = tape.value(l_global).item();
    let ld = tape.value(l_dense).item();
    let lt = tape.value(loss).item();
    if !lt.is_finite() {
        return Err(PretrainError::NonFiniteLoss {
            l_global: lg,
            l_dense: ld,
            grad_norm: f64::NAN,
        });
    }

    tape.backward(loss)?;
    let grads = q_bound.grads(&tape);
    let grad_norm: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() {
        return Err(PretrainError::NonFiniteLoss {
            l_global: lg,
            l_dense: ld,
            grad_norm,
        });
    }

    state.opt.step(&mut state.query, &grads);
    state.key.momentum_update(&state.query, cfg.key_momentum)?;
    state.bank_video.enqueue(&video_keys)?;
    state.bank_snippet.enqueue(&snippet_keys)?;

    Ok(StepStats {
        l_global: lg,
        l_dense: ld,
        l_total: lt,
        bank_video_len: state.bank_video.len(),
        bank_snippet_len: state.bank_snippet.len(),
    })
}
