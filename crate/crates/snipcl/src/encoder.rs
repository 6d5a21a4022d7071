//! Lite spatial-temporal graph-convolution encoder with a momentum-updated
//! key duplicate. Each level is one graph conv over joints followed by one
//! strided temporal conv, joints pooled away after the last level.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::params::{Bound, Params};
use crate::rng::RngStream;
use crate::tensor::{Padding, Tape, Tensor, TensorError, Var};

/// Symmetrically normalized joint adjacency: D^{-1/2} (A + I) D^{-1/2}.
#[derive(Debug, Clone)]
pub struct GraphAdjacency(Rc<Tensor>);

impl GraphAdjacency {
    pub fn from_edges(j: usize, edges: &[(usize, usize)]) -> Result<Self, TensorError> {
        let mut a = vec![0.0; j * j];
        for i in 0..j {
            a[i * j + i] = 1.0; // self-loops
        }
        for &(u, v) in edges {
            if u >= j || v >= j {
                return Err(TensorError::Config(format!(
                    "edge ({u},{v}) out of range for J={j}"
                )));
            }
            a[u * j + v] = 1.0;
            a[v * j + u] = 1.0;
        }
        let deg: Vec<f64> = (0..j)
            .map(|i| (0..j).map(|k| a[i * j + k]).sum::<f64>())
            .collect();
        let mut norm = vec![0.0; j * j];
        for i in 0..j {
            for k in 0..j {
                norm[i * j + k] = a[i * j + k] / (deg[i] * deg[k]).sqrt();
            }
        }
        Ok(GraphAdjacency(Rc::new(Tensor::new(vec![j, j], norm)?)))
    }

    /// Body chain for the lite 8-joint skeleton; extra joints chain onward.
    pub fn lite_body(j: usize) -> Self {
        let mut edges = vec![];
        let base: &[(usize, usize)] = &[(0, 1), (1, 2), (1, 3), (1, 4), (3, 5), (4, 6), (0, 7)];
        for &(u, v) in base {
            if u < j && v < j {
                edges.push((u, v));
            }
        }
        for i in 8..j {
            edges.push((i - 1, i));
        }
        GraphAdjacency::from_edges(j, &edges).expect("static edge list is in range")
    }

    pub fn matrix(&self) -> Rc<Tensor> {
        Rc::clone(&self.0)
    }

    pub fn j(&self) -> usize {
        self.0.shape()[0]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels per level; the number of levels is the list length.
    pub channels: Vec<usize>,
    /// Temporal stride per level. The first level conventionally keeps
    /// stride 1 so the shallowest intermediate sits at input resolution.
    pub strides: Vec<usize>,
    pub temporal_kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: vec![16, 32, 64],
            strides: vec![1, 2, 2],
            temporal_kernel: 3,
        }
    }
}

impl EncoderConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(TensorError::Config(format!(
                "encoder needs matching channels/strides, got {} and {}",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.strides.iter().any(|&s| s == 0) || self.temporal_kernel == 0 {
            return Err(TensorError::Config("strides and kernel must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stride_product(&self) -> usize {
        self.strides.iter().product()
    }

    /// Temporal length of level `a`'s output for input length `t`
    /// (after edge padding to a stride-product multiple).
    pub fn level_len(&self, t: usize, a: usize) -> usize {
        let padded = t.div_ceil(self.stride_product()) * self.stride_product();
        let mut len = padded;
        for s in &self.strides[..=a] {
            len = len.div_ceil(*s);
        }
        len
    }

    /// Channel dimension of the final skeleton encoding.
    pub fn c_e(&self) -> usize {
        *self.channels.last().unwrap()
    }
}

/// Initializes the encoder parameter tree (query or key copy).
pub fn init_encoder_params(cfg: &EncoderConfig, rng: &mut RngStream) -> Params {
    let mut p = Params::new();
    let mut c_in = 3;
    for (a, &c_out) in cfg.channels.iter().enumerate() {
        p.init_uniform(&format!("enc.l{a}.gc.w"), &[c_in, c_out], c_in, rng);
        p.init_zeros(&format!("enc.l{a}.gc.b"), &[c_out]);
        p.init_uniform(
            &format!("enc.l{a}.tc.w"),
            &[cfg.temporal_kernel, c_out, c_out],
            cfg.temporal_kernel * c_out,
            rng,
        );
        p.init_zeros(&format!("enc.l{a}.tc.b"), &[c_out]);
        c_in = c_out;
    }
    p
}

/// Forward pass: returns the final encoding `h` (T_L x C_e) and the
/// joint-pooled intermediates Z_a^0, shallowest first. Input length is
/// edge-padded up to a multiple of the stride product.
pub fn encode(
    tape: &mut Tape,
    x: Var,
    bound: &Bound,
    cfg: &EncoderConfig,
    adj: &GraphAdjacency,
) -> Result<(Var, Vec<Var>), TensorError> {
    cfg.validate()?;
    let t = tape.value(x).shape()[0];
    let sp = cfg.stride_product();
    let padded = t.div_ceil(sp) * sp;
    let mut cur = tape.pad_edge_rows(x, padded - t)?;
    let mut intermediates = Vec::with_capacity(cfg.levels());
    for a in 0..cfg.levels() {
        let gw = bound.var(&format!("enc.l{a}.gc.w"));
        let gb = bound.var(&format!("enc.l{a}.gc.b"));
        let tw = bound.var(&format!("enc.l{a}.tc.w"));
        let tb = bound.var(&format!("enc.l{a}.tc.b"));
        let g = tape.graph_conv(cur, gw, adj.matrix())?;
        let g = tape.add_bias(g, gb)?;
        let g = tape.relu(g);
        let tcv = tape.temporal_conv_joints(g, tw, cfg.strides[a], Padding::Same)?;
        let tcv = tape.add_bias(tcv, tb)?;
        cur = tape.relu(tcv);
        intermediates.push(tape.mean_axis1(cur)?);
    }
    Ok((*intermediates.last().unwrap(), intermediates))
}
