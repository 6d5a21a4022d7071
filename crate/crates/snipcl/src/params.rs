//! Named parameter trees and the SGD-with-momentum optimizer.

use std::collections::HashMap;

use rand::Rng;

use crate::rng::RngStream;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Ordered collection of named parameter tensors. Order is insertion order
/// and is stable, which keeps checkpoints and updates deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    items: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) {
        debug_assert!(self.get(name).is_none(), "duplicate parameter {name}");
        self.items.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.items.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.items
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.items.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Kaiming-style uniform init: keeps activation variance roughly stable
    /// through ReLU layers.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut RngStream) {
        let bound = (6.0 / fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).unwrap());
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.push(name, Tensor::zeros(shape));
    }

    /// Elementwise `self <- m*self + (1-m)*query`, shape-checked.
    pub fn momentum_update(&mut self, query: &Params, m: f64) -> Result<(), TensorError> {
        if self.items.len() != query.items.len() {
            return Err(TensorError::Config(format!(
                "momentum_update: {} vs {} parameters",
                self.items.len(),
                query.items.len()
            )));
        }
        for ((kn, kt), (qn, qt)) in self.items.iter_mut().zip(&query.items) {
            if kn != qn || kt.shape() != qt.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "momentum_update",
                    lhs: kt.shape().to_vec(),
                    rhs: qt.shape().to_vec(),
                });
            }
            for (k, q) in kt.data_mut().iter_mut().zip(qt.data()) {
                *k = m * *k + (1.0 - m) * q;
            }
        }
        Ok(())
    }
}

/// Parameters bound to tape leaves for one forward/backward pass.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Inserts every parameter as a tape leaf.
    pub fn bind(tape: &mut Tape, params: &Params, requires_grad: bool) -> Self {
        let mut vars = HashMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.to_string(), tape.leaf(t.clone(), requires_grad));
        }
        Bound { vars }
    }

    /// Binds with a per-parameter trainability predicate (freeze masks).
    pub fn bind_masked<F: Fn(&str) -> bool>(tape: &mut Tape, params: &Params, trainable: F) -> Self {
        let mut vars = HashMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.to_string(), tape.leaf(t.clone(), trainable(name)));
        }
        Bound { vars }
    }

    /// Wraps already-inserted tape leaves under parameter names.
    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        Bound {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Collects gradients from the tape back into a name -> tensor map.
    pub fn grads(&self, tape: &Tape) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (name, &var) in &self.vars {
            if let Some(g) = tape.grad(var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// SGD with momentum and weight decay. Velocity buffers are keyed by
/// parameter name and created lazily.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut Params, grads: &HashMap<String, Tensor>) {
        self.step_scaled(params, grads, |_| 1.0);
    }

    /// Like [`Sgd::step`], with a per-parameter learning-rate multiplier
    /// (e.g. a larger rate for a freshly initialized head).
    pub fn step_scaled<F: Fn(&str) -> f64>(
        &mut self,
        params: &mut Params,
        grads: &HashMap<String, Tensor>,
        lr_scale: F,
    ) {
        for (name, tensor) in params.items.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let lr = self.lr * lr_scale(name);
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(tensor.shape()));
            for ((p, vel), gv) in tensor.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vel = self.momentum * *vel + gv + self.weight_decay * *p;
                *p -= lr * *vel;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_update_endpoints() {
        let mut q = Params::new();
        q.push("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let mut k = Params::new();
        k.push("w", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());

        let mut k1 = k.clone();
        k1.momentum_update(&q, 1.0).unwrap();
        assert_eq!(k1.get("w").unwrap().data(), &[0.0, 0.0]);

        let mut k0 = k.clone();
        k0.momentum_update(&q, 0.0).unwrap();
        assert_eq!(k0.get("w").unwrap().data(), &[1.0, 1.0]);

        k.momentum_update(&q, 0.999).unwrap();
        let got = k.get("w").unwrap().data()[0];
        assert!((got - 0.001).abs() < 1e-15);
    }

    #[test]
    fn momentum_update_rejects_shape_mismatch() {
        let mut q = Params::new();
        q.push("w", Tensor::zeros(&[2]));
        let mut k = Params::new();
        k.push("w", Tensor::zeros(&[3]));
        assert!(k.momentum_update(&q, 0.5).is_err());
    }

    #[test]
    fn sgd_plain_step_without_momentum() {
        let mut p = Params::new();
        p.push("w", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![1], vec![2.0]).unwrap());
        opt.step(&mut p, &grads);
        assert!((p.get("w").unwrap().data()[0] - 0.8).abs() < 1e-12);
    }
}
