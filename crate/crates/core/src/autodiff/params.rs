use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Grads, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_STORE.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: true,
        }
    }
}

/// Named parameters with gradient buffers and optimizer state.
///
/// Every store carries a process-unique id that tapes use to route gradients
/// back to it. Cloning a store (or deserializing one) assigns a new id, so a
/// frozen copy never receives gradients meant for the live original.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamStore {
    #[serde(skip, default = "fresh_uid")]
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    #[serde(skip)]
    grads: Vec<Tensor>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    velocity: Vec<Tensor>,
    step: u64,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: fresh_uid(),
            names: self.names.clone(),
            values: self.values.clone(),
            grads: self.grads.clone(),
            first_moment: self.first_moment.clone(),
            second_moment: self.second_moment.clone(),
            velocity: self.velocity.clone(),
            step: self.step,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: fresh_uid(),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            velocity: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let zeros = Tensor::zeros(value.shape());
        self.names.push(name.into());
        self.grads.push(zeros.clone());
        self.first_moment.push(zeros.clone());
        self.second_moment.push(zeros.clone());
        self.velocity.push(zeros);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars over all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Put a parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param_leaf(self.uid, id.0, self.values[id.0].clone())
    }

    /// Put a parameter on the tape as a constant (frozen use).
    pub fn bind_frozen(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.constant(self.values[id.0].clone())
    }

    pub fn zero_grad(&mut self) {
        if self.grads.len() != self.values.len() {
            self.grads = self.values.iter().map(|v| Tensor::zeros(v.shape())).collect();
            return;
        }
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Add the gradients of every tape node bound from this store.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Grads) {
        if self.grads.len() != self.values.len() {
            self.zero_grad();
        }
        for (var, store, id) in tape.param_nodes() {
            if store != self.uid {
                continue;
            }
            if let Some(g) = grads.get(var) {
                self.grads[id].add_assign(g);
            }
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    pub fn values_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Bias-corrected Adam step.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.values.len() {
            let g = self.grads[i].data();
            let m = self.first_moment[i].data_mut();
            for (mv, &gv) in m.iter_mut().zip(g) {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            }
            let v = self.second_moment[i].data_mut();
            for (vv, &gv) in v.iter_mut().zip(g) {
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            }
            let (m, v) = (self.first_moment[i].data(), self.second_moment[i].data());
            for ((p, &mv), &vv) in self.values[i].data_mut().iter_mut().zip(m).zip(v) {
                *p -= cfg.lr * (mv / c1) / ((vv / c2).sqrt() + cfg.eps);
            }
        }
    }

    /// SGD with momentum, coupled weight decay and optional Nesterov lookahead
    /// (the formulation used by most deep-learning frameworks).
    pub fn sgd_step(&mut self, cfg: &SgdConfig) {
        self.step += 1;
        for i in 0..self.values.len() {
            let vel = self.velocity[i].data_mut();
            let p = self.values[i].data_mut();
            let g = self.grads[i].data();
            for ((pv, vv), &gv) in p.iter_mut().zip(vel.iter_mut()).zip(g) {
                let d = gv + cfg.weight_decay * *pv;
                *vv = cfg.momentum * *vv + d;
                let upd = if cfg.nesterov { d + cfg.momentum * *vv } else { *vv };
                *pv -= cfg.lr * upd;
            }
        }
    }

    /// SHA-256 over names, shapes and value bits.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            h.update(n.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Dense affine layer `x W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization for both
    /// weight and bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b: Vec<f64> = (0..fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::matrix(fan_in, fan_out, w).expect("shape"),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::new(vec![fan_out], b).expect("shape"));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        if tape.value(x).cols() != self.fan_in {
            return Err(Error::shape("linear", tape.value(x).shape(), &[self.fan_in, self.fan_out]));
        }
        let (w, b) = if frozen {
            (store.bind_frozen(tape, self.weight), store.bind_frozen(tape, self.bias))
        } else {
            (store.bind(tape, self.weight), store.bind(tape, self.bias))
        };
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }

    /// Tape-free forward pass for evaluation.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.fan_in {
            return Err(Error::shape("linear", x.shape(), &[self.fan_in, self.fan_out]));
        }
        let mut out = x.matmul(store.get(self.weight))?;
        let b = store.get(self.bias).data();
        let n = self.fan_out;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[i % n];
        }
        Ok(out)
    }
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| {
        if *v <= 0.0 {
            *v = 0.0
        }
    });
}
