//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs are earlier nodes, so the node
//! order is already a topological order and `backward` is a single reverse
//! sweep. Gradients are accumulated per node; parameter gradients are pulled
//! out afterwards by the owning [`ParamStore`](super::ParamStore).

use super::tensor::{gemm_at, gemm_bt, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Input,
    Param { store: u64, id: usize },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Tensor },
    NegLogOneMinus { logits: Var, labels: Vec<usize>, probs: Tensor },
    GaussianKl { mu: Var, logvar: Var },
    Reparam { mu: Var, logvar: Var, noise: Tensor },
    Grl(Var, f64),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Probability cap used inside `-log(1 - p)`.
pub const ONE_MINUS_P_FLOOR: f64 = 1e-7;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like its value if nothing flowed there.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn param_nodes(&self) -> impl Iterator<Item = (Var, u64, usize)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param { store, id } => Some((Var(i), store, id)),
            _ => None,
        })
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a leaf. Gradients are tracked when the tensor was built with
    /// [`Tensor::with_grad`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad();
        self.push(Op::Input, t, ng)
    }

    /// Record a constant leaf (no gradient, whatever the tensor's flag says).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, false)
    }

    pub(crate) fn param_leaf(&mut self, store: u64, id: usize, value: Tensor) -> Var {
        self.push(Op::Param { store, id }, value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul(a, b), out, ng))
    }

    /// Adds a `[1, n]` or `[n]` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let n = xv.cols();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % n];
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(Op::AddBias(x, b), out, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add(a, b), out, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Sub(a, b), out, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Mul(a, b), out, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(Op::Scale(a, s), out, ng)
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.ng(a);
        self.push(Op::Relu(a), out, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Op::Sum(a), Tensor::scalar(s), ng)
    }

    /// Mean of all elements; the mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = if v.is_empty() {
            0.0
        } else {
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        let ng = self.ng(a);
        self.push(Op::Mean(a), Tensor::scalar(m), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&ts)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::hstack(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::ConcatCols(a, b), out, ng))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if start > end || end > v.rows() {
            return Err(Error::shape("slice_rows", v.shape(), &[start, end]));
        }
        let idx: Vec<usize> = (start..end).collect();
        let out = v.select_rows(&idx);
        let ng = self.ng(a);
        Ok(self.push(Op::SliceRows(a, start), out, ng))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        check_labels(lv, labels)?;
        let (probs, _) = softmax_rows(lv);
        let n = lv.rows();
        let k = lv.cols();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let (mx, arg) = row_max(row);
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, &v)| (v - mx).exp())
                .sum();
            total += (mx - row[y]) + rest.ln_1p();
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        debug_assert_eq!(probs.cols(), k);
        let ng = self.ng(logits);
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            ng,
        ))
    }

    /// Mean over rows of `-log(1 - softmax(logits)[label])`, with
    /// `1 - p` floored at [`ONE_MINUS_P_FLOOR`].
    pub fn neg_log_one_minus_softmax(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        check_labels(lv, labels)?;
        let (probs, _) = softmax_rows(lv);
        let n = lv.rows();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let om = one_minus(probs.row(r), y);
            total -= om.ln();
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        let ng = self.ng(logits);
        Ok(self.push(
            Op::NegLogOneMinus {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            ng,
        ))
    }

    /// Mean over rows of `KL(N(mu, exp(logvar)) || N(0, I))`.
    pub fn gaussian_kl(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        self.same_shape("gaussian_kl", mu, logvar)?;
        let (m, lv) = (self.value(mu), self.value(logvar));
        let n = m.rows();
        let total: f64 = m
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&a, &l)| 0.5 * (a * a + l.exp() - 1.0 - l))
            .sum();
        let kl = if n == 0 { 0.0 } else { total / n as f64 };
        let ng = self.ng(mu) || self.ng(logvar);
        Ok(self.push(Op::GaussianKl { mu, logvar }, Tensor::scalar(kl), ng))
    }

    /// `mu + exp(logvar / 2) * noise`. The noise is a constant.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, noise: Tensor) -> Result<Var> {
        self.same_shape("reparameterize", mu, logvar)?;
        let m = self.value(mu);
        if noise.shape() != m.shape() {
            return Err(Error::shape("reparameterize", m.shape(), noise.shape()));
        }
        let sd = self.value(logvar).map(|l| (0.5 * l).exp());
        let z = m.zip(&sd.zip(&noise, |s, e| s * e), |a, b| a + b);
        let ng = self.ng(mu) || self.ng(logvar);
        Ok(self.push(Op::Reparam { mu, logvar, noise }, z, ng))
    }

    /// Identity forward; scales the upstream gradient by `-coeff`.
    pub fn gradient_reverse(&mut self, x: Var, coeff: f64) -> Var {
        let out = self.value(x).clone();
        let ng = self.ng(x);
        self.push(Op::Grl(x, coeff), out, ng)
    }

    /// Per-column standardization over the batch followed by a learned
    /// scale/shift. Returns the output plus the batch mean and (biased)
    /// variance so callers can maintain running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if n < 2 {
            return Err(Error::Invalid(format!(
                "batch_norm in training mode needs at least 2 rows, got {n}"
            )));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batch_norm", xv.shape(), self.value(gamma).shape()));
        }
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for (i, v) in xhat.data_mut().iter_mut().enumerate() {
            let j = i % c;
            *v = (*v - mean[j]) * inv_std[j];
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % c;
            *v = *v * g[j] + b[j];
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let var_out = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
            ng,
        );
        Ok((var_out, mean, var))
    }

    /// Reverse sweep from a scalar node. Every node is visited once and
    /// gradients accumulate into per-node buffers.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.value(loss).shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Input | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_bt(g.data(), bv.data(), &mut ga, m, n, k);
                    self.acc(grads, *a, Tensor::matrix(m, k, ga).unwrap());
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_at(av.data(), g.data(), &mut gb, m, k, n);
                    self.acc(grads, *b, Tensor::matrix(k, n, gb).unwrap());
                }
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.clone());
                let bv = self.value(*b);
                let n = bv.len();
                let mut gb = vec![0.0; n];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % n] += v;
                }
                self.acc(grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, g.zip(bv, |x, y| x * y));
                self.acc(grads, *b, g.zip(av, |x, y| x * y));
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|v| v * s)),
            Op::Relu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, g.zip(av, |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.acc(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let gv = if av.is_empty() {
                    0.0
                } else {
                    g.item() / av.len() as f64
                };
                self.acc(grads, *a, Tensor::full(av.shape(), gv));
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    let data = g.data()[offset * c..(offset + rows) * c].to_vec();
                    offset += rows;
                    self.acc(grads, *p, Tensor::matrix(rows, c, data).unwrap());
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let rows = g.rows();
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.acc(grads, *a, Tensor::matrix(rows, ca, ga).unwrap());
                self.acc(grads, *b, Tensor::matrix(rows, cb, gb).unwrap());
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                let s = start * c;
                ga.data_mut()[s..s + g.len()].copy_from_slice(g.data());
                self.acc(grads, *a, ga);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                if n == 0 {
                    return;
                }
                let k = probs.cols();
                let scale = g.item() / n as f64;
                let mut gl = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    gl.data_mut()[r * k + y] -= 1.0;
                }
                gl.data_mut().iter_mut().for_each(|v| *v *= scale);
                self.acc(grads, *logits, gl);
            }
            Op::NegLogOneMinus {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                if n == 0 {
                    return;
                }
                let k = probs.cols();
                let scale = g.item() / n as f64;
                let mut gl = Tensor::zeros(probs.shape());
                for (r, &y) in labels.iter().enumerate() {
                    let p = probs.row(r);
                    let q = p[y];
                    let om = one_minus(p, y);
                    if om <= ONE_MINUS_P_FLOOR {
                        // clamped: constant in the logits
                        continue;
                    }
                    for j in 0..k {
                        let delta = if j == y { 1.0 } else { 0.0 };
                        gl.data_mut()[r * k + j] = scale * q * (delta - p[j]) / om;
                    }
                }
                self.acc(grads, *logits, gl);
            }
            Op::GaussianKl { mu, logvar } => {
                let (m, lv) = (self.value(*mu), self.value(*logvar));
                let n = m.rows();
                if n == 0 {
                    return;
                }
                let s = g.item() / n as f64;
                self.acc(grads, *mu, m.map(|a| a * s));
                self.acc(grads, *logvar, lv.map(|l| 0.5 * (l.exp() - 1.0) * s));
            }
            Op::Reparam { mu, logvar, noise } => {
                self.acc(grads, *mu, g.clone());
                let lv = self.value(*logvar);
                let half_sd = lv.map(|l| 0.5 * (0.5 * l).exp());
                let gl = g.zip(noise, |a, e| a * e).zip(&half_sd, |a, h| a * h);
                self.acc(grads, *logvar, gl);
            }
            Op::Grl(x, coeff) => self.acc(grads, *x, g.map(|v| -coeff * v)),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = (xhat.rows(), xhat.cols());
                let gam = self.value(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for r in 0..n {
                    for j in 0..c {
                        let gv = g.data()[r * c + j];
                        dgamma[j] += gv * xhat.data()[r * c + j];
                        dbeta[j] += gv;
                    }
                }
                if self.ng(*x) {
                    let nf = n as f64;
                    let mut dx = Tensor::zeros(xhat.shape());
                    for j in 0..c {
                        let gj = gam.data()[j];
                        // dxhat = g * gamma; sum(dxhat) = gamma * dbeta; sum(dxhat * xhat) = gamma * dgamma
                        let s1 = gj * dbeta[j];
                        let s2 = gj * dgamma[j];
                        for r in 0..n {
                            let dxh = g.data()[r * c + j] * gj;
                            dx.data_mut()[r * c + j] = inv_std[j] / nf
                                * (nf * dxh - s1 - xhat.data()[r * c + j] * s2);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                let shape = gam.shape().to_vec();
                self.acc(grads, *gamma, Tensor::new(shape.clone(), dgamma).unwrap());
                self.acc(grads, *beta, Tensor::new(shape, dbeta).unwrap());
            }
        }
    }
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::shape("labels", logits.shape(), &[labels.len()]));
    }
    let k = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Label {
            label: bad,
            classes: k,
        });
    }
    Ok(())
}

fn row_max(row: &[f64]) -> (f64, usize) {
    let mut arg = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[arg] {
            arg = j;
        }
    }
    (row[arg], arg)
}

/// `1 - p[y]` computed as the sum of the other probabilities, floored.
fn one_minus(p: &[f64], y: usize) -> f64 {
    let rest: f64 = p
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| v)
        .sum();
    rest.max(ONE_MINUS_P_FLOOR)
}

/// Row-wise softmax with max subtraction. Also returns per-row log-sum-exp.
pub fn softmax_rows(logits: &Tensor) -> (Tensor, Vec<f64>) {
    let (n, k) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(&[n, k]);
    let mut lse = Vec::with_capacity(n);
    for r in 0..n {
        let row = logits.row(r);
        let (mx, _) = row_max(row);
        let mut s = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            out.data_mut()[r * k + j] = e;
            s += e;
        }
        for j in 0..k {
            out.data_mut()[r * k + j] /= s;
        }
        lse.push(mx + s.ln());
    }
    (out, lse)
}
