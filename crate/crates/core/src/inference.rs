//! Variational domain-agnostic feature inference.
//!
//! Inputs `x` are encoded, together with a one-hot condition `c` (the
//! environment index), into a Gaussian latent `q(z | x, c)`. A sample of `z`
//! is decoded, again with `c`, into the feature `h`. A hypothesis `f`
//! classifies `h`; an adversary `f'` sees `h` through a gradient-reversal
//! node and measures the margin disparity between support and query. The
//! encoder and decoder therefore minimize
//! `CE(f(h_S), y_S) + w_kl KL(q || prior) + beta * disparity` while `f'`
//! maximizes the disparity.
//!
//! With `class_prior` enabled the latent prior is `N(m_y, I)` with one
//! learned mean per class, so that later sampling from a frozen decoder can
//! attach the class it sampled from as the label.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    relu_inplace, AdamConfig, Grads, Linear, ParamId, ParamStore, SgdConfig, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::streams::TrainView;

/// Warm-start schedule for the gradient-reversal coefficient:
/// `2a / (1 + exp(-i / tau)) - a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrlSchedule {
    pub amplitude: f64,
    pub horizon: f64,
}

impl Default for GrlSchedule {
    fn default() -> Self {
        Self {
            amplitude: 0.3,
            horizon: 2000.0,
        }
    }
}

impl GrlSchedule {
    pub fn coeff(&self, step: u64) -> f64 {
        grl_coeff(self, step)
    }
}

pub fn grl_coeff(sched: &GrlSchedule, step: u64) -> f64 {
    let a = sched.amplitude;
    2.0 * a / (1.0 + (-(step as f64) / sched.horizon).exp()) - a
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub input_dim: usize,
    pub condition_count: usize,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    /// Weight of the disparity term.
    pub beta: f64,
    pub kl_weight: f64,
    /// Margin on the support disparity term.
    pub margin: f64,
    pub grl: GrlSchedule,
    /// Learn one prior mean per class instead of a shared `N(0, I)`.
    pub class_prior: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl InferenceConfig {
    pub fn new(input_dim: usize, condition_count: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            condition_count,
            num_classes,
            latent_dim: 8,
            feature_dim: 32,
            hidden_dim: 64,
            beta: 1.0,
            kl_weight: 1.0,
            margin: 4.0,
            grl: GrlSchedule::default(),
            class_prior: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

/// Optimizer settings for one training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    /// Encoder and decoder.
    pub inference: AdamConfig,
    /// `f` and `f'`.
    pub heads: SgdConfig,
    pub solver: SgdConfig,
}

impl Default for Optimizers {
    fn default() -> Self {
        Self {
            inference: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            heads: SgdConfig {
                lr: 0.02,
                ..Default::default()
            },
            solver: SgdConfig {
                lr: 0.02,
                ..Default::default()
            },
        }
    }
}

fn condition_row(c: usize, count: usize) -> Result<Vec<f64>> {
    if c >= count {
        return Err(Error::Invalid(format!(
            "condition {c} out of range for {count} conditions"
        )));
    }
    let mut v = vec![0.0; count];
    v[c] = 1.0;
    Ok(v)
}

fn with_condition(x: &Tensor, c: usize, count: usize) -> Result<Tensor> {
    let row = condition_row(c, count)?;
    let cond = Tensor::matrix(x.rows(), count, row.repeat(x.rows()))?;
    Tensor::hstack(x, &cond)
}

/// `q(z | x, c)`: one hidden ReLU layer, then separate heads for the mean
/// and log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub store: ParamStore,
    hidden: Linear,
    mu: Linear,
    logvar: Linear,
    input_dim: usize,
    condition_count: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &InferenceConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let inp = cfg.input_dim + cfg.condition_count;
        let hidden = Linear::new(&mut store, "enc.hidden", inp, cfg.hidden_dim, rng);
        let mu = Linear::new(&mut store, "enc.mu", cfg.hidden_dim, cfg.latent_dim, rng);
        let logvar = Linear::new(&mut store, "enc.logvar", cfg.hidden_dim, cfg.latent_dim, rng);
        Self {
            store,
            hidden,
            mu,
            logvar,
            input_dim: cfg.input_dim,
            condition_count: cfg.condition_count,
        }
    }

    pub fn logvar_layer(&self) -> Linear {
        self.logvar
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.rows() > 0 && x.cols() != self.input_dim {
            return Err(Error::shape("encode", x.shape(), &[x.rows(), self.input_dim]));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, c: usize, frozen: bool) -> Result<(Var, Var)> {
        self.check(x)?;
        let inp = tape.constant(with_condition(x, c, self.condition_count)?);
        let h = self.hidden.forward(tape, &self.store, inp, frozen)?;
        let h = tape.relu(h);
        let mu = self.mu.forward(tape, &self.store, h, frozen)?;
        let lv = self.logvar.forward(tape, &self.store, h, frozen)?;
        Ok((mu, lv))
    }

    /// Tape-free `(mu, logvar)`.
    pub fn encode(&self, x: &Tensor, c: usize) -> Result<(Tensor, Tensor)> {
        self.check(x)?;
        if x.rows() == 0 {
            let d = self.mu.fan_out;
            return Ok((Tensor::zeros(&[0, d]), Tensor::zeros(&[0, d])));
        }
        let inp = with_condition(x, c, self.condition_count)?;
        let mut h = self.hidden.apply(&self.store, &inp)?;
        relu_inplace(&mut h);
        Ok((self.mu.apply(&self.store, &h)?, self.logvar.apply(&self.store, &h)?))
    }
}

/// `g(z, c)`: linear, ReLU, batch normalization. Running statistics serve
/// evaluation and generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub store: ParamStore,
    lin: Linear,
    gamma: ParamId,
    beta: ParamId,
    prior_means: Option<ParamId>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    momentum: f64,
    eps: f64,
    latent_dim: usize,
    feature_dim: usize,
    condition_count: usize,
    num_classes: usize,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(cfg: &InferenceConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let lin = Linear::new(
            &mut store,
            "dec.lin",
            cfg.latent_dim + cfg.condition_count,
            cfg.feature_dim,
            rng,
        );
        let gamma = store.add("dec.bn.gamma", Tensor::full(&[cfg.feature_dim], 1.0));
        let beta = store.add("dec.bn.beta", Tensor::zeros(&[cfg.feature_dim]));
        let prior_means = cfg.class_prior.then(|| {
            let rows = cfg.condition_count * cfg.num_classes;
            let init = (0..rows * cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
            store.add(
                "dec.prior_means",
                Tensor::matrix(rows, cfg.latent_dim, init).expect("prior table shape"),
            )
        });
        Self {
            store,
            lin,
            gamma,
            beta,
            prior_means,
            running_mean: vec![0.0; cfg.feature_dim],
            running_var: vec![1.0; cfg.feature_dim],
            momentum: cfg.bn_momentum,
            eps: cfg.bn_eps,
            latent_dim: cfg.latent_dim,
            feature_dim: cfg.feature_dim,
            condition_count: cfg.condition_count,
            num_classes: cfg.num_classes,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn has_class_prior(&self) -> bool {
        self.prior_means.is_some()
    }

    pub fn prior_means_id(&self) -> Option<ParamId> {
        self.prior_means
    }

    /// Row of the prior table for condition `c` and class `y`.
    pub fn prior_row(&self, c: usize, y: usize) -> usize {
        c * self.num_classes + y
    }

    /// Prior mean for class `y` under condition `c` (zeros without a class
    /// prior).
    pub fn prior_mean(&self, c: usize, y: usize) -> Vec<f64> {
        match self.prior_means {
            Some(id) => self.store.get(id).row(self.prior_row(c, y)).to_vec(),
            None => vec![0.0; self.latent_dim],
        }
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        if z.rows() > 0 && z.cols() != self.latent_dim {
            return Err(Error::shape("decode", z.shape(), &[z.rows(), self.latent_dim]));
        }
        Ok(())
    }

    /// Training-mode forward: batch statistics, running stats updated.
    pub fn forward_train(&mut self, tape: &mut Tape, z: Var, c: usize) -> Result<Var> {
        self.check(tape.value(z))?;
        let rows = tape.value(z).rows();
        let row = condition_row(c, self.condition_count)?;
        let cond = tape.constant(Tensor::matrix(rows, self.condition_count, row.repeat(rows))?);
        let inp = tape.concat_cols(z, cond)?;
        let a = self.lin.forward(tape, &self.store, inp, false)?;
        let a = tape.relu(a);
        let g = self.store.bind(tape, self.gamma);
        let b = self.store.bind(tape, self.beta);
        let (h, mean, var) = tape.batch_norm(a, g, b, self.eps)?;
        let n = rows as f64;
        let m = self.momentum;
        for j in 0..self.feature_dim {
            let unbiased = var[j] * n / (n - 1.0);
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * unbiased;
        }
        Ok(h)
    }

    /// Evaluation-mode decode with running statistics. Works for any batch
    /// size, including 0 and 1.
    pub fn decode(&self, z: &Tensor, c: usize) -> Result<Tensor> {
        self.check(z)?;
        if z.rows() == 0 {
            return Ok(Tensor::zeros(&[0, self.feature_dim]));
        }
        let inp = with_condition(z, c, self.condition_count)?;
        let mut a = self.lin.apply(&self.store, &inp)?;
        relu_inplace(&mut a);
        let (g, b) = (self.store.get(self.gamma).data(), self.store.get(self.beta).data());
        let d = self.feature_dim;
        for (i, v) in a.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.running_mean[j]) / (self.running_var[j] + self.eps).sqrt() * g[j] + b[j];
        }
        Ok(a)
    }
}

/// One training minibatch: labeled support rows and unlabeled query rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub xs: Tensor,
    pub ys: Vec<usize>,
    pub xq: Tensor,
}

impl Batch {
    /// Uniform draw with replacement of `n` support and `n` query rows.
    pub fn sample<R: Rng + ?Sized>(view: &TrainView<'_>, n: usize, rng: &mut R) -> Self {
        let ns = view.support_x.rows();
        let nq = view.query_x.rows();
        let si: Vec<usize> = (0..if ns == 0 { 0 } else { n })
            .map(|_| rng.random_range(0..ns))
            .collect();
        let qi: Vec<usize> = (0..if nq == 0 { 0 } else { n })
            .map(|_| rng.random_range(0..nq))
            .collect();
        Self {
            xs: view.support_x.select_rows(&si),
            ys: si.iter().map(|&i| view.support_y[i]).collect(),
            xq: view.query_x.select_rows(&qi),
        }
    }
}

/// Scalar components of the inference objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub kl: f64,
    pub disparity_support: f64,
    pub disparity_query: f64,
    pub total: f64,
}

/// Handles into a recorded inference objective.
#[derive(Clone, Copy, Debug)]
pub struct InferenceGraph {
    pub h_s: Var,
    pub h_q: Var,
    pub mu_s: Var,
    pub logvar_s: Var,
    pub loss: Var,
    pub coeff: f64,
    pub parts: LossParts,
}

/// Margin disparity between the hypothesis `f` and the adversary `f'`.
///
/// `f'` sees the features through a gradient-reversal node with coefficient
/// `coeff`. Returns `(support, query)` where
/// `support = margin * CE(f'(h_s), argmax f(h_s))` and
/// `query = -log(1 - softmax(f'(h_q))[argmax f(h_q)])`. Minimizing their sum
/// trains `f'` to agree with `f` on support and disagree on query, while the
/// reversed gradient drives the features the other way. `f` receives no
/// gradient from these terms since its predictions enter only through argmax.
pub fn mdd_loss(
    tape: &mut Tape,
    f: &Mlp,
    f_adv: &Mlp,
    h_s: Var,
    h_q: Var,
    coeff: f64,
    margin: f64,
) -> Result<(Var, Var)> {
    let pred_s = f.apply(tape.value(h_s))?.argmax_rows();
    let pred_q = if tape.value(h_q).rows() == 0 {
        Vec::new()
    } else {
        f.apply(tape.value(h_q))?.argmax_rows()
    };
    let rs = tape.gradient_reverse(h_s, coeff);
    let adv_s = f_adv.forward(tape, rs)?;
    let ce = tape.softmax_cross_entropy(adv_s, &pred_s)?;
    let support = tape.scale(ce, margin);
    let rq = tape.gradient_reverse(h_q, coeff);
    let query = if tape.value(rq).rows() == 0 {
        let empty = tape.constant(Tensor::zeros(&[0, f_adv.output_dim()]));
        tape.neg_log_one_minus_softmax(empty, &[])?
    } else {
        let adv_q = f_adv.forward(tape, rq)?;
        tape.neg_log_one_minus_softmax(adv_q, &pred_q)?
    };
    Ok((support, query))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceState {
    pub cfg: InferenceConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// Hypothesis `f`.
    pub f: Mlp,
    /// Adversary `f'`, same architecture as `f`.
    pub f_adv: Mlp,
    /// Optimization steps taken so far; drives the reversal coefficient.
    pub step: u64,
}

impl InferenceState {
    pub fn new<R: Rng + ?Sized>(cfg: InferenceConfig, rng: &mut R) -> Self {
        let encoder = Encoder::new(&cfg, rng);
        let decoder = Decoder::new(&cfg, rng);
        let dims = [cfg.feature_dim, cfg.hidden_dim, cfg.num_classes];
        let f = Mlp::new("f", &dims, rng);
        let f_adv = Mlp::new("f_adv", &dims, rng);
        Self {
            cfg,
            encoder,
            decoder,
            f,
            f_adv,
            step: 0,
        }
    }

    pub fn encode(&self, x: &Tensor, c: usize) -> Result<(Tensor, Tensor)> {
        self.encoder.encode(x, c)
    }

    pub fn decode(&self, z: &Tensor, c: usize) -> Result<Tensor> {
        self.decoder.decode(z, c)
    }

    /// Deterministic evaluation features: decode the posterior mean.
    pub fn features(&self, x: &Tensor, c: usize) -> Result<Tensor> {
        let (mu, _) = self.encode(x, c)?;
        self.decode(&mu, c)
    }

    pub fn grl_coeff(&self) -> f64 {
        self.cfg.grl.coeff(self.step)
    }

    /// Record the inference objective for one batch on `tape`. Support and
    /// query rows are decoded as one batch so they share normalization
    /// statistics.
    pub fn build_loss<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        batch: &Batch,
        c: usize,
        rng: &mut R,
    ) -> Result<InferenceGraph> {
        let ns = batch.xs.rows();
        let nq = batch.xq.rows();
        if ns == 0 {
            return Err(Error::Invalid("inference batch needs support rows".into()));
        }
        let x = if nq > 0 {
            Tensor::vstack(&[&batch.xs, &batch.xq])?
        } else {
            batch.xs.clone()
        };
        let (mu, logvar) = self.encoder.forward(tape, &x, c, false)?;
        let d = self.cfg.latent_dim;
        let noise: Vec<f64> = (0..(ns + nq) * d).map(|_| rng.sample(StandardNormal)).collect();
        let z = tape.reparameterize(mu, logvar, Tensor::matrix(ns + nq, d, noise)?)?;
        let h = self.decoder.forward_train(tape, z, c)?;
        let h_s = tape.slice_rows(h, 0, ns)?;
        let h_q = tape.slice_rows(h, ns, ns + nq)?;
        let mu_s = tape.slice_rows(mu, 0, ns)?;
        let logvar_s = tape.slice_rows(logvar, 0, ns)?;

        let logits = self.f.forward(tape, h_s)?;
        let ce = tape.softmax_cross_entropy(logits, &batch.ys)?;

        let centered = match self.decoder.prior_means {
            Some(pid) => {
                let rows: Vec<usize> = batch.ys.iter().map(|&y| self.decoder.prior_row(c, y)).collect();
                let width = self.cfg.condition_count * self.cfg.num_classes;
                let onehot = tape.constant(Tensor::one_hot(&rows, width)?);
                let table = self.decoder.store.bind(tape, pid);
                let m = tape.matmul(onehot, table)?;
                tape.sub(mu_s, m)?
            }
            None => mu_s,
        };
        let kl = tape.gaussian_kl(centered, logvar_s)?;
        let kl_w = tape.scale(kl, self.cfg.kl_weight);
        let mut total = tape.add(ce, kl_w)?;
        let coeff = self.grl_coeff();
        let (mut ds, mut dq) = (0.0, 0.0);
        if self.cfg.beta != 0.0 {
            let (s, q) = mdd_loss(tape, &self.f, &self.f_adv, h_s, h_q, coeff, self.cfg.margin)?;
            ds = tape.value(s).item();
            dq = tape.value(q).item();
            let disc = tape.add(s, q)?;
            let weighted = tape.scale(disc, self.cfg.beta);
            total = tape.add(total, weighted)?;
        }
        let parts = LossParts {
            ce: tape.value(ce).item(),
            kl: tape.value(kl).item(),
            disparity_support: ds,
            disparity_query: dq,
            total: tape.value(total).item(),
        };
        Ok(InferenceGraph {
            h_s,
            h_q,
            mu_s,
            logvar_s,
            loss: total,
            coeff,
            parts,
        })
    }

    pub fn zero_grad(&mut self) {
        self.encoder.store.zero_grad();
        self.decoder.store.zero_grad();
        self.f.store.zero_grad();
        self.f_adv.store.zero_grad();
    }

    pub fn accumulate(&mut self, tape: &Tape, grads: &Grads) {
        self.encoder.store.accumulate(tape, grads);
        self.decoder.store.accumulate(tape, grads);
        self.f.store.accumulate(tape, grads);
        self.f_adv.store.accumulate(tape, grads);
    }

    pub fn grads_finite(&self) -> bool {
        self.encoder.store.grads_finite()
            && self.decoder.store.grads_finite()
            && self.f.store.grads_finite()
            && self.f_adv.store.grads_finite()
    }

    pub fn params_finite(&self) -> bool {
        self.encoder.store.values_finite()
            && self.decoder.store.values_finite()
            && self.f.store.values_finite()
            && self.f_adv.store.values_finite()
    }

    /// Apply accumulated gradients and advance the step counter.
    pub fn optimizer_step(&mut self, opt: &Optimizers) {
        self.encoder.store.adam_step(&opt.inference);
        self.decoder.store.adam_step(&opt.inference);
        self.f.store.sgd_step(&opt.heads);
        self.f_adv.store.sgd_step(&opt.heads);
        self.step += 1;
    }

    /// One optimization step on the inference objective alone.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &Batch,
        c: usize,
        opt: &Optimizers,
        rng: &mut R,
    ) -> Result<LossParts> {
        let mut tape = Tape::new();
        let g = self.build_loss(&mut tape, batch, c, rng)?;
        if !g.parts.total.is_finite() {
            return Err(Error::NonFinite {
                step: self.step as usize,
                what: "inference loss".into(),
            });
        }
        let grads = tape.backward(g.loss)?;
        self.zero_grad();
        self.accumulate(&tape, &grads);
        if !self.grads_finite() {
            return Err(Error::NonFinite {
                step: self.step as usize,
                what: "inference gradients".into(),
            });
        }
        self.optimizer_step(opt);
        Ok(g.parts)
    }

    /// Train the inference module alone on one environment.
    pub fn warmup<R: Rng + ?Sized>(
        &mut self,
        env: &TrainView<'_>,
        steps: usize,
        batch_size: usize,
        opt: &Optimizers,
        rng: &mut R,
    ) -> Result<Option<LossParts>> {
        let mut last = None;
        for _ in 0..steps {
            let batch = Batch::sample(env, batch_size, rng);
            last = Some(self.train_step(&batch, env.index, opt, rng)?);
        }
        Ok(last)
    }
}
