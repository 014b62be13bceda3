//! Estimators for the terms of the query-error bound.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Tape, Tensor};
use crate::error::{Error, Result};
use crate::inference::InferenceState;
use crate::nn::Mlp;
use crate::replay::{generate_features, LabelSource, Snapshot};
use crate::solver::{accuracy, eval_features};
use crate::streams::TrainView;

/// Settings for the small probe networks behind the estimators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Hidden width of the domain classifier.
    pub domain_hidden: usize,
    pub domain_iters: usize,
    pub domain_lr: f64,
    /// Fraction of each side held out for the domain error.
    pub holdout_fraction: f64,
    pub joint_hidden: usize,
    pub joint_steps: usize,
    pub joint_batch: usize,
    pub joint_lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            domain_hidden: 16,
            domain_iters: 200,
            domain_lr: 0.01,
            holdout_fraction: 0.5,
            joint_hidden: 32,
            joint_steps: 400,
            joint_batch: 128,
            joint_lr: 0.01,
        }
    }
}

/// Column means and standard deviations (floored) of `x`.
fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows() as f64, x.cols());
    let mut mean = vec![0.0; d];
    for r in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for r in 0..x.rows() {
        for ((s, v), m) in sd.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    sd.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));
    (mean, sd)
}

fn standardize(x: &Tensor, mean: &[f64], sd: &[f64]) -> Tensor {
    let mut out = x.clone();
    let d = x.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v - mean[i % d]) / sd[i % d];
    }
    out
}

fn adam_fit<R: Rng + ?Sized>(
    net: &mut Mlp,
    x: &Tensor,
    y: &[usize],
    steps: usize,
    batch: Option<usize>,
    lr: f64,
    rng: &mut R,
) -> Result<()> {
    let cfg = AdamConfig {
        lr,
        ..Default::default()
    };
    for _ in 0..steps {
        let (bx, by) = match batch {
            Some(b) if b < y.len() => {
                let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..y.len())).collect();
                (x.select_rows(&idx), idx.iter().map(|&i| y[i]).collect::<Vec<_>>())
            }
            _ => (x.clone(), y.to_vec()),
        };
        let mut tape = Tape::new();
        let xv = tape.constant(bx);
        let logits = net.forward(&mut tape, xv)?;
        let loss = tape.softmax_cross_entropy(logits, &by)?;
        let grads = tape.backward(loss)?;
        net.store.zero_grad();
        net.store.accumulate(&tape, &grads);
        net.store.adam_step(&cfg);
    }
    Ok(())
}

/// Proxy A-distance `2 (1 - 2 err)` between two feature samples, clamped to
/// `[0, 2]`. Both sides are subsampled to the same size, split into train
/// and held-out parts, and a small MLP is trained to tell them apart; `err`
/// is its held-out error.
pub fn estimate_lambda<R: Rng + ?Sized>(
    h_s: &Tensor,
    h_q: &Tensor,
    probe: &ProbeConfig,
    rng: &mut R,
) -> Result<f64> {
    if h_s.rows() < 4 || h_q.rows() < 4 {
        return Err(Error::Invalid(format!(
            "domain divergence needs at least 4 rows per side, got {} and {}",
            h_s.rows(),
            h_q.rows()
        )));
    }
    if h_s.cols() != h_q.cols() {
        return Err(Error::shape("estimate_lambda", h_s.shape(), h_q.shape()));
    }
    let n = h_s.rows().min(h_q.rows());
    let n_test = ((n as f64 * probe.holdout_fraction).round() as usize).clamp(1, n - 1);
    let n_train = n - n_test;
    let mut split = |h: &Tensor| {
        let mut idx: Vec<usize> = (0..h.rows()).collect();
        idx.shuffle(rng);
        (h.select_rows(&idx[..n_train]), h.select_rows(&idx[n_train..n]))
    };
    let (s_train, s_test) = split(h_s);
    let (q_train, q_test) = split(h_q);
    let train = Tensor::vstack(&[&s_train, &q_train])?;
    let test = Tensor::vstack(&[&s_test, &q_test])?;
    let (mean, sd) = column_stats(&train);
    let train = standardize(&train, &mean, &sd);
    let test = standardize(&test, &mean, &sd);
    let labels = |k: usize| -> Vec<usize> { (0..2 * k).map(|i| usize::from(i >= k)).collect() };

    let mut net = Mlp::new("domain", &[h_s.cols(), probe.domain_hidden, 2], rng);
    adam_fit(&mut net, &train, &labels(n_train), probe.domain_iters, None, probe.domain_lr, rng)?;
    let err = 1.0 - accuracy(&net.predict(&test)?, &labels(n_test));
    Ok((2.0 * (1.0 - 2.0 * err)).clamp(0.0, 2.0))
}

/// Gap between the classifier's loss on generated and on real features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub raw: f64,
    /// `raw` clamped at zero.
    pub value: f64,
}

impl KlEstimate {
    pub fn from_raw(raw: f64) -> Self {
        Self {
            raw,
            value: raw.max(0.0),
        }
    }
}

/// Loss of `clf` on features generated by `snap` minus its loss on the real
/// support features of the same environment, both through the snapshot's
/// evaluation path. As many generated rows as support rows are drawn.
pub fn estimate_kl_term<R: Rng + ?Sized>(
    snap: &Snapshot,
    clf: &Mlp,
    inference: &InferenceState,
    env: &TrainView<'_>,
    source: LabelSource,
    rng: &mut R,
) -> Result<KlEstimate> {
    let real = eval_features(inference, Some(snap), env.support_x, snap.condition)?;
    let real_nll = clf.nll(&real, env.support_y)?;
    let (gen, gy) = generate_features(snap, env.support_y.len(), source, rng)?;
    let gen_nll = clf.nll(&gen, &gy)?;
    Ok(KlEstimate::from_raw(gen_nll - real_nll))
}

/// Measured quantities for one environment at a boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvBoundTerms {
    pub env: usize,
    pub support_error: f64,
    pub lambda_hat: f64,
    /// Absent for the newest environment and when no generator exists.
    pub kl: Option<KlEstimate>,
    pub query_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub terms: Vec<EnvBoundTerms>,
    pub c_star: f64,
    pub rhs: f64,
    pub lhs: f64,
}

impl BoundEstimate {
    pub fn kl_total(&self) -> f64 {
        let t = self.terms.len();
        self.terms
            .iter()
            .take(t.saturating_sub(1))
            .filter_map(|e| e.kl.map(|k| k.value))
            .fold(0.0, |a, b| a + b)
    }

    pub fn holds_with_slack(&self, slack: f64) -> bool {
        self.lhs <= self.rhs + slack
    }
}

/// `rhs = sum_i (support_i + lambda_i) + sum_{i<t} kl_i + c_star`,
/// `lhs = sum_i query_i`.
pub fn compute_bound(terms: &[EnvBoundTerms], c_star: f64) -> BoundEstimate {
    let t = terms.len();
    let mut rhs = 0.0;
    for e in terms {
        rhs += e.support_error + e.lambda_hat;
    }
    for e in terms.iter().take(t.saturating_sub(1)) {
        if let Some(k) = e.kl {
            rhs += k.value;
        }
    }
    rhs += c_star;
    let lhs = terms.iter().fold(0.0, |a, e| a + e.query_error);
    BoundEstimate {
        terms: terms.to_vec(),
        c_star,
        rhs,
        lhs,
    }
}

/// Labeled features of one environment, query labels included.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvFeatures {
    pub support_h: Tensor,
    pub support_y: Vec<usize>,
    pub query_h: Tensor,
    pub query_y: Vec<usize>,
}

/// Sum over environments of support plus query error of one reference
/// classifier trained on the pooled labeled data of both streams.
///
/// The pooled rows are put in a canonical order first, so the result does
/// not depend on the order of `data`.
pub fn estimate_c_star(data: &[EnvFeatures], num_classes: usize, probe: &ProbeConfig, seed: u64) -> Result<f64> {
    let parts: Vec<(&Tensor, &[usize])> = data
        .iter()
        .flat_map(|e| [(&e.support_h, e.support_y.as_slice()), (&e.query_h, e.query_y.as_slice())])
        .filter(|(h, _)| h.rows() > 0)
        .collect();
    if parts.is_empty() {
        return Ok(0.0);
    }
    for (h, y) in &parts {
        if h.rows() != y.len() {
            return Err(Error::shape("estimate_c_star", h.shape(), &[y.len(), h.cols()]));
        }
    }
    let tensors: Vec<&Tensor> = parts.iter().map(|p| p.0).collect();
    let pooled = Tensor::vstack(&tensors)?;
    let labels: Vec<usize> = parts.iter().flat_map(|p| p.1.iter().copied()).collect();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| {
        labels[a].cmp(&labels[b]).then_with(|| {
            pooled
                .row(a)
                .iter()
                .zip(pooled.row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let x = pooled.select_rows(&order);
    let y: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    let (mean, sd) = column_stats(&x);
    let x = standardize(&x, &mean, &sd);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = probe.joint_hidden;
    let mut net = Mlp::new("joint", &[x.cols(), h, h, num_classes], &mut rng);
    adam_fit(&mut net, &x, &y, probe.joint_steps, Some(probe.joint_batch), probe.joint_lr, &mut rng)?;

    let mut total = 0.0;
    for (hm, ym) in parts {
        let pred = net.predict(&standardize(hm, &mean, &sd))?;
        total += 1.0 - accuracy(&pred, ym);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn term(s: f64, l: f64, k: Option<f64>, q: f64) -> EnvBoundTerms {
        EnvBoundTerms {
            env: 0,
            support_error: s,
            lambda_hat: l,
            kl: k.map(KlEstimate::from_raw),
            query_error: q,
        }
    }

    #[test]
    fn single_env_bound_has_no_kl() {
        let b = compute_bound(&[term(0.1, 0.3, Some(5.0), 0.2)], 0.05);
        assert_eq!(b.rhs, 0.1 + 0.3 + 0.05);
        assert_eq!(b.lhs, 0.2);
    }

    #[test]
    fn kl_clamped_and_summed_for_past_envs() {
        let b = compute_bound(
            &[term(0.0, 0.0, Some(-0.5), 0.0), term(0.0, 0.0, Some(0.25), 0.0), term(0.0, 0.0, None, 0.0)],
            0.0,
        );
        assert_eq!(b.rhs, 0.25);
        assert_eq!(b.terms[0].kl.unwrap().raw, -0.5);
        assert_eq!(compute_bound(&[term(0.0, 0.0, None, 0.0)], 0.0).rhs, 0.0);
    }

    #[test]
    fn lambda_rejects_tiny_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::zeros(&[3, 2]);
        let b = Tensor::zeros(&[10, 2]);
        assert!(estimate_lambda(&a, &b, &ProbeConfig::default(), &mut rng).is_err());
    }
}
