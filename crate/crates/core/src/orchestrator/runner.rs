use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bound::{
    compute_bound, estimate_c_star, estimate_kl_term, estimate_lambda, BoundEstimate, EnvBoundTerms, EnvFeatures,
};
use super::metrics::{BoundLog, BoundRow, MetricsLog, MetricsRow};
use super::{ReplayKind, RunConfig};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::inference::{Batch, InferenceState};
use crate::nn::Mlp;
use crate::replay::{
    augment_split, generate_features, memory_sample, noise_sample, split_even, take_snapshot, LabelSource,
    MemoryBank, Snapshot,
};
use crate::solver::{accuracy, eval_features, evaluate_accuracy, snapshot_for, Classifier, Scope, SolverState};
use crate::streams::{EvalAccess, Stream};

/// Stream offset for the estimator generator, so enabling the bound does not
/// change the training trajectory.
const PROBE_STREAM: u64 = 1;
const C_STAR_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Serializable position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

mod rng_serde {
    use super::RngState;
    use rand_chacha::ChaCha8Rng;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(rng: &ChaCha8Rng, s: S) -> Result<S::Ok, S::Error> {
        RngState::capture(rng).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ChaCha8Rng, D::Error> {
        Ok(RngState::deserialize(d)?.restore())
    }
}

/// Everything one run owns. Serializes into the checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Runner {
    pub config: RunConfig,
    pub inference: InferenceState,
    pub solver: SolverState,
    pub snapshots: Vec<Snapshot>,
    pub memory: MemoryBank,
    #[serde(with = "rng_serde")]
    pub rng: ChaCha8Rng,
    #[serde(with = "rng_serde")]
    pub probe_rng: ChaCha8Rng,
    pub metrics: MetricsLog,
    pub bounds: BoundLog,
    pub global_step: u64,
    /// Environments fully trained so far.
    pub envs_done: usize,
    lambda_cache: BTreeMap<usize, f64>,
}

#[derive(Default)]
struct LossWindow {
    inference: f64,
    solver: f64,
    count: usize,
}

impl LossWindow {
    fn add(&mut self, inf: f64, sol: f64) {
        self.inference += inf;
        self.solver += sol;
        self.count += 1;
    }

    fn take(&mut self) -> (f64, f64) {
        let n = self.count.max(1) as f64;
        let out = (self.inference / n, self.solver / n);
        *self = Self::default();
        out
    }
}

/// Reject a stream the configuration cannot run on.
pub fn check_stream(stream: &Stream, config: &RunConfig) -> Result<()> {
    config.validate()?;
    if stream.is_empty() {
        return Err(Error::NoEnvironments);
    }
    for e in &stream.environments {
        if !e.has_eval_labels() {
            return Err(Error::Config {
                key: "stream".into(),
                msg: format!("env {} has no evaluation labels for its query set", e.index),
            });
        }
        if e.support_y().is_empty() {
            return Err(Error::Config {
                key: "stream".into(),
                msg: format!("env {} has an empty support set", e.index),
            });
        }
    }
    Ok(())
}

impl Runner {
    pub fn new(stream: &Stream, config: RunConfig) -> Result<Self> {
        check_stream(stream, &config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed);
        probe_rng.set_stream(PROBE_STREAM);
        let icfg = config
            .model
            .inference(stream.input_dim, stream.len(), stream.num_classes);
        let inference = InferenceState::new(icfg, &mut rng);
        let solver = SolverState::new(
            config.model.feature_dim,
            config.model.solver_hidden,
            stream.num_classes,
            &mut rng,
        );
        Ok(Self {
            memory: MemoryBank::new(config.memory_capacity),
            config,
            inference,
            solver,
            snapshots: Vec::new(),
            rng,
            probe_rng,
            metrics: MetricsLog::new(),
            bounds: BoundLog::default(),
            global_step: 0,
            envs_done: 0,
            lambda_cache: BTreeMap::new(),
        })
    }

    /// The network that serves predictions: the solver, or `f` when task
    /// confusion is off.
    pub fn classifier_net(&self) -> &Mlp {
        if self.config.task_confusion {
            &self.solver.net
        } else {
            &self.inference.f
        }
    }

    fn non_finite(&self, what: &str) -> Error {
        Error::NonFinite {
            step: self.global_step as usize,
            what: what.into(),
        }
    }

    /// Train on every remaining environment of `stream`.
    pub fn run(&mut self, stream: &Stream) -> Result<()> {
        check_stream(stream, &self.config)?;
        while self.envs_done < stream.len() {
            self.train_env(stream, self.envs_done)?;
        }
        Ok(())
    }

    /// Warmup, joint training, snapshot capture and boundary evaluation for
    /// environment `t`.
    pub fn train_env(&mut self, stream: &Stream, t: usize) -> Result<()> {
        if t != self.envs_done {
            return Err(Error::Invalid(format!(
                "environment {t} presented out of order, expected {}",
                self.envs_done
            )));
        }
        let env = &stream.environments[t];
        let view = env.train_view();
        let cfg = self.config.clone();

        if cfg.train_solver_from_scratch_per_env && t > 0 {
            self.solver = SolverState::new(
                cfg.model.feature_dim,
                cfg.model.solver_hidden,
                stream.num_classes,
                &mut self.rng,
            );
        }
        for _ in 0..cfg.effective_warmup_steps() {
            let batch = Batch::sample(&view, cfg.batch_size, &mut self.rng);
            self.inference
                .train_step(&batch, t, &cfg.optim, &mut self.rng)
                .map_err(|e| match e {
                    Error::NonFinite { what, .. } => Error::NonFinite {
                        step: self.global_step as usize,
                        what,
                    },
                    other => other,
                })?;
            self.global_step += 1;
        }

        let mut window = LossWindow::default();
        for s in 0..cfg.steps_per_env {
            let batch = Batch::sample(&view, cfg.batch_size, &mut self.rng);
            let (li, ls) = self.joint_step(stream, t, &batch)?;
            self.global_step += 1;
            window.add(li, ls);
            let done = s + 1;
            if done % cfg.eval_every == 0 && done != cfg.steps_per_env {
                let losses = window.take();
                self.log_eval(stream, t, losses, false, None)?;
            }
        }

        if cfg.snapshot {
            let snap = take_snapshot(&self.inference, &view, cfg.with_encoder_snapshot)?;
            self.snapshots.push(snap);
        }
        if cfg.replay == ReplayKind::Memory {
            let h = eval_features(
                &self.inference,
                snapshot_for(&self.snapshots, t),
                view.support_x,
                t,
            )?;
            self.memory.store(t, &h, view.support_y, &mut self.rng)?;
        }
        self.envs_done = t + 1;
        let bound = if cfg.estimate_bound {
            Some(self.boundary_bound(stream)?)
        } else {
            None
        };
        let losses = window.take();
        self.log_eval(stream, t, losses, true, bound.as_ref())
    }

    /// Replayed `(features, labels)` batches, one per past environment.
    pub fn replay_batches(&mut self, stream: &Stream, t: usize) -> Result<Vec<(Tensor, Vec<usize>)>> {
        if t == 0 || self.config.replay == ReplayKind::None {
            return Ok(Vec::new());
        }
        let mut out = Vec::with_capacity(t);
        for (i, k) in split_even(self.config.batch_size, t).into_iter().enumerate() {
            if k == 0 {
                continue;
            }
            let batch = match self.config.replay {
                ReplayKind::Generative => {
                    let snap = snapshot_for(&self.snapshots, i)
                        .ok_or_else(|| Error::Invalid(format!("no snapshot for env {i}")))?;
                    generate_features(snap, k, self.config.label_source, &mut self.rng)?
                }
                ReplayKind::Memory => memory_sample(&self.memory, i, k, &mut self.rng)?,
                ReplayKind::Noise => {
                    let classes = stream.environments[i].classes();
                    noise_sample(self.config.model.feature_dim, k, &classes, &mut self.rng)?
                }
                ReplayKind::None => unreachable!(),
            };
            out.push(batch);
        }
        Ok(out)
    }

    /// Current solver batch: real support features, with a fraction
    /// replaced by features generated from past snapshots when augmenting.
    fn current_term(&mut self, tape: &mut Tape, h_s: Var, ys: &[usize], t: usize) -> Result<(Var, Vec<usize>)> {
        let past: Vec<&Snapshot> = self.snapshots.iter().filter(|s| s.env < t).collect();
        if self.config.augment_ratio == 0.0 || past.is_empty() {
            return Ok((h_s, ys.to_vec()));
        }
        let (real, generated) = augment_split(ys.len(), self.config.augment_ratio)?;
        let mut parts = vec![tape.slice_rows(h_s, 0, real)?];
        let mut labels = ys[..real].to_vec();
        for (snap, k) in past.iter().zip(split_even(generated, past.len())) {
            if k == 0 {
                continue;
            }
            let (g, gy) = generate_features(snap, k, self.config.label_source, &mut self.rng)?;
            parts.push(tape.constant(g));
            labels.extend(gy);
        }
        Ok((tape.concat_rows(&parts)?, labels))
    }

    fn joint_step(&mut self, stream: &Stream, t: usize, batch: &Batch) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let g = self.inference.build_loss(&mut tape, batch, t, &mut self.rng)?;
        let replay = self.replay_batches(stream, t)?;
        let mut total = g.loss;
        let mut solver_loss = 0.0;
        if self.config.task_confusion {
            let (h, y) = self.current_term(&mut tape, g.h_s, &batch.ys, t)?;
            let sl = self.solver.loss(&mut tape, Some((h, &y)), &replay)?;
            solver_loss = tape.value(sl).item();
            total = tape.add(total, sl)?;
        } else {
            for (h, y) in &replay {
                let hv = tape.constant(h.clone());
                let logits = self.inference.f.forward(&mut tape, hv)?;
                let ce = tape.softmax_cross_entropy(logits, y)?;
                solver_loss += tape.value(ce).item();
                total = tape.add(total, ce)?;
            }
        }
        if !tape.value(total).is_finite() {
            return Err(self.non_finite("training loss"));
        }
        let grads = tape.backward(total)?;
        self.inference.zero_grad();
        self.inference.accumulate(&tape, &grads);
        if self.config.task_confusion {
            self.solver.net.store.zero_grad();
            self.solver.net.store.accumulate(&tape, &grads);
        }
        if !self.inference.grads_finite() || !self.solver.net.store.grads_finite() {
            return Err(self.non_finite("gradients"));
        }
        self.inference.optimizer_step(&self.config.optim);
        if self.config.task_confusion {
            self.solver.net.store.sgd_step(&self.config.optim.solver);
        }
        if !self.inference.params_finite() || !self.solver.net.store.values_finite() {
            return Err(self.non_finite("parameters"));
        }
        Ok((g.parts.total, solver_loss))
    }

    /// Query accuracy of environment `env` with the current predictor.
    pub fn accuracy(&self, stream: &Stream, scope: Scope) -> Result<f64> {
        let access = EvalAccess::grant();
        let seen = self.envs_done.max(1).min(stream.len());
        let seen = match scope {
            Scope::Env(i) => seen.max(i + 1),
            _ => seen,
        };
        let clf: &dyn Classifier = self.classifier_net();
        evaluate_accuracy(clf, &self.inference, &self.snapshots, stream, seen, scope, &access)
    }

    fn log_eval(
        &mut self,
        stream: &Stream,
        t: usize,
        losses: (f64, f64),
        boundary: bool,
        bound: Option<&BoundEstimate>,
    ) -> Result<()> {
        let access = EvalAccess::grant();
        let seen = t + 1;
        let clf: &dyn Classifier = self.classifier_net();
        let acc = |scope| evaluate_accuracy(clf, &self.inference, &self.snapshots, stream, seen, scope, &access);
        let row = MetricsRow {
            global_step: self.global_step,
            env: t,
            method: self.config.method.as_str().into(),
            first_task_acc: acc(Scope::FirstTask)?,
            all_seen_acc: acc(Scope::AllSeen)?,
            env_acc: acc(Scope::Env(t))?,
            lambda_hat: bound.map(|b| b.terms[t].lambda_hat),
            kl_hat: bound.map(|b| b.kl_total()),
            bound_rhs: bound.map(|b| b.rhs),
            bound_lhs: bound.map(|b| b.lhs),
            loss_inference: losses.0,
            loss_solver: losses.1,
            boundary,
        };
        if !row.loss_inference.is_finite() {
            return Err(self.non_finite("logged loss"));
        }
        self.metrics.push(row)
    }

    /// Labeled evaluation-path features of environment `i`.
    pub fn env_features(&self, stream: &Stream, i: usize) -> Result<EnvFeatures> {
        let access = EvalAccess::grant();
        let e = &stream.environments[i];
        let snap = snapshot_for(&self.snapshots, i);
        Ok(EnvFeatures {
            support_h: eval_features(&self.inference, snap, e.support_x(), i)?,
            support_y: e.support_y().to_vec(),
            query_h: eval_features(&self.inference, snap, e.query_x(), i)?,
            query_y: e.eval_labels(&access)?.to_vec(),
        })
    }

    /// Assemble the bound over all environments seen so far.
    pub fn boundary_bound(&mut self, stream: &Stream) -> Result<BoundEstimate> {
        let seen = self.envs_done;
        let mut terms = Vec::with_capacity(seen);
        let mut feats = Vec::with_capacity(seen);
        for i in 0..seen {
            let f = self.env_features(stream, i)?;
            let clf = self.classifier_net();
            let support_error = 1.0 - accuracy(&clf.predict(&f.support_h)?, &f.support_y);
            let query_error = 1.0 - accuracy(&clf.predict(&f.query_h)?, &f.query_y);
            let snap = snapshot_for(&self.snapshots, i);
            let frozen = snap.is_some_and(|s| s.encoder.is_some());
            let lambda_hat = match self.lambda_cache.get(&i) {
                Some(&l) if frozen => l,
                _ => {
                    let l = estimate_lambda(&f.support_h, &f.query_h, &self.config.probe, &mut self.probe_rng)?;
                    if frozen {
                        self.lambda_cache.insert(i, l);
                    }
                    l
                }
            };
            let generator_ok =
                self.config.label_source == LabelSource::Hypothesis || self.config.model.class_prior;
            let kl = match snap {
                Some(s) if i + 1 < seen && generator_ok => {
                    let view = stream.environments[i].train_view();
                    let net = if self.config.task_confusion {
                        &self.solver.net
                    } else {
                        &self.inference.f
                    };
                    Some(estimate_kl_term(
                        s,
                        net,
                        &self.inference,
                        &view,
                        self.config.label_source,
                        &mut self.probe_rng,
                    )?)
                }
                _ => None,
            };
            terms.push(EnvBoundTerms {
                env: i,
                support_error,
                lambda_hat,
                kl,
                query_error,
            });
            feats.push(f);
        }
        let c_star = estimate_c_star(
            &feats,
            stream.num_classes,
            &self.config.probe,
            self.config.seed ^ C_STAR_SALT,
        )?;
        let bound = compute_bound(&terms, c_star);
        for e in &bound.terms {
            self.bounds.rows.push(BoundRow {
                global_step: self.global_step,
                boundary: seen,
                env: e.env,
                support_error: e.support_error,
                lambda_hat: e.lambda_hat,
                kl_raw: e.kl.map(|k| k.raw),
                kl_hat: e.kl.map_or(0.0, |k| k.value),
                query_error: e.query_error,
                c_star,
                bound_rhs: bound.rhs,
                bound_lhs: bound.lhs,
            });
        }
        Ok(bound)
    }
}

/// Build a runner for `stream` and train it through every environment.
pub fn run_scenario(stream: &Stream, config: &RunConfig) -> Result<Runner> {
    let mut runner = Runner::new(stream, config.clone())?;
    runner.run(stream)?;
    Ok(runner)
}
