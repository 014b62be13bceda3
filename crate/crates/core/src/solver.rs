//! The unified classifier over domain-agnostic features and the evaluation
//! sweep over seen environments.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::inference::InferenceState;
use crate::nn::Mlp;
use crate::replay::Snapshot;
use crate::streams::{EvalAccess, Stream};

/// Anything that maps features to class predictions.
pub trait Classifier {
    fn predict(&self, h: &Tensor) -> Result<Vec<usize>>;
}

impl Classifier for Mlp {
    fn predict(&self, h: &Tensor) -> Result<Vec<usize>> {
        if h.rows() == 0 {
            return Ok(Vec::new());
        }
        Mlp::predict(self, h)
    }
}

/// Two hidden ReLU layers over the feature space, one logit per class of the
/// whole stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub net: Mlp,
}

impl SolverState {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, hidden: usize, num_classes: usize, rng: &mut R) -> Self {
        Self {
            net: Mlp::new("solver", &[feature_dim, hidden, hidden, num_classes], rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn check(&self, h: &Tensor, y: &[usize]) -> Result<()> {
        if h.rows() != y.len() {
            return Err(Error::shape("solver batch", h.shape(), &[y.len(), self.feature_dim()]));
        }
        if h.rows() > 0 && h.cols() != self.feature_dim() {
            return Err(Error::shape("solver batch", h.shape(), &[h.rows(), self.feature_dim()]));
        }
        let k = self.num_classes();
        match y.iter().find(|&&c| c >= k) {
            Some(&label) => Err(Error::Label { label, classes: k }),
            None => Ok(()),
        }
    }

    /// Cross-entropy on the current features (a tape variable, so gradients
    /// reach the inference module) plus one cross-entropy term per replayed
    /// batch.
    pub fn loss(
        &self,
        tape: &mut Tape,
        current: Option<(Var, &[usize])>,
        replayed: &[(Tensor, Vec<usize>)],
    ) -> Result<Var> {
        let mut terms = Vec::new();
        if let Some((h, y)) = current {
            self.check(tape.value(h), y)?;
            if !y.is_empty() {
                let logits = self.net.forward(tape, h)?;
                terms.push(tape.softmax_cross_entropy(logits, y)?);
            }
        }
        for (h, y) in replayed {
            self.check(h, y)?;
            if y.is_empty() {
                continue;
            }
            let hv = tape.constant(h.clone());
            let logits = self.net.forward(tape, hv)?;
            terms.push(tape.softmax_cross_entropy(logits, y)?);
        }
        let mut total = tape.constant(Tensor::scalar(0.0));
        for t in terms {
            total = tape.add(total, t)?;
        }
        Ok(total)
    }

    /// Mean negative log-likelihood, no tape.
    pub fn nll(&self, h: &Tensor, y: &[usize]) -> Result<f64> {
        self.check(h, y)?;
        self.net.nll(h, y)
    }
}

impl Classifier for SolverState {
    fn predict(&self, h: &Tensor) -> Result<Vec<usize>> {
        Classifier::predict(&self.net, h)
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

pub fn snapshot_for(snaps: &[Snapshot], env: usize) -> Option<&Snapshot> {
    snaps.iter().find(|s| s.env == env)
}

/// Evaluation-mode features for environment `env` (condition `env`).
///
/// With a snapshot, its frozen decoder is used, together with its frozen
/// encoder when one was kept; otherwise the live encoder supplies `mu`.
/// Without a snapshot the live path is used.
pub fn eval_features(inference: &InferenceState, snap: Option<&Snapshot>, x: &Tensor, env: usize) -> Result<Tensor> {
    match snap {
        Some(s) => {
            let (mu, _) = match &s.encoder {
                Some(enc) => enc.encode(x, s.condition)?,
                None => inference.encode(x, s.condition)?,
            };
            s.decoder.decode(&mu, s.condition)
        }
        None => inference.features(x, env),
    }
}

/// Like [`eval_features`] but with one posterior draw per row instead of the
/// posterior mean, so the result follows the stochastic feature distribution
/// the inference module is trained on.
pub fn sample_features<R: Rng + ?Sized>(
    inference: &InferenceState,
    snap: Option<&Snapshot>,
    x: &Tensor,
    env: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let (c, (mu, logvar)) = match snap {
        Some(s) => (
            s.condition,
            match &s.encoder {
                Some(enc) => enc.encode(x, s.condition)?,
                None => inference.encode(x, s.condition)?,
            },
        ),
        None => (env, inference.encode(x, env)?),
    };
    let mut z = mu;
    for (v, lv) in z.data_mut().iter_mut().zip(logvar.data()) {
        let e: f64 = rng.sample(StandardNormal);
        *v += (0.5 * lv).exp() * e;
    }
    match snap {
        Some(s) => s.decoder.decode(&z, c),
        None => inference.decode(&z, c),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    FirstTask,
    Env(usize),
    AllSeen,
}

/// Query accuracy for `scope` after `seen` environments were presented.
/// `AllSeen` weights environments equally.
pub fn evaluate_accuracy(
    clf: &dyn Classifier,
    inference: &InferenceState,
    snaps: &[Snapshot],
    stream: &Stream,
    seen: usize,
    scope: Scope,
    access: &EvalAccess,
) -> Result<f64> {
    let one = |env: usize| -> Result<f64> {
        if env >= seen || env >= stream.len() {
            return Err(Error::Invalid(format!("env {env} has not been presented yet")));
        }
        let e = &stream.environments[env];
        let labels = e.eval_labels(access)?;
        let h = eval_features(inference, snapshot_for(snaps, env), e.query_x(), env)?;
        Ok(accuracy(&clf.predict(&h)?, labels))
    };
    match scope {
        Scope::FirstTask => one(0),
        Scope::Env(i) => one(i),
        Scope::AllSeen => {
            if seen == 0 {
                return Err(Error::Invalid("no environment has been presented".into()));
            }
            let mut total = 0.0;
            for i in 0..seen {
                total += one(i)?;
            }
            Ok(total / seen as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_loss_is_zero_and_replay_only_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = SolverState::new(3, 4, 5, &mut rng);
        let mut tape = Tape::new();
        let l = s.loss(&mut tape, None, &[]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let a = (Tensor::from_rows(&[[0.1, 0.2, 0.3]]).unwrap(), vec![1]);
        let b = (Tensor::from_rows(&[[1.0, -0.2, 0.0], [0.0, 0.0, 2.0]]).unwrap(), vec![4, 0]);
        let l = s.loss(&mut tape, None, &[a.clone(), b.clone()]).unwrap();
        let want = s.nll(&a.0, &a.1).unwrap() + s.nll(&b.0, &b.1).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = SolverState::new(2, 4, 3, &mut rng);
        let mut tape = Tape::new();
        let r = s.loss(&mut tape, None, &[(Tensor::zeros(&[1, 2]), vec![3])]);
        assert!(matches!(r, Err(Error::Label { label: 3, .. })));
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 0, 3, 0]), 0.5);
        assert_eq!(accuracy(&[], &[]), 0.0);
    }
}
