//! Frozen decoder snapshots and the three replay sources: generated
//! features, stored real features, and Gaussian noise.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::inference::{Decoder, Encoder, InferenceState};
use crate::nn::Mlp;
use crate::streams::TrainView;

/// How generated features get their labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Sample the class first, then `z` around that class's prior mean.
    #[default]
    ClassPrior,
    /// Sample `z`, decode, and label with the frozen hypothesis restricted
    /// to the classes seen in the environment.
    Hypothesis,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::ClassPrior => "class_prior",
            LabelSource::Hypothesis => "hypothesis",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "class_prior" => Some(LabelSource::ClassPrior),
            "hypothesis" => Some(LabelSource::Hypothesis),
            _ => None,
        }
    }
}

/// Frozen copy of the generative path after an environment finished.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub env: usize,
    pub condition: usize,
    pub decoder: Decoder,
    pub encoder: Option<Encoder>,
    pub hypothesis: Mlp,
    /// Class frequencies of the environment's support set.
    pub label_prior: Vec<f64>,
    digest: String,
}

impl Snapshot {
    /// SHA-256 over every frozen parameter and the decoder's running stats.
    pub fn compute_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.decoder.store.digest());
        h.update(serde_json::to_vec(&self.decoder).unwrap_or_default());
        if let Some(e) = &self.encoder {
            h.update(e.store.digest());
        }
        h.update(self.hypothesis.store.digest());
        for p in &self.label_prior {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Digest recorded at capture time.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn is_intact(&self) -> bool {
        self.compute_digest() == self.digest
    }

    pub fn classes(&self) -> Vec<usize> {
        self.label_prior
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.decoder.feature_dim()
    }
}

pub fn label_prior(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::Label {
                label: y,
                classes: num_classes,
            });
        }
        counts[y] += 1.0;
    }
    let n = labels.len() as f64;
    if n > 0.0 {
        counts.iter_mut().for_each(|c| *c /= n);
    }
    Ok(counts)
}

pub fn take_snapshot(state: &InferenceState, env: &TrainView<'_>, with_encoder: bool) -> Result<Snapshot> {
    let mut snap = Snapshot {
        env: env.index,
        condition: env.index,
        decoder: state.decoder.clone(),
        encoder: with_encoder.then(|| state.encoder.clone()),
        hypothesis: state.f.clone(),
        label_prior: label_prior(env.support_y, state.cfg.num_classes)?,
        digest: String::new(),
    };
    snap.digest = snap.compute_digest();
    Ok(snap)
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

fn draw_labels<R: Rng + ?Sized>(prior: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let dist = WeightedIndex::new(prior)
        .map_err(|e| Error::Invalid(format!("label prior: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Sample `n` features and labels from a snapshot.
pub fn generate_features<R: Rng + ?Sized>(
    snap: &Snapshot,
    n: usize,
    source: LabelSource,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>)> {
    let d = snap.decoder.latent_dim();
    if n == 0 {
        return Ok((Tensor::zeros(&[0, snap.feature_dim()]), Vec::new()));
    }
    let ys = draw_labels(&snap.label_prior, n, rng)?;
    let mut z = gaussian(n, d, rng);
    if snap.decoder.has_class_prior() {
        for (i, &y) in ys.iter().enumerate() {
            let m = snap.decoder.prior_mean(snap.condition, y);
            for (k, v) in z.data_mut()[i * d..(i + 1) * d].iter_mut().enumerate() {
                *v += m[k];
            }
        }
    } else if source == LabelSource::ClassPrior {
        return Err(Error::Invalid(
            "class-prior labels need a decoder trained with a class prior".into(),
        ));
    }
    let h = snap.decoder.decode(&z, snap.condition)?;
    let ys = match source {
        LabelSource::ClassPrior => ys,
        LabelSource::Hypothesis => {
            let logits = snap.hypothesis.apply(&h)?;
            let allowed = snap.classes();
            (0..n)
                .map(|i| {
                    let row = logits.row(i);
                    *allowed
                        .iter()
                        .max_by(|&&a, &&b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                        .expect("non-empty class set")
                })
                .collect()
        }
    };
    Ok((h, ys))
}

/// Stored real features per environment, capped per class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub capacity_per_class: usize,
    entries: BTreeMap<usize, (Tensor, Vec<usize>)>,
}

impl MemoryBank {
    pub fn new(capacity_per_class: usize) -> Self {
        Self {
            capacity_per_class,
            entries: BTreeMap::new(),
        }
    }

    /// Keep a random subset of at most `capacity_per_class` rows per class.
    pub fn store<R: Rng + ?Sized>(&mut self, env: usize, h: &Tensor, y: &[usize], rng: &mut R) -> Result<()> {
        if h.rows() != y.len() {
            return Err(Error::shape("memory store", h.shape(), &[y.len(), h.cols()]));
        }
        let mut order: Vec<usize> = (0..y.len()).collect();
        order.shuffle(rng);
        let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
        let mut keep = Vec::new();
        for i in order {
            let c = taken.entry(y[i]).or_insert(0);
            if *c < self.capacity_per_class {
                *c += 1;
                keep.push(i);
            }
        }
        keep.sort_unstable();
        let ys = keep.iter().map(|&i| y[i]).collect();
        self.entries.insert(env, (h.select_rows(&keep), ys));
        Ok(())
    }

    pub fn get(&self, env: usize) -> Option<(&Tensor, &[usize])> {
        self.entries.get(&env).map(|(h, y)| (h, y.as_slice()))
    }

    pub fn len(&self, env: usize) -> usize {
        self.entries.get(&env).map_or(0, |(_, y)| y.len())
    }

    pub fn envs(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }
}

/// Uniform draw with replacement from the stored pairs of `env`.
pub fn memory_sample<R: Rng + ?Sized>(
    bank: &MemoryBank,
    env: usize,
    n: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>)> {
    let (h, y) = bank
        .get(env)
        .filter(|(_, y)| !y.is_empty())
        .ok_or_else(|| Error::Invalid(format!("memory bank has no features for env {env}")))?;
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..y.len())).collect();
    Ok((h.select_rows(&idx), idx.iter().map(|&i| y[i]).collect()))
}

/// Standard normal features with labels uniform over `classes`.
pub fn noise_sample<R: Rng + ?Sized>(
    feature_dim: usize,
    n: usize,
    classes: &[usize],
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>)> {
    if classes.is_empty() && n > 0 {
        return Err(Error::Invalid("noise replay needs at least one class".into()));
    }
    let h = gaussian(n, feature_dim, rng);
    let y = (0..n).map(|_| classes[rng.random_range(0..classes.len())]).collect();
    Ok((h, y))
}

/// Split `total` into `parts` nearly equal counts, remainder to the front.
pub fn split_even(total: usize, parts: usize) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

/// `(real, generated)` row counts for a batch of `n` rows at `ratio`.
pub fn augment_split(n: usize, ratio: f64) -> Result<(usize, usize)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("augmentation ratio {ratio} outside [0, 1]")));
    }
    let generated = (n as f64 * ratio).round() as usize;
    Ok((n - generated, generated))
}

/// Replace a `ratio` fraction of the batch with features generated from
/// `snaps`, split evenly across them. Real rows are kept from the front.
pub fn augment_batch<R: Rng + ?Sized>(
    snaps: &[&Snapshot],
    h: &Tensor,
    y: &[usize],
    ratio: f64,
    source: LabelSource,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>)> {
    let (real, generated) = augment_split(y.len(), ratio)?;
    if snaps.is_empty() || generated == 0 {
        return Ok((h.clone(), y.to_vec()));
    }
    let keep: Vec<usize> = (0..real).collect();
    let mut parts = vec![h.select_rows(&keep)];
    let mut ys = y[..real].to_vec();
    for (snap, k) in snaps.iter().zip(split_even(generated, snaps.len())) {
        let (g, gy) = generate_features(snap, k, source, rng)?;
        parts.push(g);
        ys.extend(gy);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok((Tensor::vstack(&refs)?, ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::InferenceConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(rng: &mut ChaCha8Rng) -> InferenceState {
        let mut cfg = InferenceConfig::new(2, 2, 4);
        cfg.latent_dim = 3;
        cfg.feature_dim = 5;
        cfg.hidden_dim = 8;
        InferenceState::new(cfg, rng)
    }

    fn view_data() -> (Tensor, Vec<usize>, Tensor) {
        let xs = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0], [0.5, 0.5], [1.0, 1.0]]).unwrap();
        (xs.clone(), vec![2, 3, 2, 3], xs)
    }

    #[test]
    fn snapshot_isolated_from_live_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut st = state(&mut rng);
        let (xs, ys, xq) = view_data();
        let view = TrainView {
            index: 1,
            support_x: &xs,
            support_y: &ys,
            query_x: &xq,
        };
        let a = take_snapshot(&st, &view, true).unwrap();
        let b = take_snapshot(&st, &view, true).unwrap();
        assert_eq!(a.digest(), b.digest());
        for id in st.decoder.store.ids().collect::<Vec<_>>() {
            st.decoder.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        assert!(a.is_intact());
        assert_eq!(a.label_prior, vec![0.0, 0.0, 0.5, 0.5]);
        assert_eq!(a.classes(), vec![2, 3]);
    }

    #[test]
    fn generated_labels_within_env_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let st = state(&mut rng);
        let (xs, ys, xq) = view_data();
        let view = TrainView {
            index: 0,
            support_x: &xs,
            support_y: &ys,
            query_x: &xq,
        };
        let snap = take_snapshot(&st, &view, false).unwrap();
        for source in [LabelSource::ClassPrior, LabelSource::Hypothesis] {
            let (h, y) = generate_features(&snap, 50, source, &mut rng).unwrap();
            assert_eq!(h.shape(), &[50, 5]);
            assert!(y.iter().all(|&c| c == 2 || c == 3));
        }
        let (h, y) = generate_features(&snap, 0, LabelSource::ClassPrior, &mut rng).unwrap();
        assert_eq!((h.rows(), y.len()), (0, 0));
    }

    #[test]
    fn memory_caps_per_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = Tensor::matrix(6, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let mut bank = MemoryBank::new(2);
        bank.store(0, &h, &[0, 0, 0, 1, 1, 1], &mut rng).unwrap();
        assert_eq!(bank.len(0), 4);
        assert!(memory_sample(&bank, 1, 3, &mut rng).is_err());
        let (s, y) = memory_sample(&bank, 0, 20, &mut rng).unwrap();
        for i in 0..20 {
            assert_eq!(y[i], if s.get(i, 0) < 3.0 { 0 } else { 1 });
        }
    }

    #[test]
    fn split_and_augment_counts() {
        assert_eq!(split_even(7, 3), vec![3, 2, 2]);
        assert_eq!(split_even(5, 0), Vec::<usize>::new());
        assert_eq!(augment_split(64, 0.5).unwrap(), (32, 32));
        assert_eq!(augment_split(64, 0.0).unwrap(), (64, 0));
        assert!(augment_split(64, 1.5).is_err());
    }
}
