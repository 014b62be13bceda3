//! Synthetic non-stationary support/query streams and CSV ingestion.
//!
//! A stream is a sequence of [`Environment`]s. Each environment carries a
//! labeled support set and an unlabeled query set that share one labeling
//! function; the query labels exist only for evaluation and are reachable
//! through [`Environment::eval_labels`], which requires an [`EvalAccess`].
//!
//! Domains are affine-plus-noise transforms of a shared 2-D base
//! distribution:
//!
//! * `moons` with `C` classes: class `2p` is the upper half-circle and class
//!   `2p + 1` the lower, interleaved half-circle of the classic two-moons set,
//!   re-centered on the origin. Every pair occupies the same region, so
//!   consecutive tasks differ only in their labeling.
//! * `blobs` with `C` classes: isotropic Gaussians centered on a ring of
//!   radius [`BLOB_RADIUS`].

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const BLOB_RADIUS: f64 = 2.0;

/// Offset applied to the raw two-moons coordinates so the pair is centered.
pub const MOONS_CENTER: [f64; 2] = [0.5, 0.25];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    TaskDrift,
    DomainDrift,
    Combined,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::TaskDrift => "task_drift",
            Scenario::DomainDrift => "domain_drift",
            Scenario::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "task_drift" => Some(Scenario::TaskDrift),
            "domain_drift" => Some(Scenario::DomainDrift),
            "combined" => Some(Scenario::Combined),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseDistribution {
    Moons { classes: usize },
    Blobs { classes: usize },
}

impl BaseDistribution {
    pub fn classes(&self) -> usize {
        match *self {
            BaseDistribution::Moons { classes } | BaseDistribution::Blobs { classes } => classes,
        }
    }
}

/// Difficulty ordering of query domains for the domain-drift scenario.
/// Difficulty is the transform magnitude, see [`DomainTransform::magnitude`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainOrder {
    AsGiven,
    Ascending,
    Descending,
}

impl DomainOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainOrder::AsGiven => "as_given",
            DomainOrder::Ascending => "ascending",
            DomainOrder::Descending => "descending",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "as_given" => Some(DomainOrder::AsGiven),
            "ascending" => Some(DomainOrder::Ascending),
            "descending" => Some(DomainOrder::Descending),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    pub rotation: f64,
    pub translation: [f64; 2],
    pub scale: f64,
    pub noise_std: f64,
}

impl Default for DomainTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl DomainTransform {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            translation: [0.0, 0.0],
            scale: 1.0,
            noise_std: 0.0,
        }
    }

    pub fn rotation(rad: f64) -> Self {
        Self {
            rotation: rad,
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Spec(format!("transform scale must be > 0, got {}", self.scale)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Spec(format!(
                "transform noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    /// Sort key for difficulty ordering: rotation angle first, then
    /// translation length, scale distortion and noise.
    pub fn magnitude(&self) -> (f64, f64, f64, f64) {
        (
            self.rotation.abs(),
            self.translation[0].hypot(self.translation[1]),
            self.scale.ln().abs(),
            self.noise_std,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub scenario: Scenario,
    pub num_environments: usize,
    /// Label-range sizes, one per task (task drift and combined).
    pub classes_per_task: Vec<usize>,
    pub base: BaseDistribution,
    /// Task drift: `[support, query]`. Domain drift: `[support, query_1..]`.
    /// Combined: a pool sampled per environment.
    pub transforms: Vec<DomainTransform>,
    pub samples_per_class: usize,
    /// Standard deviation of the base distribution around its class shape.
    pub base_noise: f64,
    pub order: DomainOrder,
    pub seed: u64,
}

impl StreamSpec {
    /// Five two-class moons tasks; the query stream is a rotated, shifted
    /// copy of the support stream.
    pub fn moons_tasks(seed: u64) -> Self {
        Self {
            scenario: Scenario::TaskDrift,
            num_environments: 5,
            classes_per_task: vec![2; 5],
            base: BaseDistribution::Moons { classes: 10 },
            transforms: vec![
                DomainTransform::identity(),
                DomainTransform {
                    rotation: 0.5,
                    translation: [1.0, 0.8],
                    scale: 1.0,
                    noise_std: 0.0,
                },
            ],
            samples_per_class: 100,
            base_noise: 0.1,
            order: DomainOrder::AsGiven,
            seed,
        }
    }

    /// One support domain and three rotated query domains over a shared
    /// blob label set.
    pub fn blob_domains(seed: u64, order: DomainOrder) -> Self {
        Self {
            scenario: Scenario::DomainDrift,
            num_environments: 3,
            classes_per_task: Vec::new(),
            base: BaseDistribution::Blobs { classes: 6 },
            transforms: vec![
                DomainTransform::identity(),
                DomainTransform {
                    rotation: 0.15,
                    translation: [0.6, 0.0],
                    scale: 1.0,
                    noise_std: 0.0,
                },
                DomainTransform {
                    rotation: 0.3,
                    translation: [0.0, -0.9],
                    scale: 1.1,
                    noise_std: 0.0,
                },
                DomainTransform {
                    rotation: 0.45,
                    translation: [-1.0, 0.6],
                    scale: 0.85,
                    noise_std: 0.0,
                },
            ],
            samples_per_class: 100,
            base_noise: 0.3,
            order,
            seed,
        }
    }

    pub fn total_classes(&self) -> usize {
        self.base.classes()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_environments == 0 {
            return Err(Error::Spec("num_environments must be positive".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Spec("samples_per_class must be positive".into()));
        }
        if self.total_classes() == 0 {
            return Err(Error::Spec("base distribution needs at least one class".into()));
        }
        if !(self.base_noise >= 0.0) {
            return Err(Error::Spec("base_noise must be >= 0".into()));
        }
        for t in &self.transforms {
            t.validate()?;
        }
        match self.scenario {
            Scenario::TaskDrift | Scenario::Combined => {
                if self.classes_per_task.iter().any(|&c| c == 0) {
                    return Err(Error::Spec("classes_per_task entries must be positive".into()));
                }
                let sum: usize = self.classes_per_task.iter().sum();
                if sum != self.total_classes() {
                    return Err(Error::Spec(format!(
                        "classes_per_task sums to {sum} but the base distribution has {} classes",
                        self.total_classes()
                    )));
                }
                if self.classes_per_task.len() != self.num_environments {
                    return Err(Error::Spec(format!(
                        "classes_per_task has {} tasks but num_environments is {}",
                        self.classes_per_task.len(),
                        self.num_environments
                    )));
                }
                if self.scenario == Scenario::TaskDrift && self.transforms.len() != 2 {
                    return Err(Error::Spec(format!(
                        "task drift needs exactly 2 transforms (support, query), got {}",
                        self.transforms.len()
                    )));
                }
                if self.scenario == Scenario::Combined && self.transforms.len() < 2 {
                    return Err(Error::Spec(format!(
                        "combined scenario needs at least 2 transforms, got {}",
                        self.transforms.len()
                    )));
                }
            }
            Scenario::DomainDrift => {
                if self.transforms.len() != self.num_environments + 1 {
                    return Err(Error::Spec(format!(
                        "domain drift needs 1 support + {} query transforms, got {}",
                        self.num_environments,
                        self.transforms.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Consecutive label ranges, one per task.
    pub fn label_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.classes_per_task
            .iter()
            .map(|&c| {
                let r = start..start + c;
                start += c;
                r
            })
            .collect()
    }
}

/// Proof of evaluation privilege. Training code never constructs one; the
/// evaluation and bound-estimation paths do.
#[derive(Clone, Copy, Debug)]
pub struct EvalAccess {
    _private: (),
}

impl EvalAccess {
    /// Grants access to hidden query labels. Only evaluation code should call
    /// this.
    pub fn grant() -> Self {
        Self { _private: () }
    }
}

/// One time step: labeled support data and unlabeled query data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub index: usize,
    support_x: Tensor,
    support_y: Vec<usize>,
    query_x: Tensor,
    query_labels: Option<Vec<usize>>,
}

/// The training-facing part of an [`Environment`].
#[derive(Clone, Copy, Debug)]
pub struct TrainView<'a> {
    pub index: usize,
    pub support_x: &'a Tensor,
    pub support_y: &'a [usize],
    pub query_x: &'a Tensor,
}

impl Environment {
    pub fn new(
        index: usize,
        support_x: Tensor,
        support_y: Vec<usize>,
        query_x: Tensor,
        query_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if support_x.rows() != support_y.len() {
            return Err(Error::shape("environment support", support_x.shape(), &[support_y.len()]));
        }
        if query_x.rows() > 0 && support_x.rows() > 0 && query_x.cols() != support_x.cols() {
            return Err(Error::shape("environment query", query_x.shape(), support_x.shape()));
        }
        if let Some(l) = &query_labels {
            if l.len() != query_x.rows() {
                return Err(Error::shape("environment query labels", query_x.shape(), &[l.len()]));
            }
        }
        Ok(Self {
            index,
            support_x,
            support_y,
            query_x,
            query_labels,
        })
    }

    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            index: self.index,
            support_x: &self.support_x,
            support_y: &self.support_y,
            query_x: &self.query_x,
        }
    }

    pub fn support_x(&self) -> &Tensor {
        &self.support_x
    }

    pub fn support_y(&self) -> &[usize] {
        &self.support_y
    }

    pub fn query_x(&self) -> &Tensor {
        &self.query_x
    }

    pub fn input_dim(&self) -> usize {
        self.support_x.cols()
    }

    /// Sorted distinct support labels.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.support_y.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Hidden query labels. Errors when the stream carries none.
    pub fn eval_labels(&self, _access: &EvalAccess) -> Result<&[usize]> {
        self.query_labels
            .as_deref()
            .ok_or_else(|| Error::Invalid(format!("environment {} has no query labels", self.index)))
    }

    pub fn has_eval_labels(&self) -> bool {
        self.query_labels.is_some()
    }
}

/// A full stream plus the global label space it lives in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    pub environments: Vec<Environment>,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl Stream {
    pub fn from_environments(environments: Vec<Environment>) -> Result<Self> {
        let first = environments.first().ok_or(Error::NoEnvironments)?;
        let input_dim = first.input_dim();
        let mut num_classes = 0;
        for e in &environments {
            if e.input_dim() != input_dim {
                return Err(Error::shape("stream", &[input_dim], &[e.input_dim()]));
            }
            let access = EvalAccess::grant();
            let max_q = e
                .eval_labels(&access)
                .ok()
                .and_then(|l| l.iter().max().copied());
            let max_s = e.support_y().iter().max().copied();
            for m in [max_q, max_s].into_iter().flatten() {
                num_classes = num_classes.max(m + 1);
            }
        }
        Ok(Self {
            environments,
            num_classes,
            input_dim,
        })
    }

    pub fn build(spec: &StreamSpec) -> Result<Self> {
        let envs = match spec.scenario {
            Scenario::TaskDrift => build_scenario1(spec)?,
            Scenario::DomainDrift => build_scenario2(spec)?,
            Scenario::Combined => build_combined(spec)?,
        };
        let mut s = Self::from_environments(envs)?;
        s.num_classes = s.num_classes.max(spec.total_classes());
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.environments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.environments.is_empty()
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `n` points from the class-conditional base distribution.
pub fn sample_base<R: Rng + ?Sized>(
    base: &BaseDistribution,
    class: usize,
    n: usize,
    noise: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if class >= base.classes() {
        return Err(Error::Label {
            label: class,
            classes: base.classes(),
        });
    }
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let (x, y) = match *base {
            BaseDistribution::Moons { .. } => {
                let t = rng.random_range(0.0..PI);
                let (x, y) = if class % 2 == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                (x - MOONS_CENTER[0], y - MOONS_CENTER[1])
            }
            BaseDistribution::Blobs { classes } => {
                let a = 2.0 * PI * class as f64 / classes as f64;
                (BLOB_RADIUS * a.cos(), BLOB_RADIUS * a.sin())
            }
        };
        let (ex, ey) = if noise > 0.0 {
            (gaussian(rng) * noise, gaussian(rng) * noise)
        } else {
            (0.0, 0.0)
        };
        data.push(x + ex);
        data.push(y + ey);
    }
    Tensor::matrix(n, 2, data)
}

/// Rotate about the origin, scale, translate, then add isotropic noise.
pub fn apply_transform<R: Rng + ?Sized>(
    x: &Tensor,
    t: &DomainTransform,
    rng: &mut R,
) -> Result<Tensor> {
    if x.cols() != 2 && x.rows() > 0 {
        return Err(Error::shape("apply_transform", x.shape(), &[x.rows(), 2]));
    }
    let (s, c) = t.rotation.sin_cos();
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let p = x.row(r);
        let mut u = t.scale * (c * p[0] - s * p[1]) + t.translation[0];
        let mut v = t.scale * (s * p[0] + c * p[1]) + t.translation[1];
        if t.noise_std > 0.0 {
            u += gaussian(rng) * t.noise_std;
            v += gaussian(rng) * t.noise_std;
        }
        out.push(u);
        out.push(v);
    }
    Tensor::matrix(x.rows(), 2, out)
}

fn role_rng(seed: u64, env: usize, role: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(env as u64 * 4 + role);
    rng
}

/// Balanced sample over `classes`, shuffled.
fn draw_domain(
    spec: &StreamSpec,
    classes: &[usize],
    transform: &DomainTransform,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for &c in classes {
        let base = sample_base(&spec.base, c, spec.samples_per_class, spec.base_noise, rng)?;
        parts.push(apply_transform(&base, transform, rng)?);
        labels.extend(std::iter::repeat_n(c, spec.samples_per_class));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let x = Tensor::vstack(&refs)?;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let x = x.select_rows(&order);
    let y = order.iter().map(|&i| labels[i]).collect();
    Ok((x, y))
}

fn make_env(
    spec: &StreamSpec,
    index: usize,
    classes: &[usize],
    support_t: &DomainTransform,
    query_t: &DomainTransform,
) -> Result<Environment> {
    let mut srng = role_rng(spec.seed, index, 0);
    let (sx, sy) = draw_domain(spec, classes, support_t, &mut srng)?;
    let mut qrng = role_rng(spec.seed, index, 1);
    let (qx, qy) = draw_domain(spec, classes, query_t, &mut qrng)?;
    Environment::new(index, sx, sy, qx, Some(qy))
}

/// Task drift within streams, domain drift across streams: environment `i`
/// holds the `i`-th label range; support uses `transforms[0]` and query
/// `transforms[1]` throughout.
pub fn build_scenario1(spec: &StreamSpec) -> Result<Vec<Environment>> {
    if spec.scenario != Scenario::TaskDrift {
        return Err(Error::Spec(format!(
            "build_scenario1 needs scenario task_drift, got {}",
            spec.scenario.as_str()
        )));
    }
    spec.validate()?;
    spec.label_ranges()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let classes: Vec<usize> = r.collect();
            make_env(spec, i, &classes, &spec.transforms[0], &spec.transforms[1])
        })
        .collect()
}

/// One fixed support domain, one query domain per environment, full label
/// set everywhere. Query domains are ordered by [`DomainOrder`].
pub fn build_scenario2(spec: &StreamSpec) -> Result<Vec<Environment>> {
    if spec.scenario != Scenario::DomainDrift {
        return Err(Error::Spec(format!(
            "build_scenario2 needs scenario domain_drift, got {}",
            spec.scenario.as_str()
        )));
    }
    spec.validate()?;
    let mut queries: Vec<DomainTransform> = spec.transforms[1..].to_vec();
    let cmp = |a: &DomainTransform, b: &DomainTransform| {
        a.magnitude()
            .partial_cmp(&b.magnitude())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    match spec.order {
        DomainOrder::AsGiven => {}
        DomainOrder::Ascending => queries.sort_by(cmp),
        DomainOrder::Descending => queries.sort_by(|a, b| cmp(b, a)),
    }
    let classes: Vec<usize> = (0..spec.total_classes()).collect();
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| make_env(spec, i, &classes, &spec.transforms[0], q))
        .collect()
}

/// Pick `(support, query)` transform indices per environment: support
/// uniformly from the pool, query uniformly from the rest of the pool.
pub fn combined_assignment(spec: &StreamSpec) -> Vec<(usize, usize)> {
    let mut rng = role_rng(spec.seed, usize::MAX / 8, 2);
    let n = spec.transforms.len();
    (0..spec.classes_per_task.len())
        .map(|_| {
            let s = rng.random_range(0..n);
            let mut q = rng.random_range(0..n - 1);
            if q >= s {
                q += 1;
            }
            (s, q)
        })
        .collect()
}

/// Task drift plus a seeded random domain pair per environment.
pub fn build_combined(spec: &StreamSpec) -> Result<Vec<Environment>> {
    if spec.scenario != Scenario::Combined {
        return Err(Error::Spec(format!(
            "build_combined needs scenario combined, got {}",
            spec.scenario.as_str()
        )));
    }
    spec.validate()?;
    let assignment = combined_assignment(spec);
    spec.label_ranges()
        .into_iter()
        .zip(assignment)
        .enumerate()
        .map(|(i, (r, (s, q)))| {
            let classes: Vec<usize> = r.collect();
            make_env(spec, i, &classes, &spec.transforms[s], &spec.transforms[q])
        })
        .collect()
}

pub const CSV_ROLE_SUPPORT: &str = "support";
pub const CSV_ROLE_QUERY: &str = "query";

/// Write `env,role,label,f0,..` rows. Query labels are written when present
/// and as `-1` otherwise.
pub fn export_csv<W: Write>(envs: &[Environment], out: W) -> Result<()> {
    let width = envs.first().map_or(0, |e| e.input_dim());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["env".to_string(), "role".into(), "label".into()];
    header.extend((0..width).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_io)?;
    let access = EvalAccess::grant();
    for e in envs {
        let write_rows = |w: &mut csv::Writer<W>, role: &str, x: &Tensor, labels: &mut dyn Iterator<Item = i64>| -> Result<()> {
            for r in 0..x.rows() {
                let mut rec = vec![e.index.to_string(), role.to_string()];
                rec.push(labels.next().unwrap_or(-1).to_string());
                rec.extend(x.row(r).iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(csv_io)?;
            }
            Ok(())
        };
        let mut sl = e.support_y.iter().map(|&y| y as i64);
        write_rows(&mut w, CSV_ROLE_SUPPORT, &e.support_x, &mut sl)?;
        let ql: Vec<i64> = match e.eval_labels(&access) {
            Ok(l) => l.iter().map(|&y| y as i64).collect(),
            Err(_) => vec![-1; e.query_x.rows()],
        };
        write_rows(&mut w, CSV_ROLE_QUERY, &e.query_x, &mut ql.into_iter())?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub fn export_csv_file(envs: &[Environment], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    export_csv(envs, std::io::BufWriter::new(f))
}

#[derive(Default)]
struct Pending {
    sx: Vec<f64>,
    sy: Vec<usize>,
    qx: Vec<f64>,
    ql: Vec<i64>,
    first_query_row: Option<usize>,
    first_label_row: Option<(usize, bool)>,
}

/// Assemble environments from the CSV schema written by [`export_csv`].
///
/// Rows are grouped by `(env, role)`; environments must be numbered
/// `0..T`, every environment with query rows needs support rows, and query
/// labels are either all known or all `-1` within an environment.
pub fn ingest_csv<R: BufRead>(input: R) -> Result<Vec<Environment>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv { row: 1, msg: e.to_string() })?
        .clone();
    if headers.len() == 0 || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::NoEnvironments);
    }
    if headers.len() < 4 || &headers[0] != "env" || &headers[1] != "role" || &headers[2] != "label" {
        return Err(Error::Csv {
            row: 1,
            msg: "header must be env,role,label,f0,...".into(),
        });
    }
    let width = headers.len() - 3;
    for (i, h) in headers.iter().skip(3).enumerate() {
        if h != format!("f{i}") {
            return Err(Error::Csv {
                row: 1,
                msg: format!("expected column f{i}, found `{h}`"),
            });
        }
    }
    let mut envs: std::collections::BTreeMap<usize, Pending> = Default::default();
    for (i, rec) in rdr.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Csv { row, msg: e.to_string() })?;
        if rec.len() != width + 3 {
            return Err(Error::Csv {
                row,
                msg: format!("expected {} fields, found {}", width + 3, rec.len()),
            });
        }
        let env: usize = rec[0].parse().map_err(|_| Error::Csv {
            row,
            msg: format!("bad env index `{}`", &rec[0]),
        })?;
        let label: i64 = rec[2].parse().map_err(|_| Error::Csv {
            row,
            msg: format!("bad label `{}`", &rec[2]),
        })?;
        let mut feats = Vec::with_capacity(width);
        for f in rec.iter().skip(3) {
            let v: f64 = f.parse().map_err(|_| Error::Csv {
                row,
                msg: format!("bad feature `{f}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv { row, msg: format!("non-finite feature `{f}`") });
            }
            feats.push(v);
        }
        let p = envs.entry(env).or_default();
        match &rec[1] {
            CSV_ROLE_SUPPORT => {
                if label < 0 {
                    return Err(Error::Csv { row, msg: "support rows need a label".into() });
                }
                p.sx.extend(feats);
                p.sy.push(label as usize);
            }
            CSV_ROLE_QUERY => {
                if label < -1 {
                    return Err(Error::Csv { row, msg: format!("bad query label {label}") });
                }
                let known = label >= 0;
                match p.first_label_row {
                    None => p.first_label_row = Some((row, known)),
                    Some((_, k)) if k != known => {
                        return Err(Error::Csv {
                            row,
                            msg: format!("env {env} mixes known and unknown query labels"),
                        })
                    }
                    _ => {}
                }
                p.first_query_row.get_or_insert(row);
                p.qx.extend(feats);
                p.ql.push(label);
            }
            other => {
                return Err(Error::Csv {
                    row,
                    msg: format!("role must be support or query, found `{other}`"),
                })
            }
        }
    }
    if envs.is_empty() {
        return Err(Error::NoEnvironments);
    }
    let mut out = Vec::with_capacity(envs.len());
    for (expected, (idx, p)) in envs.into_iter().enumerate() {
        if p.sy.is_empty() {
            return Err(Error::Csv {
                row: p.first_query_row.unwrap_or(0),
                msg: format!("env {idx} has query rows but no support rows"),
            });
        }
        if idx != expected {
            return Err(Error::Csv {
                row: p.first_query_row.unwrap_or(0),
                msg: format!("environments must be numbered 0..T, missing env {expected}"),
            });
        }
        let sx = Tensor::matrix(p.sy.len(), width, p.sx)?;
        let nq = p.ql.len();
        let qx = Tensor::matrix(nq, width, p.qx)?;
        let labels = if nq > 0 && p.ql.iter().all(|&l| l >= 0) {
            Some(p.ql.iter().map(|&l| l as usize).collect())
        } else if nq == 0 {
            Some(Vec::new())
        } else {
            None
        };
        out.push(Environment::new(idx, sx, p.sy, qx, labels)?);
    }
    Ok(out)
}

pub fn ingest_csv_file(path: &Path) -> Result<Vec<Environment>> {
    let f = std::fs::File::open(path)?;
    ingest_csv(std::io::BufReader::new(f))
}
