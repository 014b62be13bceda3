#![allow(dead_code)]

use gfr::autodiff::{Tape, Tensor, Var};
use gfr::inference::{grl_coeff, mdd_loss, GrlSchedule};
use gfr::nn::Mlp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Uniform in [-2, 2] but at least `gap` away from zero.
fn away_from_zero(rows: usize, cols: usize, gap: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m: f64 = rng.random_range(gap..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm; zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = norm(a.iter().zip(n).map(|(x, y)| x - y));
    let scale = norm(a.iter().copied()).max(norm(n.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

type Graph<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Worst relative error between the tape gradient and `expected_scale`
/// times the central differences, over every input. Non-scalar outputs are
/// reduced with fixed random weights first.
pub fn check_gradients(inputs: &[Tensor], graph: &Graph<'_>, expected_scale: f64, seed: u64) -> f64 {
    let weights = {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
        let out = graph(&mut t, &vs);
        let shape = t.value(out).shape().to_vec();
        let mut r = rng(seed ^ 0x5eed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let reduce = |t: &mut Tape, out: Var| -> Var {
        if t.value(out).len() == 1 && t.value(out).shape().len() <= 1 {
            return out;
        }
        let w = t.constant(weights.clone());
        let p = t.mul(out, w).unwrap();
        t.sum(p)
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.input(x.clone())).collect();
        let out = graph(&mut t, &vs);
        let l = reduce(&mut t, out);
        t.value(l).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone().with_grad())).collect();
    let out = graph(&mut tape, &vars);
    let loss = reduce(&mut tape, out);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, vars[k]);
        let mut numeric = vec![0.0; x.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            *slot = expected_scale * (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

pub struct GradReport {
    pub op: &'static str,
    pub instances: usize,
    pub worst: f64,
}

fn labels(n: usize, k: usize, r: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..k)).collect()
}

/// Finite-difference check of every tape primitive on `instances` random
/// problems each.
pub fn gradient_suite(instances: usize) -> Vec<GradReport> {
    // The third element scales the numeric gradient. It is 1 except for the
    // reversal node, which is the identity going forward, so its oracle is
    // the identity's numeric gradient times -coeff.
    type Case = (&'static str, fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Graph<'static>>, f64));
    let cases: Vec<Case> = vec![
        ("matmul", |r| {
            let (m, k, n) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
            (vec![uniform(m, k, r), uniform(k, n, r)], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()), 1.0)
        }),
        ("add_bias", |r| {
            let (m, n) = (r.random_range(1..6), r.random_range(1..6));
            (vec![uniform(m, n, r), uniform(1, n, r)], Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap()), 1.0)
        }),
        ("add", |r| {
            let (m, n) = (r.random_range(1..6), r.random_range(1..6));
            (vec![uniform(m, n, r), uniform(m, n, r)], Box::new(|t, v| t.add(v[0], v[1]).unwrap()), 1.0)
        }),
        ("sub", |r| {
            let (m, n) = (r.random_range(1..6), r.random_range(1..6));
            (vec![uniform(m, n, r), uniform(m, n, r)], Box::new(|t, v| t.sub(v[0], v[1]).unwrap()), 1.0)
        }),
        ("mul", |r| {
            let (m, n) = (r.random_range(1..6), r.random_range(1..6));
            (vec![uniform(m, n, r), uniform(m, n, r)], Box::new(|t, v| t.mul(v[0], v[1]).unwrap()), 1.0)
        }),
        ("scale", |r| {
            let (m, n) = (r.random_range(1..6), r.random_range(1..6));
            let s: f64 = r.random_range(-2.0..2.0);
            (vec![uniform(m, n, r)], Box::new(move |t, v| t.scale(v[0], s)), 1.0)
        }),
        ("relu", |r| {
            let (m, n) = (r.random_range(1..6), r.random_range(1..6));
            (vec![away_from_zero(m, n, 1e-3, r)], Box::new(|t, v| t.relu(v[0])), 1.0)
        }),
        ("sum", |r| {
            let (m, n) = (r.random_range(1..6), r.random_range(1..6));
            (vec![uniform(m, n, r)], Box::new(|t, v| t.sum(v[0])), 1.0)
        }),
        ("mean", |r| {
            let (m, n) = (r.random_range(1..6), r.random_range(1..6));
            (vec![uniform(m, n, r)], Box::new(|t, v| t.mean(v[0])), 1.0)
        }),
        ("concat_rows", |r| {
            let n = r.random_range(1..6);
            let (a, b) = (r.random_range(1..4), r.random_range(1..4));
            (
                vec![uniform(a, n, r), uniform(b, n, r)],
                Box::new(|t, v| t.concat_rows(&[v[0], v[1]]).unwrap()),
                1.0,
            )
        }),
        ("concat_cols", |r| {
            let m = r.random_range(1..6);
            let (a, b) = (r.random_range(1..4), r.random_range(1..4));
            (
                vec![uniform(m, a, r), uniform(m, b, r)],
                Box::new(|t, v| t.concat_cols(v[0], v[1]).unwrap()),
                1.0,
            )
        }),
        ("slice_rows", |r| {
            let (m, n) = (r.random_range(2..7), r.random_range(1..5));
            let start = r.random_range(0..m - 1);
            let end = r.random_range(start + 1..=m);
            (vec![uniform(m, n, r)], Box::new(move |t, v| t.slice_rows(v[0], start, end).unwrap()), 1.0)
        }),
        ("softmax_cross_entropy", |r| {
            let (n, k) = (r.random_range(1..6), r.random_range(2..6));
            let y = labels(n, k, r);
            (
                vec![uniform(n, k, r)],
                Box::new(move |t, v| t.softmax_cross_entropy(v[0], &y).unwrap()),
                1.0,
            )
        }),
        ("neg_log_one_minus_softmax", |r| {
            let (n, k) = (r.random_range(1..6), r.random_range(2..6));
            let y = labels(n, k, r);
            (
                vec![uniform(n, k, r)],
                Box::new(move |t, v| t.neg_log_one_minus_softmax(v[0], &y).unwrap()),
                1.0,
            )
        }),
        ("gaussian_kl", |r| {
            let (n, d) = (r.random_range(1..6), r.random_range(1..5));
            (vec![uniform(n, d, r), uniform(n, d, r)], Box::new(|t, v| t.gaussian_kl(v[0], v[1]).unwrap()), 1.0)
        }),
        ("reparameterize", |r| {
            let (n, d) = (r.random_range(1..6), r.random_range(1..5));
            let noise = uniform(n, d, r);
            (
                vec![uniform(n, d, r), uniform(n, d, r)],
                Box::new(move |t, v| t.reparameterize(v[0], v[1], noise.clone()).unwrap()),
                1.0,
            )
        }),
        ("gradient_reverse", |r| {
            let (m, n) = (r.random_range(1..6), r.random_range(1..6));
            let c: f64 = r.random_range(0.0..1.0);
            (vec![uniform(m, n, r)], Box::new(move |t, v| t.gradient_reverse(v[0], c)), -c)
        }),
        ("batch_norm", |r| {
            let (m, n) = (r.random_range(2..7), r.random_range(1..5));
            (
                vec![uniform(m, n, r), uniform(1, n, r), uniform(1, n, r)],
                Box::new(|t, v| t.batch_norm(v[0], v[1], v[2], 1e-5).unwrap().0),
                1.0,
            )
        }),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(ci, (op, make))| {
            let mut worst: f64 = 0.0;
            for i in 0..instances {
                let seed = (ci as u64) << 32 | i as u64;
                let mut r = rng(seed);
                let (inputs, graph, scale) = make(&mut r);
                worst = worst.max(check_gradients(&inputs, graph.as_ref(), scale, seed));
            }
            GradReport { op, instances, worst }
        })
        .collect()
}

pub struct ClosedForm {
    pub name: &'static str,
    pub value: f64,
    pub expected: f64,
    pub tol: f64,
}

impl ClosedForm {
    pub fn ok(&self) -> bool {
        (self.value - self.expected).abs() <= self.tol
    }
}

fn scalar_op(build: impl Fn(&mut Tape) -> Var) -> f64 {
    let mut t = Tape::new();
    let v = build(&mut t);
    t.value(v).item()
}

pub fn closed_forms() -> Vec<ClosedForm> {
    let mut out = Vec::new();
    for k in [2usize, 4, 7, 31] {
        let v = scalar_op(|t| {
            let l = t.constant(Tensor::full(&[3, k], 0.7));
            t.softmax_cross_entropy(l, &[0, k - 1, k / 2]).unwrap()
        });
        out.push(ClosedForm {
            name: "softmax_ce_uniform",
            value: v,
            expected: (k as f64).ln(),
            tol: 1e-12,
        });
    }
    let kl = |mu: f64, lv: f64| {
        scalar_op(|t| {
            let m = t.constant(Tensor::full(&[1, 1], mu));
            let l = t.constant(Tensor::full(&[1, 1], lv));
            t.gaussian_kl(m, l).unwrap()
        })
    };
    out.push(ClosedForm {
        name: "gaussian_kl_identity",
        value: kl(0.0, 0.0),
        expected: 0.0,
        tol: 1e-12,
    });
    out.push(ClosedForm {
        name: "gaussian_kl_unit_shift",
        value: kl(1.0, 0.0),
        expected: 0.5,
        tol: 1e-12,
    });
    let s = GrlSchedule::default();
    out.push(ClosedForm {
        name: "grl_coeff_start",
        value: grl_coeff(&s, 0),
        expected: 0.0,
        tol: 0.0,
    });
    // coeff(1e7) > 0.2999: centered on 0.3 with the allowed band below it
    out.push(ClosedForm {
        name: "grl_coeff_limit",
        value: grl_coeff(&s, 10_000_000),
        expected: 0.3,
        tol: 1e-4,
    });
    out
}

/// Sample mean and (unbiased) variance of `mu + exp(logvar / 2) * eps`
/// through the tape op.
pub fn reparam_stats(mu: f64, logvar: f64, n: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let noise: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
    let mut t = Tape::new();
    let m = t.constant(Tensor::full(&[n, 1], mu));
    let l = t.constant(Tensor::full(&[n, 1], logvar));
    let z = t.reparameterize(m, l, Tensor::matrix(n, 1, noise).unwrap()).unwrap();
    let v = t.value(z).data();
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var)
}

/// Largest deviation between the reversed-pass gradient of the disparity on
/// upstream parameters and `-coeff` times the plain-pass gradient, plus the
/// largest deviation between the adversary gradients of the two passes
/// (which must agree). Random upstream and head networks per seed.
pub fn minimax_deviation(seeds: std::ops::Range<u64>) -> (f64, f64) {
    let mut upstream_dev: f64 = 0.0;
    let mut adv_dev: f64 = 0.0;
    for seed in seeds {
        let mut r = rng(seed);
        let (d_in, d_h, k) = (r.random_range(2..5), r.random_range(3..7), r.random_range(2..5));
        let up = Mlp::new("up", &[d_in, 6, d_h], &mut r);
        let f = Mlp::new("f", &[d_h, 5, k], &mut r);
        let f_adv = Mlp::new("f_adv", &[d_h, 5, k], &mut r);
        let xs = uniform(r.random_range(2..6), d_in, &mut r);
        let xq = uniform(r.random_range(2..6), d_in, &mut r);
        let coeff: f64 = r.random_range(0.01..1.0);
        let margin: f64 = r.random_range(1.0..5.0);

        // Pass with the reversal node.
        let mut up_r = up.clone();
        let mut adv_r = f_adv.clone();
        let mut t = Tape::new();
        let (a, b) = (t.constant(xs.clone()), t.constant(xq.clone()));
        let (hs, hq) = (up_r.forward(&mut t, a).unwrap(), up_r.forward(&mut t, b).unwrap());
        let (s, q) = mdd_loss(&mut t, &f, &adv_r, hs, hq, coeff, margin).unwrap();
        let l = t.add(s, q).unwrap();
        let g = t.backward(l).unwrap();
        up_r.store.zero_grad();
        up_r.store.accumulate(&t, &g);
        adv_r.store.zero_grad();
        adv_r.store.accumulate(&t, &g);

        // Same disparity written out without reversal.
        let mut up_p = up.clone();
        let mut adv_p = f_adv.clone();
        let mut t = Tape::new();
        let (a, b) = (t.constant(xs.clone()), t.constant(xq.clone()));
        let (hs, hq) = (up_p.forward(&mut t, a).unwrap(), up_p.forward(&mut t, b).unwrap());
        let ps = f.apply(t.value(hs)).unwrap().argmax_rows();
        let pq = f.apply(t.value(hq)).unwrap().argmax_rows();
        let ls = adv_p.forward(&mut t, hs).unwrap();
        let ce = t.softmax_cross_entropy(ls, &ps).unwrap();
        let s = t.scale(ce, margin);
        let lq = adv_p.forward(&mut t, hq).unwrap();
        let q = t.neg_log_one_minus_softmax(lq, &pq).unwrap();
        let l = t.add(s, q).unwrap();
        let g = t.backward(l).unwrap();
        up_p.store.zero_grad();
        up_p.store.accumulate(&t, &g);
        adv_p.store.zero_grad();
        adv_p.store.accumulate(&t, &g);

        for id in up.store.ids() {
            for (rv, pv) in up_r.store.grad(id).data().iter().zip(up_p.store.grad(id).data()) {
                upstream_dev = upstream_dev.max((rv + coeff * pv).abs());
            }
        }
        for id in f_adv.store.ids() {
            for (rv, pv) in adv_r.store.grad(id).data().iter().zip(adv_p.store.grad(id).data()) {
                adv_dev = adv_dev.max((rv - pv).abs());
            }
        }
    }
    (upstream_dev, adv_dev)
}
