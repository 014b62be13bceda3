//! End-to-end acceptance report. Prints one PASS/FAIL line per criterion and
//! never fails on a criterion outcome; it only fails if the harness itself
//! breaks.
//!
//! Multi-seed criteria use seeds 0..5 and a majority rule (at least 3 of 5
//! seeds) per sub-claim, except where a criterion names its own count.

mod common;

use std::time::{Duration, Instant};

use gfr::autodiff::{SgdConfig, Tape, Tensor};
use gfr::orchestrator::{estimate_lambda, run_scenario, Method, RunConfig, Runner};
use gfr::replay::{generate_features, LabelSource};
use gfr::solver::{accuracy, sample_features, Classifier, SolverState};
use gfr::streams::{DomainOrder, DomainTransform, Stream, StreamSpec};
use gfr::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const MAJORITY: usize = 3;

struct Report {
    lines: Vec<String>,
    passed: usize,
}

impl Report {
    fn criterion(&mut self, id: usize, ok: bool, detail: String) {
        let line = format!("C{id:<2} {} {detail}", if ok { "PASS" } else { "FAIL" });
        println!("{line}");
        self.passed += ok as usize;
        self.lines.push(line);
    }

    fn note(&mut self, text: String) {
        println!("     {text}");
    }
}

fn count(v: &[bool]) -> usize {
    v.iter().filter(|b| **b).count()
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(" "))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Timed {
    runner: Result<Runner>,
    elapsed: Duration,
}

fn timed_run(stream: &Stream, cfg: &RunConfig) -> Timed {
    let start = Instant::now();
    let runner = run_scenario(stream, cfg);
    Timed {
        runner,
        elapsed: start.elapsed(),
    }
}

fn config(method: Method, seed: u64) -> RunConfig {
    let mut c = RunConfig::new(method);
    c.seed = seed;
    c
}

fn final_accs(r: &Runner) -> (f64, f64) {
    let last = r.metrics.last().expect("metrics");
    (last.first_task_acc, last.all_seen_acc)
}

/// Solver of the run's shape trained on `(h, y)` alone.
fn fit(h: &Tensor, y: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Result<SolverState> {
    let mut s = SolverState::new(h.cols(), 64, k, rng);
    let opt = SgdConfig {
        lr: 0.02,
        ..Default::default()
    };
    for _ in 0..1000 {
        let idx: Vec<usize> = (0..32).map(|_| rng.random_range(0..h.rows())).collect();
        let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let mut tape = Tape::new();
        let l = s.loss(&mut tape, None, &[(h.select_rows(&idx), yb)])?;
        let g = tape.backward(l)?;
        s.net.store.zero_grad();
        s.net.store.accumulate(&tape, &g);
        s.net.store.sgd_step(&opt);
    }
    Ok(s)
}

fn gradient_criteria(rep: &mut Report) {
    let start = Instant::now();
    let suite = common::gradient_suite(50);
    let elapsed = start.elapsed();
    let worst = suite.iter().map(|g| g.worst).fold(0.0, f64::max);
    let all = suite.iter().all(|g| g.instances == 50 && g.worst < 1e-4);
    rep.criterion(
        1,
        all && elapsed < Duration::from_secs(30),
        format!(
            "gradient suite: {} ops x 50 instances, worst rel err {worst:.2e}, {:.2}s",
            suite.len(),
            elapsed.as_secs_f64()
        ),
    );

    let forms = common::closed_forms();
    let bad: Vec<&str> = forms.iter().filter(|c| !c.ok()).map(|c| c.name).collect();
    let dev = forms.iter().map(|c| (c.value - c.expected).abs()).fold(0.0, f64::max);
    rep.criterion(
        2,
        bad.is_empty(),
        format!("closed forms: {} checks, max deviation {dev:.1e}, failing {bad:?}", forms.len()),
    );

    let cases = [(0.0, 0.0), (1.0, 4f64.ln()), (-2.0, 0.25f64.ln())];
    let mut worst: f64 = 0.0;
    for (i, (mu, lv)) in cases.iter().enumerate() {
        let (m, v) = common::reparam_stats(*mu, *lv, 100_000, 40 + i as u64);
        let var = lv.exp();
        // relative to the scale of the draw when the mean is zero
        worst = worst.max((m - mu).abs() / mu.abs().max(var.sqrt()));
        worst = worst.max((v - var).abs() / var);
    }
    rep.criterion(
        3,
        worst < 0.05,
        format!("reparameterization moments over 1e5 draws: worst relative error {worst:.4}"),
    );

    let (up, adv) = common::minimax_deviation(0..20);
    rep.criterion(
        4,
        up < 1e-12 && adv < 1e-12,
        format!("reversed vs -coeff * plain gradient: max deviation {up:.1e} (adversary {adv:.1e})"),
    );
}

fn main() {
    let total = Instant::now();
    let mut rep = Report {
        lines: Vec::new(),
        passed: 0,
    };
    println!("acceptance report, seeds {SEEDS:?}, majority = {MAJORITY} of {}", SEEDS.len());
    gradient_criteria(&mut rep);

    // default 5-task stream, full method grid plus warmup-off
    let streams: Vec<Stream> = SEEDS
        .iter()
        .map(|&s| Stream::build(&StreamSpec::moons_tasks(s)).expect("stream"))
        .collect();
    let sweep_start = Instant::now();
    let mut grid: Vec<(Method, u64, Timed)> = Vec::new();
    for m in Method::ALL {
        for (&seed, stream) in SEEDS.iter().zip(&streams) {
            grid.push((m, seed, timed_run(stream, &config(m, seed))));
        }
    }
    let sweep = sweep_start.elapsed();
    let no_warmup: Vec<Timed> = SEEDS
        .iter()
        .zip(&streams)
        .map(|(&seed, stream)| {
            let mut c = config(Method::Gfr, seed);
            c.warmup = false;
            timed_run(stream, &c)
        })
        .collect();

    let failures: Vec<String> = grid
        .iter()
        .filter_map(|(m, s, t)| t.runner.as_ref().err().map(|e| format!("{} seed {s}: {e}", m.as_str())))
        .chain(
            no_warmup
                .iter()
                .zip(SEEDS)
                .filter_map(|(t, s)| t.runner.as_ref().err().map(|e| format!("gfr no-warmup seed {s}: {e}"))),
        )
        .collect();
    let get = |m: Method| -> Vec<Option<&Runner>> {
        grid.iter()
            .filter(|(gm, _, _)| *gm == m)
            .map(|(_, _, t)| t.runner.as_ref().ok())
            .collect()
    };
    let gfr = get(Method::Gfr);

    // alignment
    {
        let mut ratios = Vec::new();
        let mut sampled_ratios = Vec::new();
        let mut ok = Vec::new();
        for (i, (&seed, stream)) in SEEDS.iter().zip(&streams).enumerate() {
            let Some(r) = gfr[i] else {
                ok.push(false);
                continue;
            };
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let t = stream.len();
            let learned: Vec<f64> = r
                .bounds
                .rows
                .iter()
                .filter(|b| b.boundary == t)
                .map(|b| b.lambda_hat)
                .collect();
            let mut raw = Vec::new();
            let mut sampled = Vec::new();
            for (e, env) in stream.environments.iter().enumerate() {
                raw.push(estimate_lambda(env.support_x(), env.query_x(), &r.config.probe, &mut rng).unwrap());
                let snap = gfr::solver::snapshot_for(&r.snapshots, e);
                let hs = sample_features(&r.inference, snap, env.support_x(), e, &mut rng).unwrap();
                let hq = sample_features(&r.inference, snap, env.query_x(), e, &mut rng).unwrap();
                sampled.push(estimate_lambda(&hs, &hq, &r.config.probe, &mut rng).unwrap());
            }
            let ratio = mean(&learned) / mean(&raw);
            ratios.push(ratio);
            sampled_ratios.push(mean(&sampled) / mean(&raw));
            ok.push(ratio <= 0.5);
        }
        let slowest = grid
            .iter()
            .filter(|(m, _, _)| *m == Method::Gfr)
            .map(|(_, _, t)| t.elapsed.as_secs_f64())
            .fold(0.0, f64::max);
        rep.criterion(
            5,
            count(&ok) == SEEDS.len() && slowest < 120.0,
            format!(
                "feature/raw divergence ratio per seed {} (need <= 0.5 on all seeds), slowest run {slowest:.1}s",
                fmt(&ratios)
            ),
        );
        rep.note(format!("diagnostic: ratio on sampled features {}", fmt(&sampled_ratios)));
    }

    // generated-feature fidelity
    {
        let mut gaps = Vec::new();
        let mut ok = Vec::new();
        for (i, (&seed, stream)) in SEEDS.iter().zip(&streams).enumerate() {
            let Some(r) = gfr[i] else {
                ok.push(false);
                continue;
            };
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let mut per_env = Vec::new();
            for e in 0..stream.len() {
                let f = r.env_features(stream, e).unwrap();
                let n = f.support_h.rows();
                let (gh, gy) = generate_features(&r.snapshots[e], n, LabelSource::ClassPrior, &mut rng).unwrap();
                let k = stream.num_classes;
                let real = fit(&f.support_h, &f.support_y, k, &mut rng).unwrap();
                let gen = fit(&gh, &gy, k, &mut rng).unwrap();
                let score = |s: &SolverState| accuracy(&s.predict(&f.query_h).unwrap(), &f.query_y);
                per_env.push((score(&real) - score(&gen)).abs());
            }
            let gap = mean(&per_env);
            gaps.push(gap);
            ok.push(gap <= 0.05);
        }
        rep.criterion(
            6,
            count(&ok) >= MAJORITY,
            format!(
                "|real - generated| solver accuracy on query features, mean over envs {} ({} of 5 within 0.05)",
                fmt(&gaps),
                count(&ok)
            ),
        );
    }

    // forgetting and retention ordering
    {
        let accs = |m: Method| -> Vec<(f64, f64)> {
            get(m).iter().map(|r| r.map_or((f64::NAN, f64::NAN), final_accs)).collect()
        };
        let (g, mem, noise, b4) = (
            accs(Method::Gfr),
            accs(Method::MemoryReplay),
            accs(Method::NoiseReplay),
            accs(Method::Baseline4Naive),
        );
        let off: Vec<(f64, f64)> = no_warmup
            .iter()
            .map(|t| t.runner.as_ref().map_or((f64::NAN, f64::NAN), final_accs))
            .collect();
        let per_seed = |f: &dyn Fn(usize) -> bool| (0..SEEDS.len()).map(f).collect::<Vec<bool>>();
        let first_ok = per_seed(&|i| g[i].0 >= 0.7);
        let b4_ok = per_seed(&|i| b4[i].0 <= 0.4);
        let close_ok = per_seed(&|i| (g[i].1 - mem[i].1).abs() <= 0.05);
        let gap_ok = per_seed(&|i| g[i].1.min(mem[i].1) - noise[i].1.max(b4[i].1) >= 0.20);
        let warm_ok = per_seed(&|i| g[i].1 >= off[i].1);
        let subs = [
            ("gfr first-task >= 0.7", &first_ok),
            ("baseline4 first-task <= 0.4", &b4_ok),
            ("|gfr - memory| all-seen <= 0.05", &close_ok),
            ("min(gfr, memory) - max(noise, baseline4) all-seen >= 0.20", &gap_ok),
            ("warmup-on >= warmup-off all-seen", &warm_ok),
        ];
        let all = subs.iter().all(|(_, v)| count(v) >= MAJORITY) && sweep < Duration::from_secs(15 * 60);
        let summary: Vec<String> = subs.iter().map(|(n, v)| format!("{n}: {}/5", count(v))).collect();
        rep.criterion(
            7,
            all,
            format!("{}; sweep of 35 runs {:.0}s (limit 900s)", summary.join("; "), sweep.as_secs_f64()),
        );
        let col = |v: &[(f64, f64)], first: bool| fmt(&v.iter().map(|p| if first { p.0 } else { p.1 }).collect::<Vec<_>>());
        rep.note(format!("first-task  gfr {} baseline4 {}", col(&g, true), col(&b4, true)));
        rep.note(format!(
            "all-seen    gfr {} memory {} noise {} baseline4 {}",
            col(&g, false),
            col(&mem, false),
            col(&noise, false),
            col(&b4, false)
        ));
        rep.note(format!("all-seen    gfr warmup-off {}", col(&off, false)));
        let b3 = accs(Method::Baseline3);
        rep.note(format!("diagnostic: all-seen baseline3 {} vs gfr {}", col(&b3, false), col(&g, false)));
        let b1 = accs(Method::Baseline1Optimal);
        let control = per_seed(&|i| (noise[i].1 - b1[i].1).abs() <= 0.05);
        rep.note(format!(
            "diagnostic: noise replay vs no replay all-seen {} vs {} ({}/5 within 0.05)",
            col(&noise, false),
            col(&b1, false),
            count(&control)
        ));
        if !failures.is_empty() {
            rep.note(format!("failed runs: {failures:?}"));
        }
    }

    // domain drift with per-env solvers
    {
        let mut detail = Vec::new();
        let mut all = true;
        for order in [DomainOrder::Ascending, DomainOrder::Descending] {
            let mut margins = Vec::new();
            for &seed in &SEEDS {
                let stream = Stream::build(&StreamSpec::blob_domains(seed, order)).expect("stream");
                let mut accs = Vec::new();
                for m in [Method::Gfr, Method::Baseline1Optimal] {
                    let mut c = config(m, seed);
                    c.train_solver_from_scratch_per_env = true;
                    c.estimate_bound = false;
                    accs.push(timed_run(&stream, &c).runner.map_or(f64::NAN, |r| final_accs(&r).1));
                }
                margins.push(accs[0] - accs[1]);
            }
            let n = margins.iter().filter(|m| **m >= 0.20).count();
            all &= n >= MAJORITY;
            detail.push(format!("{order:?} margins {} ({n}/5 >= 0.20)", fmt(&margins)));
        }
        rep.criterion(8, all, format!("replay - no replay all-seen: {}", detail.join("; ")));
    }

    // error bound
    {
        let mut boundaries = 0;
        let mut violations = 0;
        let mut worst_slack = f64::NEG_INFINITY;
        let mut exact = true;
        let runs = grid
            .iter()
            .map(|(_, _, t)| t)
            .chain(&no_warmup)
            .filter_map(|t| t.runner.as_ref().ok());
        for r in runs {
            for b in &r.bounds.rows {
                if b.env == 0 {
                    boundaries += 1;
                    worst_slack = worst_slack.max(b.bound_lhs - b.bound_rhs);
                    violations += (b.bound_lhs > b.bound_rhs + 0.1) as usize;
                }
                if b.boundary == 1 {
                    exact &= b.bound_rhs == b.support_error + b.lambda_hat + b.c_star;
                }
            }
        }
        rep.criterion(
            9,
            violations == 0 && exact && boundaries > 0 && failures.is_empty(),
            format!(
                "{boundaries} boundaries over {} runs, {violations} with lhs > rhs + 0.1, max lhs - rhs {worst_slack:.3}; t=1 reduction exact: {exact}",
                grid.len() + no_warmup.len()
            ),
        );
    }

    // augmentation
    {
        let tr = |rotation: f64, tx: f64, ty: f64, scale: f64| DomainTransform {
            rotation,
            translation: [tx, ty],
            scale,
            noise_std: 0.0,
        };
        let current = tr(0.3, 0.0, -0.9, 1.1);
        let mut deltas = Vec::new();
        for prev in [tr(0.28, 0.1, -0.8, 1.05), tr(-0.4, -1.5, 1.2, 0.7)] {
            let mut d = Vec::new();
            for &seed in &SEEDS {
                let mut spec = StreamSpec::blob_domains(seed, DomainOrder::AsGiven);
                spec.num_environments = 2;
                spec.transforms = vec![DomainTransform::identity(), prev, current];
                let stream = Stream::build(&spec).expect("stream");
                let mut acc = Vec::new();
                for ratio in [0.0, 0.5] {
                    let mut c = config(Method::Baseline1Optimal, seed);
                    c.estimate_bound = false;
                    c.augment_ratio = ratio;
                    acc.push(timed_run(&stream, &c).runner.map_or(f64::NAN, |r| r.metrics.last().unwrap().env_acc));
                }
                d.push(acc[1] - acc[0]);
            }
            deltas.push(d);
        }
        let improved = deltas[0].iter().filter(|d| **d > 0.0).count();
        let mild = deltas[1].iter().filter(|d| **d > -0.02).count();
        rep.criterion(
            10,
            improved >= 4 && mild >= MAJORITY,
            format!(
                "current-query gain from augmentation: overlapping {} ({improved}/5 > 0, need 4); disjoint {} ({mild}/5 above -0.02)",
                fmt(&deltas[0]),
                fmt(&deltas[1])
            ),
        );
    }

    // determinism
    {
        let again = timed_run(&streams[0], &config(Method::Gfr, SEEDS[0]));
        let same = match (gfr[0], again.runner.as_ref()) {
            (Some(a), Ok(b)) => a.metrics.to_csv_string().ok() == b.metrics.to_csv_string().ok(),
            _ => false,
        };
        rep.criterion(11, same, "gfr seed 0 rerun: metrics.csv byte-identical".into());
    }

    println!(
        "summary: {}/11 criteria pass, total {:.0}s",
        rep.passed,
        total.elapsed().as_secs_f64()
    );
    assert_eq!(rep.lines.len(), 11);
}
