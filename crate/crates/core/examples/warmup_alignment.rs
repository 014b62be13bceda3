//! Train the inference module alone on one environment and watch the
//! support/query divergence of its features shrink.

use gfr::inference::{InferenceConfig, InferenceState, Optimizers};
use gfr::orchestrator::{estimate_lambda, Method, ProbeConfig, RunConfig};
use gfr::streams::{Stream, StreamSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gfr::Result<()> {
    let stream = Stream::build(&StreamSpec::moons_tasks(0))?;
    let env = &stream.environments[0];
    let view = env.train_view();
    let run = RunConfig::new(Method::Gfr);
    let cfg: InferenceConfig = run.model.inference(stream.input_dim, stream.len(), stream.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut state = InferenceState::new(cfg, &mut rng);
    let probe = ProbeConfig::default();

    let raw = estimate_lambda(env.support_x(), env.query_x(), &probe, &mut rng)?;
    println!("raw inputs: divergence {raw:.3}");
    let opt: Optimizers = run.optim;
    for round in 1..=5 {
        let parts = state.warmup(&view, 200, 32, &opt, &mut rng)?.expect("steps > 0");
        let hs = state.features(env.support_x(), 0)?;
        let hq = state.features(env.query_x(), 0)?;
        let lam = estimate_lambda(&hs, &hq, &probe, &mut rng)?;
        let acc = gfr::solver::accuracy(&state.f.predict(&hs)?, env.support_y());
        println!(
            "after {:4} steps: divergence {lam:.3}, support accuracy {acc:.3}, grl coeff {:.3}, ce {:.3}, kl {:.3}, disparity {:.3}/{:.3}",
            round * 200,
            state.grl_coeff(),
            parts.ce,
            parts.kl,
            parts.disparity_support,
            parts.disparity_query
        );
    }
    Ok(())
}
