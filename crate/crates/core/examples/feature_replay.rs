//! Snapshot a trained decoder and draw replay features from it, next to the
//! memory and noise replay sources.

use gfr::inference::{InferenceState, Optimizers};
use gfr::orchestrator::{Method, RunConfig};
use gfr::replay::{generate_features, memory_sample, noise_sample, take_snapshot, LabelSource, MemoryBank};
use gfr::streams::{Stream, StreamSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn histogram(y: &[usize], k: usize) -> Vec<usize> {
    let mut h = vec![0; k];
    y.iter().for_each(|&c| h[c] += 1);
    h
}

fn main() -> gfr::Result<()> {
    let stream = Stream::build(&StreamSpec::moons_tasks(1))?;
    let env = &stream.environments[0];
    let view = env.train_view();
    let run = RunConfig::new(Method::Gfr);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut state = InferenceState::new(run.model.inference(2, stream.len(), stream.num_classes), &mut rng);
    state.warmup(&view, 600, 32, &Optimizers::default(), &mut rng)?;

    let snap = take_snapshot(&state, &view, true)?;
    println!("snapshot of env {}: classes {:?}, digest {}", snap.env, snap.classes(), &snap.digest()[..16]);
    for source in [LabelSource::ClassPrior, LabelSource::Hypothesis] {
        let (h, y) = generate_features(&snap, 400, source, &mut rng)?;
        let agree = gfr::solver::accuracy(&state.f.predict(&h)?, &y);
        println!(
            "generated ({}): {} x {}, labels {:?}, hypothesis agrees on {agree:.3}",
            source.as_str(),
            h.rows(),
            h.cols(),
            histogram(&y, stream.num_classes)
        );
    }

    let real = state.features(env.support_x(), 0)?;
    let mut bank = MemoryBank::new(16);
    bank.store(0, &real, env.support_y(), &mut rng)?;
    let (_, my) = memory_sample(&bank, 0, 400, &mut rng)?;
    println!("memory: {} stored rows, sampled labels {:?}", bank.len(0), histogram(&my, stream.num_classes));
    let (nh, ny) = noise_sample(real.cols(), 400, &env.classes(), &mut rng)?;
    println!("noise: {} x {}, labels {:?}", nh.rows(), nh.cols(), histogram(&ny, stream.num_classes));
    Ok(())
}
