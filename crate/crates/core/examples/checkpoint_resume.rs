//! Stop after two environments, save a checkpoint, reload it and finish the
//! stream. The result matches an uninterrupted run.

use gfr::checkpoint::Checkpoint;
use gfr::config::Settings;
use gfr::orchestrator::{run_scenario, Runner};
use gfr::streams::Stream;

fn main() -> gfr::Result<()> {
    let mut settings = Settings::default();
    settings.run.steps_per_env = 300;
    settings.run.warmup_steps = 150;
    let stream = Stream::build(&settings.stream)?;

    let mut runner = Runner::new(&stream, settings.run.clone())?;
    runner.train_env(&stream, 0)?;
    runner.train_env(&stream, 1)?;
    let path = std::env::temp_dir().join("gfr-example-checkpoint.json");
    Checkpoint::new(settings.clone(), stream.clone(), runner).save(&path)?;

    let ckpt = Checkpoint::load(&path)?;
    print!("{}", ckpt.summary());
    let mut resumed = ckpt.runner;
    resumed.run(&ckpt.stream)?;
    let straight = run_scenario(&stream, &settings.run)?;
    println!("resumed run equals uninterrupted run: {}", resumed.metrics == straight.metrics);
    Ok(())
}
