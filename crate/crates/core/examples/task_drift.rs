//! Five tasks arriving one after another: generative replay against naive
//! fine-tuning. Prints accuracy after each environment.

use gfr::orchestrator::{run_scenario, Method, RunConfig};
use gfr::streams::{Stream, StreamSpec};

fn main() -> gfr::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let stream = Stream::build(&StreamSpec::moons_tasks(seed))?;
    for method in [Method::Gfr, Method::MemoryReplay, Method::Baseline4Naive] {
        let mut cfg = RunConfig::new(method);
        cfg.seed = seed;
        cfg.estimate_bound = false;
        let run = run_scenario(&stream, &cfg)?;
        println!("{}", method.as_str());
        for row in run.metrics.boundaries() {
            println!(
                "  after env {}: first task {:.3}, all seen {:.3}, current {:.3}",
                row.env, row.first_task_acc, row.all_seen_acc, row.env_acc
            );
        }
    }
    Ok(())
}
