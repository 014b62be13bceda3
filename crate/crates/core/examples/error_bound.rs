//! Assemble the error bound at every boundary of a run and print its terms.

use gfr::orchestrator::{run_scenario, Method, RunConfig};
use gfr::streams::{Stream, StreamSpec};

fn main() -> gfr::Result<()> {
    let stream = Stream::build(&StreamSpec::moons_tasks(0))?;
    let run = run_scenario(&stream, &RunConfig::new(Method::Gfr))?;
    let mut boundary = 0;
    for b in &run.bounds.rows {
        if b.boundary != boundary {
            boundary = b.boundary;
            println!(
                "after {boundary} env(s): measured query error {:.3} <= bound {:.3} (joint reference error {:.3})",
                b.bound_lhs, b.bound_rhs, b.c_star
            );
        }
        println!(
            "    env {}: support error {:.3}, divergence {:.3}, generated-loss gap {:.3} (raw {}), query error {:.3}",
            b.env,
            b.support_error,
            b.lambda_hat,
            b.kl_hat,
            b.kl_raw.map_or("-".into(), |k| format!("{k:+.3}")),
            b.query_error
        );
    }
    Ok(())
}
