//! Mixing features generated from the previous domain into the current
//! solver batch, for a previous domain close to the current one and for a
//! distant one.

use gfr::orchestrator::{run_scenario, Method, RunConfig};
use gfr::streams::{DomainOrder, DomainTransform, Stream, StreamSpec};

fn shift(rotation: f64, tx: f64, ty: f64, scale: f64) -> DomainTransform {
    DomainTransform {
        rotation,
        translation: [tx, ty],
        scale,
        noise_std: 0.0,
    }
}

fn main() -> gfr::Result<()> {
    let current = shift(0.3, 0.0, -0.9, 1.1);
    for (name, previous) in [("close", shift(0.28, 0.1, -0.8, 1.05)), ("distant", shift(-0.4, -1.5, 1.2, 0.7))] {
        let mut spec = StreamSpec::blob_domains(0, DomainOrder::AsGiven);
        spec.num_environments = 2;
        spec.transforms = vec![DomainTransform::identity(), previous, current];
        let stream = Stream::build(&spec)?;
        let mut line = format!("{name:<8}");
        for ratio in [0.0, 0.25, 0.5] {
            let mut cfg = RunConfig::new(Method::Baseline1Optimal);
            cfg.estimate_bound = false;
            cfg.augment_ratio = ratio;
            let run = run_scenario(&stream, &cfg)?;
            line += &format!("  ratio {ratio:.2}: current query {:.3}", run.metrics.last().unwrap().env_acc);
        }
        println!("{line}");
    }
    Ok(())
}
