//! The full method grid on a shortened stream, written as the same
//! `ablation.csv` and `curves.csv` the `ablate` command produces.

use gfr::cli::{ablation_summary, cmd_ablate};
use gfr::config::Settings;

fn main() -> gfr::Result<()> {
    let sets: Vec<String> = ["run.steps_per_env=300", "run.warmup_steps=150", "run.estimate_bound=false", "ablate.seeds=0,1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let settings = Settings::load(None, &sets, None)?;
    settings.validate()?;
    let out = std::env::temp_dir().join("gfr-example-ablation");
    let rows = cmd_ablate(&settings, &out)?;
    print!("{}", ablation_summary(&rows));
    println!("tables in {}", out.display());
    Ok(())
}
