//! Command-line surface. The `gfr` binary is a thin wrapper over [`run_cli`].
//!
//! ```text
//! gfr generate      [--config PATH] [--set k=v]... [--seed N] [--out DIR]
//! gfr run           [--config PATH] [--set k=v]... [--seed N] [--out DIR]
//! gfr ablate        [--config PATH] [--set k=v]... [--seed N] [--out DIR]
//! gfr dump-features CHECKPOINT [--env I] [--out FILE]
//! gfr inspect       CHECKPOINT
//! ```
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 configuration error,
//! 3 numeric failure (non-finite loss, gradient or parameter).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::Settings;
use crate::error::{Error, Result};
use crate::orchestrator::{run_scenario, Method, Runner};
use crate::solver::{eval_features, snapshot_for};
use crate::streams::{export_csv_file, ingest_csv_file, EvalAccess, Stream, CSV_ROLE_QUERY, CSV_ROLE_SUPPORT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// First line of every feature dump.
pub const FEATURES_MARKER: &str = "# eval-only: query labels are hidden evaluation labels";

pub const ABLATION_HEADER: [&str; 5] = ["method", "seed", "config_hash", "first_task_acc", "all_seen_acc"];
pub const CURVES_HEADER: [&str; 6] = ["method", "seed", "global_step", "env", "first_task_acc", "all_seen_acc"];

#[derive(Parser, Debug)]
#[command(name = "gfr", version, about = "Continual domain adaptation with generative feature replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for both the stream and the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured stream as CSV.
    Generate(Common),
    /// Train one method and write metrics, bound terms, a checkpoint and features.
    Run(Common),
    /// Run every method of the component grid over `ablate.seeds`.
    Ablate(Common),
    /// Write evaluation features of a checkpoint as CSV.
    DumpFeatures {
        checkpoint: PathBuf,
        /// Only this environment (default: every trained environment).
        #[arg(long)]
        env: Option<usize>,
        /// Output file (default: stdout).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Summarize a checkpoint.
    Inspect { checkpoint: PathBuf },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Spec(_) | Error::Csv { .. } | Error::NoEnvironments => EXIT_CONFIG,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

/// Parse `args` (program name first) and execute. Returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn settings(c: &Common) -> Result<Settings> {
    let s = Settings::load(c.config.as_deref(), &c.set, c.seed)?;
    s.validate()?;
    Ok(s)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(c) => {
            let path = cmd_generate(&settings(&c)?, &c.out)?;
            println!("{}", path.display());
        }
        Command::Run(c) => {
            let r = cmd_run(&settings(&c)?, &c.out)?;
            if let Some(last) = r.metrics.last() {
                println!(
                    "{} seed {}: first_task_acc {:.4} all_seen_acc {:.4} -> {}",
                    r.config.method.as_str(),
                    r.config.seed,
                    last.first_task_acc,
                    last.all_seen_acc,
                    c.out.display()
                );
            }
        }
        Command::Ablate(c) => {
            let rows = cmd_ablate(&settings(&c)?, &c.out)?;
            print!("{}", ablation_summary(&rows));
        }
        Command::DumpFeatures { checkpoint, env, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            match out {
                Some(p) => dump_features(&ckpt, env, std::io::BufWriter::new(std::fs::File::create(p)?))?,
                None => dump_features(&ckpt, env, std::io::stdout().lock())?,
            }
        }
        Command::Inspect { checkpoint } => {
            print!("{}", Checkpoint::load(&checkpoint)?.summary());
        }
    }
    Ok(())
}

/// The stream the settings describe: an ingested CSV or a synthesized one.
pub fn build_stream(s: &Settings) -> Result<Stream> {
    match &s.input.csv {
        Some(p) => Stream::from_environments(ingest_csv_file(Path::new(p))?),
        None => Stream::build(&s.stream),
    }
}

fn write_echo(s: &Settings, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), s.echo())?;
    Ok(())
}

/// Write `stream.csv` and the config echo into `out`.
pub fn cmd_generate(s: &Settings, out: &Path) -> Result<PathBuf> {
    let stream = build_stream(s)?;
    write_echo(s, out)?;
    let path = out.join("stream.csv");
    export_csv_file(&stream.environments, &path)?;
    Ok(path)
}

/// Train and write `config.txt`, `metrics.csv`, `bound.csv`,
/// `checkpoint.json` and `features.csv` into `out`. The config echo is
/// written before training starts.
pub fn cmd_run(s: &Settings, out: &Path) -> Result<Runner> {
    let stream = build_stream(s)?;
    write_echo(s, out)?;
    let runner = run_scenario(&stream, &s.run)?;
    runner.metrics.write_csv_file(&out.join("metrics.csv"))?;
    runner.bounds.write_csv_file(&out.join("bound.csv"))?;
    let ckpt = Checkpoint::new(s.clone(), stream, runner);
    ckpt.save(&out.join("checkpoint.json"))?;
    dump_features(&ckpt, None, std::io::BufWriter::new(std::fs::File::create(out.join("features.csv"))?))?;
    Ok(ckpt.runner)
}

/// Settings for one row of the grid: the method's component flags on top
/// of `base`, with the given seed for stream and run.
pub fn ablation_settings(base: &Settings, method: Method, seed: u64) -> Settings {
    let mut s = base.clone();
    let (replay, task_confusion, warmup, snapshot) = method.components();
    s.run.method = method;
    s.run.replay = replay;
    s.run.task_confusion = task_confusion;
    s.run.warmup = warmup;
    s.run.with_encoder_snapshot = snapshot && (base.run.with_encoder_snapshot || !base.run.snapshot);
    s.run.snapshot = snapshot;
    if !snapshot {
        s.run.augment_ratio = 0.0;
    }
    s.run.seed = seed;
    s.stream.seed = seed;
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub first_task_acc: f64,
    pub all_seen_acc: f64,
    /// `(global_step, env, first_task_acc, all_seen_acc)` per evaluation.
    pub curve: Vec<(u64, usize, f64, f64)>,
}

/// Every method of the grid for every seed in `ablate.seeds`. Writes
/// `ablation.csv` (one row per method and seed, grid order) and
/// `curves.csv` into `out`.
pub fn cmd_ablate(base: &Settings, out: &Path) -> Result<Vec<AblationRow>> {
    write_echo(base, out)?;
    let jobs: Vec<Settings> = Method::ALL
        .iter()
        .flat_map(|&m| base.ablate.seeds.iter().map(move |&seed| (m, seed)))
        .map(|(m, seed)| ablation_settings(base, m, seed))
        .collect();
    for j in &jobs {
        j.validate()?;
    }
    let results: Vec<Mutex<Option<Result<AblationRow>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = base.ablate.threads.min(jobs.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let row = ablation_row(job);
                *results[i].lock().expect("result slot") = Some(row);
            });
        }
    });
    let rows = results
        .into_iter()
        .map(|slot| slot.into_inner().expect("result slot").expect("job ran"))
        .collect::<Result<Vec<_>>>()?;
    write_ablation(&rows, out)?;
    Ok(rows)
}

fn ablation_row(s: &Settings) -> Result<AblationRow> {
    let stream = build_stream(s)?;
    let r = run_scenario(&stream, &s.run)?;
    let last = r
        .metrics
        .last()
        .ok_or_else(|| Error::Invalid("run produced no metrics".into()))?;
    Ok(AblationRow {
        method: s.run.method,
        seed: s.run.seed,
        config_hash: s.hash(),
        first_task_acc: last.first_task_acc,
        all_seen_acc: last.all_seen_acc,
        curve: r
            .metrics
            .rows()
            .iter()
            .map(|m| (m.global_step, m.env, m.first_task_acc, m.all_seen_acc))
            .collect(),
    })
}

fn write_ablation(rows: &[AblationRow], out: &Path) -> Result<()> {
    let err = |e: csv::Error| Error::Invalid(format!("ablation csv: {e}"));
    let mut w = csv::Writer::from_path(out.join("ablation.csv")).map_err(err)?;
    w.write_record(ABLATION_HEADER).map_err(err)?;
    for r in rows {
        w.write_record([
            r.method.as_str().to_string(),
            r.seed.to_string(),
            r.config_hash.clone(),
            r.first_task_acc.to_string(),
            r.all_seen_acc.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("curves.csv")).map_err(err)?;
    w.write_record(CURVES_HEADER).map_err(err)?;
    for r in rows {
        for &(step, env, first, all) in &r.curve {
            w.write_record([
                r.method.as_str().to_string(),
                r.seed.to_string(),
                step.to_string(),
                env.to_string(),
                first.to_string(),
                all.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean final accuracies per method, one line each.
pub fn ablation_summary(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<18} {:>6} {:>10} {:>10}\n", "method", "seeds", "first_task", "all_seen");
    for m in Method::ALL {
        let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.method == m).collect();
        if mine.is_empty() {
            continue;
        }
        let n = mine.len() as f64;
        let first = mine.iter().map(|r| r.first_task_acc).sum::<f64>() / n;
        let all = mine.iter().map(|r| r.all_seen_acc).sum::<f64>() / n;
        out.push_str(&format!("{:<18} {:>6} {:>10.4} {:>10.4}\n", m.as_str(), mine.len(), first, all));
    }
    out
}

/// Evaluation features (posterior mean, snapshot path when available) of
/// the support and query sets, one row per point.
pub fn dump_features<W: Write>(ckpt: &Checkpoint, env: Option<usize>, mut out: W) -> Result<()> {
    let r = &ckpt.runner;
    let envs: Vec<usize> = match env {
        Some(i) if i < r.envs_done => vec![i],
        Some(i) => {
            return Err(Error::Invalid(format!(
                "env {i} is not in the checkpoint ({} trained)",
                r.envs_done
            )))
        }
        None => (0..r.envs_done).collect(),
    };
    let access = EvalAccess::grant();
    writeln!(out, "{FEATURES_MARKER}")?;
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Invalid(format!("features csv: {e}"));
    let dim = r.inference.cfg.feature_dim;
    let mut header = vec!["env".to_string(), "stream_role".into(), "label".into()];
    header.extend((0..dim).map(|k| format!("h{k}")));
    w.write_record(&header).map_err(err)?;
    for i in envs {
        let e = &ckpt.stream.environments[i];
        let snap = snapshot_for(&r.snapshots, i);
        let parts = [
            (CSV_ROLE_SUPPORT, e.support_x(), e.support_y()),
            (CSV_ROLE_QUERY, e.query_x(), e.eval_labels(&access)?),
        ];
        for (role, x, labels) in parts {
            let h = eval_features(&r.inference, snap, x, i)?;
            for (row, &y) in labels.iter().enumerate() {
                let mut rec = vec![i.to_string(), role.to_string(), y.to_string()];
                rec.extend(h.row(row).iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
