//! Run checkpoints.
//!
//! A checkpoint is one JSON document:
//!
//! ```text
//! {
//!   "format":   "gfr-checkpoint",
//!   "version":  [major, minor],
//!   "settings": { ... },          // the effective configuration
//!   "stream":   { ... },          // every environment, support and query
//!   "runner":   {                 // full training state
//!     "config", "inference", "solver", "snapshots", "memory",
//!     "rng", "probe_rng",         // ChaCha8 seed, stream and word position
//!     "metrics", "bounds", "global_step", "envs_done", "lambda_cache"
//!   }
//! }
//! ```
//!
//! Floats are written with round-trip precision, so a reloaded runner is
//! bit-identical to the saved one. Readers accept any minor version of the
//! same major version. The stream includes hidden query labels, so a
//! checkpoint is an evaluation artifact.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Settings;
use crate::error::{Error, Result};
use crate::orchestrator::Runner;
use crate::streams::Stream;

pub const FORMAT: &str = "gfr-checkpoint";
pub const VERSION: (u32, u32) = (1, 0);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: (u32, u32),
    pub settings: Settings,
    pub stream: Stream,
    pub runner: Runner,
}

impl Checkpoint {
    pub fn new(settings: Settings, stream: Stream, runner: Runner) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            settings,
            stream,
            runner,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: (u32, u32),
        }
        let head: Header =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        if head.format != FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", head.format)));
        }
        if head.version.0 != VERSION.0 {
            return Err(Error::Checkpoint(format!(
                "version {}.{} is not readable by {}.{}",
                head.version.0, head.version.1, VERSION.0, VERSION.1
            )));
        }
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        for s in &ckpt.runner.snapshots {
            if !s.is_intact() {
                return Err(Error::Checkpoint(format!("snapshot of env {} fails its digest", s.env)));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Human-readable overview, one `key: value` per line.
    pub fn summary(&self) -> String {
        let r = &self.runner;
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k}: {v}");
        };
        line("format", format!("{} {}.{}", self.format, self.version.0, self.version.1));
        line("config_hash", self.settings.hash());
        line("method", r.config.method.as_str().into());
        line("seed", r.config.seed.to_string());
        line("environments", format!("{} trained of {}", r.envs_done, self.stream.len()));
        line("classes", self.stream.num_classes.to_string());
        line("global_step", r.global_step.to_string());
        line(
            "parameters",
            format!(
                "encoder {}, decoder {}, f {}, f' {}, solver {}",
                r.inference.encoder.store.scalar_count(),
                r.inference.decoder.store.scalar_count(),
                r.inference.f.store.scalar_count(),
                r.inference.f_adv.store.scalar_count(),
                r.solver.net.store.scalar_count()
            ),
        );
        for s in &r.snapshots {
            line(
                &format!("snapshot.{}", s.env),
                format!(
                    "classes {:?}, encoder {}, digest {}",
                    s.classes(),
                    if s.encoder.is_some() { "kept" } else { "live" },
                    &s.digest()[..16]
                ),
            );
        }
        line("memory_features", r.memory.envs().map(|e| r.memory.len(e)).sum::<usize>().to_string());
        line("metrics_rows", r.metrics.rows().len().to_string());
        if let Some(last) = r.metrics.last() {
            line(
                "last_eval",
                format!(
                    "step {} env {} first_task {:.4} all_seen {:.4} env {:.4}",
                    last.global_step, last.env, last.first_task_acc, last.all_seen_acc, last.env_acc
                ),
            );
        }
        if let Some(b) = r.bounds.rows.last() {
            line("last_bound", format!("lhs {:.4} rhs {:.4}", b.bound_lhs, b.bound_rhs));
        }
        out
    }
}
