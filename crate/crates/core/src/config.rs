//! Flat `key = value` configuration.
//!
//! Every field of [`Settings`] is addressable by its dotted path, for example
//! `run.model.beta = 1.0` or `stream.transforms.1.rotation = 0.3`. Keys are
//! checked against the serialized form of the settings, so a key that does
//! not name an existing field is rejected.
//!
//! Two keys are applied before all others:
//!
//! * `preset` picks the starting stream (`scenario1`, `scenario2_ascending`,
//!   `scenario2_descending`).
//! * `run.method` resets the component flags to the method's grid row.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::orchestrator::{Method, RunConfig};
use crate::streams::{DomainOrder, DomainTransform, StreamSpec};

/// Stream fields named in validation messages, most specific first.
const STREAM_FIELDS: [&str; 5] = ["classes_per_task", "num_environments", "samples_per_class", "base_noise", "transforms"];

pub const PRESETS: [&str; 3] = ["scenario1", "scenario2_ascending", "scenario2_descending"];

/// Where the stream comes from when it is not synthesized.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InputSettings {
    /// Stream CSV to ingest instead of building `stream`.
    pub csv: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateSettings {
    pub seeds: Vec<u64>,
    /// Worker threads; rows are merged in grid order regardless.
    pub threads: usize,
}

impl Default for AblateSettings {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            threads: 4,
        }
    }
}

/// Everything a command needs to build a stream and train on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub preset: String,
    pub stream: StreamSpec,
    pub input: InputSettings,
    pub run: RunConfig,
    pub ablate: AblateSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self::from_preset("scenario1", Method::Gfr).expect("built-in preset")
    }
}

impl Settings {
    pub fn from_preset(preset: &str, method: Method) -> Result<Self> {
        let stream = match preset {
            "scenario1" => StreamSpec::moons_tasks(0),
            "scenario2_ascending" => StreamSpec::blob_domains(0, DomainOrder::Ascending),
            "scenario2_descending" => StreamSpec::blob_domains(0, DomainOrder::Descending),
            other => {
                return Err(Error::Config {
                    key: "preset".into(),
                    msg: format!("unknown preset `{other}` (expected one of {})", PRESETS.join(", ")),
                })
            }
        };
        let mut run = RunConfig::new(method);
        run.train_solver_from_scratch_per_env = preset != "scenario1";
        Ok(Self {
            preset: preset.into(),
            stream,
            input: InputSettings::default(),
            run,
            ablate: AblateSettings::default(),
        })
    }

    /// Resolve a list of `(key, value)` overrides. Later entries win.
    pub fn resolve(entries: &[(String, String)]) -> Result<Self> {
        let mut latest: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in entries {
            latest.insert(k.as_str(), v.as_str());
        }
        let preset = latest.get("preset").copied().unwrap_or("scenario1");
        let method = match latest.get("run.method") {
            Some(m) => Method::parse(m).ok_or_else(|| Error::Config {
                key: "run.method".into(),
                msg: format!("unknown method `{m}`"),
            })?,
            None => Method::Gfr,
        };
        let base = Self::from_preset(preset, method)?;
        let mut value = serde_json::to_value(&base)?;
        for (k, v) in &latest {
            if matches!(*k, "preset" | "run.method") {
                continue;
            }
            set_path(&mut value, k, v)?;
        }
        serde_json::from_value(value).map_err(|e| Error::Config {
            key: "config".into(),
            msg: e.to_string(),
        })
    }

    /// Parse a config file, then apply `--set` overrides and the seed flag.
    pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut entries = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config {
                    key: "--config".into(),
                    msg: format!("{}: {e}", p.display()),
                })?;
                parse_entries(&text)?
            }
            None => Vec::new(),
        };
        for s in sets {
            entries.push(split_assignment(s, None)?);
        }
        if let Some(seed) = seed {
            entries.push(("run.seed".into(), seed.to_string()));
            entries.push(("stream.seed".into(), seed.to_string()));
        }
        Self::resolve(&entries)
    }

    /// Stream and run checks; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        if self.input.csv.is_none() {
            self.stream.validate().map_err(|e| {
                let msg = e.to_string();
                let field = STREAM_FIELDS.iter().find(|f| msg.contains(*f));
                Error::Config {
                    key: field.map_or("stream".into(), |f| format!("stream.{f}")),
                    msg,
                }
            })?;
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::Config {
                key: "ablate.seeds".into(),
                msg: "needs at least one seed".into(),
            });
        }
        if self.ablate.threads == 0 {
            return Err(Error::Config {
                key: "ablate.threads".into(),
                msg: "must be positive".into(),
            });
        }
        self.run.validate()
    }

    /// Every field as `key = value`, sorted by key. Feeding this text back
    /// through [`Settings::resolve`] reproduces the settings.
    pub fn echo(&self) -> String {
        let value = serde_json::to_value(self).expect("settings serialize");
        let mut flat = BTreeMap::new();
        flatten("", &value, &mut flat);
        let mut out = String::new();
        // Applied first on reload, listed first for readability.
        let _ = writeln!(out, "preset = {}", self.preset);
        let _ = writeln!(out, "run.method = {}", self.run.method.as_str());
        for (k, v) in flat {
            if k != "preset" && k != "run.method" {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    /// SHA-256 of the echo, hex encoded. The worker count does not affect
    /// results and is left out.
    pub fn hash(&self) -> String {
        let echo: String = self
            .echo()
            .lines()
            .filter(|l| !l.starts_with("ablate.threads "))
            .flat_map(|l| [l, "\n"])
            .collect();
        hex::encode(Sha256::digest(echo.as_bytes()))
    }
}

/// `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(split_assignment(line, Some(i + 1))?);
    }
    Ok(out)
}

fn split_assignment(s: &str, line: Option<usize>) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config {
        key: s.trim().into(),
        msg: match line {
            Some(n) => format!("line {n}: expected key = value"),
            None => "expected key=value".into(),
        },
    })?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config {
            key: String::new(),
            msg: "empty key".into(),
        });
    }
    Ok((k.into(), v.trim().into()))
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    let join = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                flatten(&join(k), child, out);
            }
        }
        Value::Array(items) if items.iter().all(|x| !x.is_object() && !x.is_array()) => {
            out.insert(prefix.into(), items.iter().map(scalar_text).collect::<Vec<_>>().join(","));
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                flatten(&join(&i.to_string()), child, out);
            }
        }
        scalar => {
            out.insert(prefix.into(), scalar_text(scalar));
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

/// Parse `text` into a value of the same JSON kind as `like`.
fn coerce(key: &str, like: &Value, text: &str) -> Result<Value> {
    match like {
        Value::Bool(_) => match text {
            "true" | "1" | "yes" | "on" => Ok(Value::Bool(true)),
            "false" | "0" | "no" | "off" => Ok(Value::Bool(false)),
            _ => Err(bad(key, format!("expected a boolean, got `{text}`"))),
        },
        Value::Number(n) if n.is_f64() => {
            let x: f64 = text.parse().map_err(|_| bad(key, format!("expected a number, got `{text}`")))?;
            Number::from_f64(x)
                .map(Value::Number)
                .ok_or_else(|| bad(key, "must be finite"))
        }
        Value::Number(n) if n.is_i64() && !n.is_u64() => text
            .parse::<i64>()
            .map(|x| Value::Number(x.into()))
            .map_err(|_| bad(key, format!("expected an integer, got `{text}`"))),
        Value::Number(_) => text
            .parse::<u64>()
            .map(|x| Value::Number(x.into()))
            .map_err(|_| bad(key, format!("expected a nonnegative integer, got `{text}`"))),
        Value::String(_) => Ok(Value::String(text.into())),
        Value::Null => Ok(if text == "none" || text.is_empty() {
            Value::Null
        } else {
            Value::String(text.into())
        }),
        Value::Array(items) => {
            let body = text.trim().trim_start_matches('[').trim_end_matches(']');
            if body.trim().is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            let like = items.first().cloned().unwrap_or(Value::Null);
            if like.is_object() || like.is_array() {
                return Err(bad(key, "set the elements by index, e.g. `key.0.field`"));
            }
            let like = if like.is_null() { Value::Number(0u64.into()) } else { like };
            body.split(',')
                .map(|t| coerce(key, &like, t.trim()))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        Value::Object(_) => Err(bad(key, "names a section; set one of its fields")),
    }
}

/// Element appended when an index one past the end of a list is addressed.
fn fresh_element(path: &[&str]) -> Option<Value> {
    match path {
        ["stream", "transforms"] => serde_json::to_value(DomainTransform::identity()).ok(),
        _ => None,
    }
}

fn set_path(root: &mut Value, key: &str, text: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (depth, part) in parts.iter().enumerate() {
        let last = depth + 1 == parts.len();
        cur = match cur {
            Value::Object(m) => step_object(m, part).ok_or_else(|| bad(key, "unknown key"))?,
            Value::Array(items) => {
                let i: usize = part.parse().map_err(|_| bad(key, "expected a list index"))?;
                if i == items.len() {
                    let fresh = fresh_element(&parts[..depth]).ok_or_else(|| bad(key, "index out of range"))?;
                    items.push(fresh);
                }
                items.get_mut(i).ok_or_else(|| bad(key, "index out of range"))?
            }
            _ => return Err(bad(key, "unknown key")),
        };
        if last {
            *cur = coerce(key, cur, text)?;
        }
    }
    Ok(())
}

fn step_object<'a>(m: &'a mut Map<String, Value>, part: &str) -> Option<&'a mut Value> {
    m.get_mut(part)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::ReplayKind;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn echo_round_trips() {
        let s = Settings::resolve(&kv(&[
            ("run.method", "baseline2"),
            ("run.model.beta", "0.5"),
            ("stream.transforms.1.rotation", "0.25"),
            ("ablate.seeds", "1,2,3"),
        ]))
        .unwrap();
        let again = Settings::resolve(&parse_entries(&s.echo()).unwrap()).unwrap();
        assert_eq!(s, again);
        assert_eq!(s.run.model.beta, 0.5);
        assert_eq!(s.ablate.seeds, vec![1, 2, 3]);
        assert!(!s.run.warmup);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        let e = Settings::resolve(&kv(&[("run.modle.beta", "1")])).unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "run.modle.beta"));
        let e = Settings::resolve(&kv(&[("run.steps_per_env", "many")])).unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "run.steps_per_env"));
        let e = Settings::resolve(&kv(&[("run.method", "gfr2")])).unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "run.method"));
        assert!(Settings::resolve(&kv(&[("run.model", "1")])).is_err());
    }

    #[test]
    fn method_resets_flags_before_overrides() {
        let s = Settings::resolve(&kv(&[("run.replay", "memory"), ("run.method", "baseline4_naive")])).unwrap();
        assert_eq!(s.run.replay, ReplayKind::Memory);
        assert!(!s.run.snapshot);
        assert!(s.run.is_ablation());
    }

    #[test]
    fn transforms_can_grow_by_one() {
        let s = Settings::resolve(&kv(&[("stream.transforms.2.scale", "2.0")])).unwrap();
        assert_eq!(s.stream.transforms.len(), 3);
        assert_eq!(s.stream.transforms[2].scale, 2.0);
        assert!(Settings::resolve(&kv(&[("stream.transforms.5.scale", "2.0")])).is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let e = parse_entries("# header\n\nrun.seed = 4  # trailing\n").unwrap();
        assert_eq!(e, kv(&[("run.seed", "4")]));
        assert!(parse_entries("no equals sign").is_err());
    }

    #[test]
    fn presets_and_csv_input() {
        let s = Settings::resolve(&kv(&[("preset", "scenario2_descending")])).unwrap();
        assert_eq!(s.stream.order, DomainOrder::Descending);
        assert!(s.run.train_solver_from_scratch_per_env);
        let s = Settings::resolve(&kv(&[("input.csv", "data.csv")])).unwrap();
        assert_eq!(s.input.csv.as_deref(), Some("data.csv"));
        assert!(Settings::resolve(&kv(&[("preset", "nope")])).is_err());
    }
}
