//! Flat `key = value` run configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::losses::Method;
use crate::models::ArchSpec;
use crate::trainer::{LrSchedule, TeacherMode};

use super::CliError;

/// Environment variable consulted for `seed` when neither the file nor the
/// command line sets it.
pub const SEED_ENV: &str = "MMARD_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Float,
    Int,
    Text,
    Dataset,
    Arch,
    Mode,
    OptMethod,
    Methods,
    Floats,
    Schedule,
}

struct KeySpec {
    name: &'static str,
    section: &'static str,
    default: &'static str,
    kind: Kind,
}

const fn key(name: &'static str, section: &'static str, default: &'static str, kind: Kind) -> KeySpec {
    KeySpec {
        name,
        section,
        default,
        kind,
    }
}

/// Every accepted key. `auto` defaults are resolved per command before the run
/// and never reach `resolved.cfg`.
const KEYS: &[KeySpec] = &[
    key("data_dir", "dataset", "data", Kind::Text),
    key("dataset", "dataset", "two-moons", Kind::Dataset),
    key("n_train", "dataset", "500", Kind::Int),
    key("n_test", "dataset", "500", Kind::Int),
    key("noise", "dataset", "0.1", Kind::Float),
    key("classes", "dataset", "auto", Kind::Int),
    key("spacing", "dataset", "1", Kind::Float),
    key("teacher_arch", "teacher", "auto", Kind::Arch),
    key("mode", "teacher", "trades", Kind::Mode),
    key("teacher", "teacher", "runs/teacher/best.ckpt", Kind::Text),
    key("clean_teacher", "teacher", "", Kind::Text),
    key("teachers", "teacher", "", Kind::Text),
    key("method", "method", "", Kind::OptMethod),
    key("inner", "method", "none", Kind::OptMethod),
    key("alpha", "method", "auto", Kind::Float),
    key("beta", "method", "1", Kind::Float),
    key("lambda", "method", "6", Kind::Float),
    key("tau", "method", "1", Kind::Float),
    key("delta", "method", "1", Kind::Float),
    key("methods", "method", "auto", Kind::Methods),
    key("alphas", "method", "0,0.5,1,2", Kind::Floats),
    key("eps", "attack", "auto", Kind::Float),
    key("step", "attack", "auto", Kind::Float),
    key("train_steps", "attack", "10", Kind::Int),
    key("eval_steps", "attack", "20", Kind::Int),
    key("random_start", "attack", "0.001", Kind::Float),
    key("arch", "trainer", "auto", Kind::Arch),
    key("epochs", "trainer", "auto", Kind::Int),
    key("batch", "trainer", "64", Kind::Int),
    key("lr", "trainer", "0.1", Kind::Float),
    key("momentum", "trainer", "0.9", Kind::Float),
    key("weight_decay", "trainer", "0.0002", Kind::Float),
    key("schedule", "trainer", "auto", Kind::Schedule),
    key("eval_every", "trainer", "1", Kind::Int),
    key("seed", "trainer", "0", Kind::Int),
    key("out", "output", "auto", Kind::Text),
    key("student", "output", "runs/distill/best.ckpt", Kind::Text),
];

const SECTIONS: [&str; 6] = ["dataset", "teacher", "method", "attack", "trainer", "output"];

fn spec_of(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

/// Names of all accepted keys, in `resolved.cfg` order.
pub fn key_names() -> impl Iterator<Item = &'static str> {
    SECTIONS
        .iter()
        .flat_map(|s| KEYS.iter().filter(move |k| k.section == *s).map(|k| k.name))
}

fn check(spec: &KeySpec, value: &str) -> Result<(), CliError> {
    if value == "auto" && spec.default == "auto" {
        return Ok(());
    }
    let bad = |what: &str| Err(CliError::key(spec.name, format!("expected {what}, got {value:?}")));
    let ok = match spec.kind {
        Kind::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Int => value.parse::<u64>().is_ok(),
        Kind::Text => true,
        Kind::Dataset => matches!(value, "two-moons" | "blobs" | "patches"),
        Kind::Arch => value.parse::<ArchSpec>().is_ok(),
        Kind::Mode => value.parse::<TeacherMode>().is_ok(),
        Kind::OptMethod => matches!(value, "" | "none") || value.parse::<Method>().is_ok(),
        Kind::Methods => split_list(value).all(|m| m.parse::<Method>().is_ok()) && !value.trim().is_empty(),
        Kind::Floats => split_list(value).all(|a| a.parse::<f64>().is_ok_and(f64::is_finite)) && !value.trim().is_empty(),
        Kind::Schedule => value.parse::<LrSchedule>().is_ok(),
    };
    if ok {
        return Ok(());
    }
    match spec.kind {
        Kind::Float => bad("a finite number"),
        Kind::Int => bad("a non-negative integer"),
        Kind::Dataset => bad("two-moons, blobs or patches"),
        Kind::Arch => bad("an architecture such as mlp:2-32-32-2"),
        Kind::Mode => bad("natural, sat or trades"),
        Kind::OptMethod => bad("a method (sat, trades, ard, iad, rslad, mtard, mmard)"),
        Kind::Methods => bad("a comma-separated list of methods"),
        Kind::Floats => bad("a comma-separated list of numbers"),
        Kind::Schedule => bad("cosine or step:<m1>/<m2>:<factor>"),
        Kind::Text => unreachable!(),
    }
}

pub(crate) fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty())
}

fn parse_lines(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("{origin}:{}: expected `key = value`, got {line:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Fully merged configuration; every known key has a value.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
    explicit: BTreeSet<&'static str>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
            explicit: BTreeSet::new(),
        }
    }
}

impl Config {
    /// Merge defaults, `env_seed`, the file text and the `key=value`
    /// overrides, later sources winning.
    pub fn from_sources(file: Option<(&str, &str)>, overrides: &[String], env_seed: Option<&str>) -> Result<Self, CliError> {
        let mut cfg = Config::default();
        if let Some(seed) = env_seed {
            cfg.assign("seed", seed).map_err(|_| {
                CliError::key(SEED_ENV, format!("expected a non-negative integer, got {seed:?}"))
            })?;
            cfg.explicit.clear();
        }
        if let Some((origin, text)) = file {
            let mut seen = BTreeSet::new();
            for (k, v) in parse_lines(text, origin)? {
                if !seen.insert(k.clone()) {
                    return Err(CliError::key(&k, format!("set twice in {origin}")));
                }
                cfg.assign(&k, &v)?;
            }
        }
        for tok in overrides {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("expected key=value, got {tok:?}")))?;
            cfg.assign(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Read `path` and merge as in [`Config::from_sources`], taking the seed
    /// fallback from the environment.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::io(p, &e))?),
            None => None,
        };
        let origin = path.map(|p| p.display().to_string()).unwrap_or_default();
        let env_seed = std::env::var(SEED_ENV).ok();
        Self::from_sources(
            text.as_deref().map(|t| (origin.as_str(), t)),
            overrides,
            env_seed.as_deref(),
        )
    }

    fn assign(&mut self, k: &str, v: &str) -> Result<(), CliError> {
        let spec = spec_of(k).ok_or_else(|| CliError::key(k, "unknown key"))?;
        check(spec, v)?;
        self.values.insert(spec.name, v.to_string());
        self.explicit.insert(spec.name);
        Ok(())
    }

    /// Replace a value during resolution.
    pub(crate) fn resolve(&mut self, k: &'static str, v: impl ToString) {
        debug_assert!(spec_of(k).is_some(), "unknown key {k}");
        self.values.insert(k, v.to_string());
    }

    pub fn raw(&self, k: &str) -> &str {
        self.values.get(k).map(String::as_str).unwrap_or("")
    }

    pub fn is_auto(&self, k: &str) -> bool {
        self.raw(k) == "auto"
    }

    /// Whether the key came from the file or the command line.
    pub fn is_explicit(&self, k: &str) -> bool {
        self.explicit.contains(k)
    }

    pub fn get<T: FromStr>(&self, k: &str) -> Result<T, CliError> {
        let v = self.raw(k);
        if v == "auto" {
            return Err(CliError::key(k, "unresolved auto value"));
        }
        v.parse().map_err(|_| CliError::key(k, format!("cannot parse {v:?}")))
    }

    pub fn float(&self, k: &str) -> Result<f64, CliError> {
        self.get(k)
    }

    pub fn usize(&self, k: &str) -> Result<usize, CliError> {
        self.get(k)
    }

    /// `None` for the empty string and `none`.
    pub fn opt_method(&self, k: &str) -> Result<Option<Method>, CliError> {
        match self.raw(k) {
            "" | "none" => Ok(None),
            _ => self.get(k).map(Some),
        }
    }

    pub fn require_method(&self, k: &str) -> Result<Method, CliError> {
        self.opt_method(k)?
            .ok_or_else(|| CliError::key(k, "required key is missing"))
    }

    pub fn methods(&self, k: &str) -> Result<Vec<Method>, CliError> {
        split_list(self.raw(k))
            .map(|m| m.parse().map_err(|_| CliError::key(k, format!("unknown method {m:?}"))))
            .collect()
    }

    pub fn floats(&self, k: &str) -> Result<Vec<f64>, CliError> {
        split_list(self.raw(k))
            .map(|a| a.parse().map_err(|_| CliError::key(k, format!("cannot parse {a:?}"))))
            .collect()
    }

    /// `key = value` lines grouped by section, loadable with [`Config::load`].
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (i, section) in SECTIONS.iter().enumerate() {
            if i > 0 {
                s.push('\n');
            }
            let _ = writeln!(s, "# {section}");
            for k in KEYS.iter().filter(|k| k.section == *section) {
                let _ = writeln!(s, "{} = {}", k.name, self.raw(k.name));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(file: &str, cli: &[&str]) -> Result<Config, CliError> {
        let cli: Vec<String> = cli.iter().map(|s| s.to_string()).collect();
        Config::from_sources(Some(("test.cfg", file)), &cli, None)
    }

    #[test]
    fn command_line_beats_file() {
        let c = parse("alpha = 1\n", &["alpha=0.5"]).unwrap();
        assert_eq!(c.float("alpha").unwrap(), 0.5);
        let c = parse("alpha = 1 # trailing comment\n", &[]).unwrap();
        assert_eq!(c.float("alpha").unwrap(), 1.0);
    }

    #[test]
    fn env_seed_is_last_resort() {
        let c = Config::from_sources(None, &[], Some("7")).unwrap();
        assert_eq!(c.usize("seed").unwrap(), 7);
        assert!(!c.is_explicit("seed"));
        let c = Config::from_sources(Some(("f", "seed = 3")), &[], Some("7")).unwrap();
        assert_eq!(c.usize("seed").unwrap(), 3);
        let e = Config::from_sources(None, &[], Some("x")).unwrap_err();
        assert!(e.to_string().contains(SEED_ENV));
    }

    #[test]
    fn type_errors_name_the_key() {
        let e = parse("", &["alpha=banana"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().starts_with("alpha:"), "{e}");
        let e = parse("epochs = -3", &[]).unwrap_err();
        assert!(e.to_string().starts_with("epochs:"), "{e}");
        let e = parse("methods = ard,nope", &[]).unwrap_err();
        assert!(e.to_string().starts_with("methods:"), "{e}");
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        let e = parse("alhpa = 1", &[]).unwrap_err();
        assert!(e.to_string().contains("alhpa"));
        let e = parse("seed = 1\nseed = 2", &[]).unwrap_err();
        assert!(e.to_string().starts_with("seed:"));
        assert!(parse("just words", &[]).is_err());
        assert!(parse("", &["noequals"]).is_err());
    }

    #[test]
    fn required_method() {
        let c = parse("", &[]).unwrap();
        let e = c.require_method("method").unwrap_err();
        assert!(e.to_string().starts_with("method:"));
        let c = parse("method = mmard", &[]).unwrap();
        assert_eq!(c.require_method("method").unwrap(), Method::Mmard);
    }

    #[test]
    fn render_round_trips() {
        let mut c = parse("method = ard\nalphas = 0, 2", &["lr=0.05"]).unwrap();
        c.resolve("eps", 0.1f64 / 3.0);
        let text = c.render();
        let back = Config::from_sources(Some(("r", &text)), &[], None).unwrap();
        assert_eq!(back.values, c.values);
        assert_eq!(back.float("eps").unwrap(), 0.1 / 3.0);
        assert_eq!(key_names().count(), KEYS.len());
    }
}
