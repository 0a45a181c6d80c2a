//! Experiment configuration files.
//!
//! The format is line based: `key = value`, `#` starts a comment, and a
//! `[section]` header prefixes the keys below it, so `[filter]` followed by
//! `tau = 0.9` is the same as `filter.tau = 0.9`. Sweep keys take
//! comma-separated lists; seeds also accept a half-open range `a..b`.
//!
//! Values are resolved as built-in experiment defaults, then the file, then
//! command-line overrides, later sources replacing earlier ones key by key.

use anyhow::{anyhow, bail, Context, Result};
use qfil_core::oampi::{EnvKind, Regime, RunConfig};
use qfil_core::operators::{Comparison, FilterConfig, FilterVariant, QuantileMode, Refresh, TrainHyper};
use qfil_core::policy::ActMode;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    BanditBiasVar,
    GridOneStep,
    GridIterative,
    Custom,
}

impl FromStr for Experiment {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "bandit-biasvar" => Self::BanditBiasVar,
            "grid-onestep" => Self::GridOneStep,
            "grid-iterative" => Self::GridIterative,
            "custom" => Self::Custom,
            _ => bail!("unknown experiment `{s}` (expected bandit-biasvar, grid-onestep, grid-iterative or custom)"),
        })
    }
}

impl Experiment {
    /// Built-in key/value defaults layered under the config file.
    fn defaults(self) -> Vec<(&'static str, &'static str)> {
        match self {
            Self::BanditBiasVar => vec![
                ("env", "bandit"),
                ("n", "100, 1000, 10000"),
                ("filter.variant", "qfil, none"),
                ("filter.tau", "0.5, 0.75, 0.9, 0.95"),
                ("seeds", "0..50"),
            ],
            Self::GridOneStep => vec![
                ("env", "grid"),
                ("regime", "one-step"),
                ("n", "200"),
                ("filter.variant", "qfil, none"),
                ("filter.tau", "0.75, 0.9"),
                ("seeds", "0..3"),
            ],
            Self::GridIterative => vec![
                ("env", "grid"),
                ("regime", "iterative"),
                ("n", "200"),
                ("filter.variant", "qfil"),
                ("filter.tau", "0.75, 0.9"),
                ("seeds", "0..3"),
            ],
            Self::Custom => vec![("env", "bandit"), ("seeds", "0")],
        }
    }
}

/// Ordered key/value pairs from one source.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues(pub BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| anyhow!("line {}: unterminated section header", i + 1))?
                    .trim();
                section = if name.is_empty() { String::new() } else { format!("{name}.") };
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            let key = k.trim();
            if key.is_empty() {
                bail!("line {}: empty key", i + 1);
            }
            out.insert(format!("{section}{key}"), v.trim().to_string());
        }
        Ok(Self(out))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `key=value` strings from the command line.
    pub fn from_overrides<S: AsRef<str>>(items: &[S]) -> Result<Self> {
        let mut out = BTreeMap::new();
        for item in items {
            let item = item.as_ref();
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("override `{item}` is not of the form key=value"))?;
            out.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(out))
    }

    pub fn layer(&mut self, other: &KeyValues) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }
}

/// A resolved experiment: a list of run configurations plus the seeds and
/// output location.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub cells: Vec<RunConfig>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

fn list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn one<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("invalid value `{v}` for `{key}`: {e}"))
}

fn many<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items = list(v);
    if items.is_empty() {
        bail!("`{key}` needs at least one value");
    }
    items.into_iter().map(|x| one(key, x)).collect()
}

pub fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for item in list(v) {
        match item.split_once("..") {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (one("seeds", a.trim())?, one("seeds", b.trim())?);
                if a >= b {
                    bail!("empty seed range `{item}`");
                }
                seeds.extend(a..b);
            }
            None => seeds.push(one("seeds", item)?),
        }
    }
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        bail!("seeds must be distinct");
    }
    Ok(seeds)
}

fn enum_value<T: FromStr<Err = String>>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>().map_err(|e| anyhow!("`{key}`: {e}"))
}

fn set_hyper(h: &mut TrainHyper, field: &str, key: &str, v: &str) -> Result<()> {
    match field {
        "steps" => h.steps = one(key, v)?,
        "batch" => h.batch = one(key, v)?,
        "lr" => h.lr = one(key, v)?,
        "width" => h.width = one(key, v)?,
        "depth" => h.depth = one(key, v)?,
        _ => bail!("unknown key `{key}`"),
    }
    Ok(())
}

fn bool_value(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("invalid value `{v}` for `{key}` (expected true or false)"),
    }
}

/// Keys that expand into several cells; everything else is scalar.
const SWEEP_KEYS: [&str; 6] = ["n", "filter.variant", "filter.tau", "filter.alpha", "filter.keep_fraction", "seeds"];

/// Applies one scalar key to a configuration.
fn apply(cfg: &mut RunConfig, key: &str, v: &str, base: &Path) -> Result<()> {
    match key {
        "env" | "regime" => {}
        "grid.map" => {
            let path = base.join(v);
            cfg.grid_map = Some(std::fs::read_to_string(&path).with_context(|| format!("reading grid map {}", path.display()))?);
        }
        "gamma" => cfg.gamma = one(key, v)?,
        "max_episode_steps" => cfg.max_episode_steps = one(key, v)?,
        "behavior_greedy" => cfg.behavior_greedy = one(key, v)?,
        "iterative.steps" => cfg.iterative_steps = one(key, v)?,
        "iterative.q_steps_per_policy_step" => cfg.q_steps_per_policy_step = one(key, v)?,
        "iterative.cold_start" => cfg.cold_start = bool_value(key, v)?,
        "filter.clip" => cfg.filter.clip = one(key, v)?,
        "filter.samples" => cfg.filter.samples = one(key, v)?,
        "filter.refresh" => {
            cfg.filter.refresh = match v {
                "per-epoch" => Refresh::PerEpoch,
                "cached" => Refresh::Cached,
                _ => bail!("`{key}`: expected per-epoch or cached"),
            }
        }
        "filter.comparison" => {
            cfg.filter.comparison = match v {
                "gt" => Comparison::Gt,
                "ge" => Comparison::Ge,
                _ => bail!("`{key}`: expected gt or ge"),
            }
        }
        "filter.quantile_mode" => {
            cfg.filter.quantile_mode = match v {
                "sampled" => QuantileMode::Sampled,
                "exact" => QuantileMode::Exact,
                _ => bail!("`{key}`: expected sampled or exact"),
            }
        }
        "eval.states" => cfg.eval_states = one(key, v)?,
        "eval.mode" => {
            cfg.eval_mode = match v {
                "sampled" => ActMode::Sampled,
                "modal" => ActMode::Modal,
                _ => bail!("`{key}`: expected sampled or modal"),
            }
        }
        "snapshots" => cfg.snapshots = one(key, v)?,
        "diag.states" => cfg.diag_states = one(key, v)?,
        _ => {
            let (section, field) = key.split_once('.').ok_or_else(|| anyhow!("unknown key `{key}`"))?;
            let h = match section {
                "behavior" => &mut cfg.behavior,
                "q" => &mut cfg.q,
                "policy" => &mut cfg.policy,
                _ => bail!("unknown key `{key}`"),
            };
            set_hyper(h, field, key, v)?;
        }
    }
    Ok(())
}

impl ExperimentSpec {
    /// Resolves defaults < file < overrides into run configurations.
    /// `base` is the directory relative paths in the file resolve against.
    pub fn resolve(experiment: Experiment, file: Option<&KeyValues>, overrides: &KeyValues, base: &Path, out: PathBuf) -> Result<Self> {
        let mut kv = KeyValues(experiment.defaults().into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect());
        if let Some(f) = file {
            kv.layer(f);
        }
        kv.layer(overrides);
        let get = |k: &str| kv.0.get(k).map(String::as_str);

        let env: EnvKind = enum_value("env", get("env").unwrap_or("bandit"))?;
        let regime: Regime = enum_value("regime", get("regime").unwrap_or("one-step"))?;
        let seeds = parse_seeds(get("seeds").unwrap_or("0"))?;
        let ns: Vec<usize> = match get("n") {
            Some(v) => many("n", v)?,
            None => vec![if env == EnvKind::Bandit { 10_000 } else { 200 }],
        };
        let variants: Vec<FilterVariant> = match get("filter.variant") {
            Some(v) => list(v).into_iter().map(|x| enum_value("filter.variant", x)).collect::<Result<_>>()?,
            None => vec![FilterVariant::Qfil],
        };
        if variants.is_empty() {
            bail!("`filter.variant` needs at least one value");
        }
        let taus: Vec<f64> = many("filter.tau", get("filter.tau").unwrap_or("0.9"))?;
        let alphas: Vec<f64> = many("filter.alpha", get("filter.alpha").unwrap_or("1"))?;
        let fractions: Vec<f64> = many("filter.keep_fraction", get("filter.keep_fraction").unwrap_or("0.1"))?;

        let mut cells = Vec::new();
        for &n in &ns {
            for &variant in &variants {
                let filters: Vec<FilterConfig> = match variant {
                    FilterVariant::Qfil => taus.iter().map(|&t| FilterConfig::qfil(t)).collect(),
                    FilterVariant::Expadv => alphas.iter().map(|&a| FilterConfig::expadv(a)).collect(),
                    FilterVariant::Pctbc => fractions.iter().map(|&k| FilterConfig::pctbc(k)).collect(),
                    FilterVariant::None => vec![FilterConfig::none()],
                };
                for f in filters {
                    let mut cfg = match env {
                        EnvKind::Bandit => RunConfig::bandit(n, 0.9, 0),
                        EnvKind::Grid => RunConfig::grid(n, 0.9, 0, regime),
                    };
                    cfg.regime = regime;
                    // keep the environment's quantile settings, replace the rest
                    let preset = cfg.filter.clone();
                    cfg.filter = FilterConfig {
                        refresh: preset.refresh,
                        comparison: preset.comparison,
                        quantile_mode: preset.quantile_mode,
                        ..f
                    };
                    for (k, v) in &kv.0 {
                        if !SWEEP_KEYS.contains(&k.as_str()) {
                            apply(&mut cfg, k, v, base)?;
                        }
                    }
                    cfg.validate().map_err(|e| anyhow!("{e}"))?;
                    cells.push(cfg);
                }
            }
        }
        Ok(Self {
            experiment,
            cells,
            seeds,
            out,
        })
    }
}
