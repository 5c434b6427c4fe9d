//! The configuration file shared by every subcommand, and `--set` overrides.

use std::fs;
use std::path::Path;

use gose_core::ablation::Benchmark;
use gose_core::evaluation::{validate_edges, DEFAULT_BUCKETS};
use gose_core::model::ModelConfig;
use gose_core::synthgen::GenConfig;
use gose_core::training::TrainConfig;
use gose_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable consulted for the root seed when neither the
/// command line nor the config file sets one.
pub const SEED_ENV: &str = "GOSE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; copied into `gen.seed` and `train.seed` once resolved.
    pub seed: Option<u64>,
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Runs use seeds `seed, seed + 1, ...`.
    pub n_seeds: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let b = Benchmark::default();
        BenchConfig { n_train: b.n_train, n_test: b.n_test, n_seeds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub buckets: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { buckets: DEFAULT_BUCKETS.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub h: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { h: 1e-5, tolerance: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ks: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { ks: (1..=5).collect() }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            gen: GenConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        validate_edges(&self.eval.buckets)?;
        if self.bench.n_train == 0 || self.bench.n_test == 0 || self.bench.n_seeds == 0 {
            return Err(Error::Config("bench.n_train, bench.n_test and bench.n_seeds must be positive".into()));
        }
        if !(self.gradcheck.h > 0.0 && self.gradcheck.tolerance > 0.0) {
            return Err(Error::Config("gradcheck.h and gradcheck.tolerance must be positive".into()));
        }
        if self.sweep.ks.is_empty() || self.sweep.ks.contains(&0) {
            return Err(Error::Config("sweep.ks must be a non-empty list of positive round counts".into()));
        }
        Ok(())
    }

    pub fn benchmark(&self) -> Benchmark {
        Benchmark { gen: self.gen.clone(), n_train: self.bench.n_train, n_test: self.bench.n_test }
    }

    pub fn seeds(&self) -> Vec<u64> {
        let root = self.seed.unwrap_or(0);
        (0..self.bench.n_seeds as u64).map(|i| root.wrapping_add(i)).collect()
    }
}

/// Set `path` (dot separated) inside `target`. `raw` is read as JSON when
/// it parses, otherwise as a string.
pub fn apply_override(target: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut keys = path.split('.').peekable();
    let mut node = target;
    while let Some(key) = keys.next() {
        if key.is_empty() {
            return Err(Error::Config(format!("empty key segment in `{path}`")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{path}`: `{key}` is not inside an object")))?;
        if keys.peek().is_none() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Overlay `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| Error::Parse { location: format!("line {}", e.line()), message: e.to_string() })?;
    from_value(value)
}

fn from_value(value: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| Error::Parse {
        location: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Defaults, then the config file, then `--set` overrides, then the seed
/// (flag, config, environment, 0 in that order).
pub fn resolve(
    file: Option<&Path>,
    sets: &[String],
    seed_flag: Option<u64>,
    seed_env: Option<&str>,
) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: format!("{}:{}", path.display(), e.line()),
            message: e.to_string(),
        })?;
        if !patch.is_object() {
            return Err(Error::Config(format!("{}: top level must be an object", path.display())));
        }
        merge(&mut value, patch);
    }
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {set}` is not of the form key=value")))?;
        apply_override(&mut value, key.trim(), raw)?;
    }
    let mut cfg = from_value(value)?;
    let env_seed = match seed_env {
        Some(s) => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?,
        ),
        None => None,
    };
    let seed = seed_flag.or(cfg.seed).or(env_seed).unwrap_or(0);
    cfg.seed = Some(seed);
    cfg.gen.seed = seed;
    cfg.train.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}
