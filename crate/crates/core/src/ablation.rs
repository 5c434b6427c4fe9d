//! Multi-seed comparisons: the four ablation variants and the sweep over
//! refinement rounds.

use serde::{Deserialize, Serialize};

use crate::docmodel::Document;
use crate::error::{Error, Result};
use crate::evaluation::MetricsReport;
use crate::model::{ModelConfig, Variant};
use crate::synthgen::{generate, GenConfig};
use crate::training::{evaluate_params, train, TrainConfig, TrainOptions};

/// A synthetic benchmark: per seed, `n_train + n_test` documents are drawn
/// from `gen` with the seed substituted, the first `n_train` used for
/// training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Benchmark {
    pub gen: GenConfig,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for Benchmark {
    fn default() -> Self {
        Benchmark {
            gen: GenConfig::default(),
            n_train: 100,
            n_test: 20,
        }
    }
}

impl Benchmark {
    pub fn split(&self, seed: u64) -> Result<(Vec<Document>, Vec<Document>)> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be positive".into()));
        }
        let cfg = GenConfig {
            seed,
            n_docs: self.n_train + self.n_test,
            ..self.gen.clone()
        };
        let mut docs = generate(&cfg)?;
        let test = docs.split_off(self.n_train);
        Ok((docs, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test: MetricsReport,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub label: String,
    pub model: ModelConfig,
    pub runs: Vec<SeedResult>,
    pub mean_f1: f64,
    pub mean_crossing_rate: f64,
    /// Mean farthest-bucket recall over seeds where that bucket is non-empty.
    pub mean_far_recall: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl ArmSummary {
    fn new(label: String, model: ModelConfig, runs: Vec<SeedResult>) -> Self {
        ArmSummary {
            mean_f1: mean(runs.iter().map(|r| r.test.f1)).unwrap_or(0.0),
            mean_crossing_rate: mean(runs.iter().map(|r| r.test.crossing_conflict_rate)).unwrap_or(0.0),
            mean_far_recall: mean(runs.iter().filter_map(|r| r.test.far_recall())),
            label,
            model,
            runs,
        }
    }
}

/// Train and test one model configuration on every seed.
pub fn run_arm(
    label: &str,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    bench: &Benchmark,
    seeds: &[u64],
) -> Result<ArmSummary> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (train_docs, test_docs) = bench.split(seed)?;
        let tc = TrainConfig { seed, ..train_cfg.clone() };
        let (params, record) = train(&train_docs, model, &tc, TrainOptions::default())?;
        let test = evaluate_params(&test_docs, &params, model)?;
        log::info!("{label} seed {seed}: test f1 {:.4}", test.f1);
        runs.push(SeedResult {
            seed,
            test,
            final_loss: record.epochs.last().map_or(f64::NAN, |e| e.loss),
        });
    }
    Ok(ArmSummary::new(label.to_string(), model.clone(), runs))
}

/// The four variants, each differing from `base` only in ablation flags.
pub fn ablate(base: &ModelConfig, train_cfg: &TrainConfig, bench: &Benchmark, seeds: &[u64]) -> Result<Vec<ArmSummary>> {
    Variant::ALL
        .iter()
        .map(|v| run_arm(v.name(), &v.apply(base), train_cfg, bench, seeds))
        .collect()
}

/// Full model with `rounds` set to each of `ks`.
pub fn sweep_k(
    base: &ModelConfig,
    ks: &[usize],
    train_cfg: &TrainConfig,
    bench: &Benchmark,
    seeds: &[u64],
) -> Result<Vec<ArmSummary>> {
    ks.iter()
        .map(|&k| {
            let model = ModelConfig {
                rounds: k,
                ..Variant::Full.apply(base)
            };
            run_arm(&format!("K={k}"), &model, train_cfg, bench, seeds)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_determinism() {
        let b = Benchmark { n_train: 3, n_test: 2, ..Benchmark::default() };
        let (tr, te) = b.split(4).unwrap();
        assert_eq!((tr.len(), te.len()), (3, 2));
        assert_eq!(b.split(4).unwrap().0, tr);
        assert_ne!(b.split(5).unwrap().0, tr);
        assert!(Benchmark { n_test: 0, ..b }.split(0).is_err());
    }
}
