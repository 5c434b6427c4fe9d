//! Adam optimizer and the deterministic per-document training loop.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::docmodel::Document;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, LinkCounts, MetricsReport, DEFAULT_BUCKETS};
use crate::model::{forward, loss_and_grads, predict, save_checkpoint, GoseParams, ModelConfig};
use crate::rng::{config_hash, substream_indexed};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const RECORD_FILE: &str = "run_record.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Max global gradient norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Evaluate and checkpoint every this many epochs; 0 means only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 200,
            seed: 0,
            shuffle: true,
            grad_clip: None,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: GoseParams,
    pub v: GoseParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &GoseParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

pub fn global_norm(grads: &GoseParams) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update, clipping by global norm first if
/// configured. Returns the (pre-clip) gradient norm.
pub fn adam_step(
    params: &mut GoseParams,
    grads: &GoseParams,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<f64> {
    for (name, g) in GoseParams::NAMES.iter().zip(grads.tensors()) {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { param: name.to_string() });
        }
    }
    let norm = global_norm(grads);
    let scale = match cfg.grad_clip {
        Some(max) if norm > max => max / norm,
        _ => 1.0,
    };
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for (((p, g), m), v) in tensors {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (k, &g) in g.data().iter().enumerate() {
            let g = g * scale;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-document loss over the epoch.
    pub loss: f64,
    /// Link F1 of the predictions made during the epoch's own forward passes.
    pub running_train_f1: f64,
    pub eval: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub final_checkpoint_hash: Option<String>,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn loss_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Hash identifying a (model, training) configuration pair.
pub fn run_config_hash(model: &ModelConfig, train: &TrainConfig) -> Result<String> {
    config_hash(&(model, train))
}

/// Predicted link sets for every document.
pub fn predict_all(docs: &[Document], params: &GoseParams, cfg: &ModelConfig) -> Result<Vec<crate::evaluation::LinkSet>> {
    docs.iter()
        .map(|d| forward(d, params, cfg).map(|(logits, _)| predict(&logits)))
        .collect()
}

pub fn evaluate_params(docs: &[Document], params: &GoseParams, cfg: &ModelConfig) -> Result<MetricsReport> {
    evaluate(docs, &predict_all(docs, params, cfg)?, &DEFAULT_BUCKETS)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Documents evaluated at every `eval_every` epoch and at the end.
    pub eval_set: Option<&'a [Document]>,
    /// Directory receiving the checkpoint and run record.
    pub out_dir: Option<&'a Path>,
}

pub fn train(
    dataset: &[Document],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<(GoseParams, RunRecord)> {
    if dataset.is_empty() {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    model_cfg.validate()?;
    train_cfg.validate()?;
    let started = Instant::now();
    let mut params = GoseParams::init(model_cfg, train_cfg.seed)?;
    let mut state = AdamState::new(&params);
    let mut record = RunRecord {
        config_hash: run_config_hash(model_cfg, train_cfg)?,
        seed: train_cfg.seed,
        model: model_cfg.clone(),
        train: train_cfg.clone(),
        epochs: Vec::with_capacity(train_cfg.epochs),
        final_checkpoint_hash: None,
        wall_time_secs: 0.0,
    };
    let checkpoint = |params: &GoseParams| -> Result<Option<String>> {
        match opts.out_dir {
            Some(dir) => Ok(Some(
                save_checkpoint(&dir.join(CHECKPOINT_DIR), params, model_cfg)?.content_hash,
            )),
            None => Ok(None),
        }
    };

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 1..=train_cfg.epochs {
        if train_cfg.shuffle {
            order.sort_unstable();
            order.shuffle(&mut substream_indexed(train_cfg.seed, "shuffle", epoch as u64));
        }
        let mut total = 0.0;
        let mut counts = LinkCounts::default();
        for &i in &order {
            let doc = &dataset[i];
            let step = loss_and_grads(doc, &params, model_cfg).and_then(|s| {
                if s.loss.is_finite() {
                    Ok(s)
                } else {
                    Err(Error::Diverged { epoch })
                }
            });
            let update = step.and_then(|s| adam_step(&mut params, &s.grads, &mut state, train_cfg).map(|_| s));
            let s = match update {
                Ok(s) => s,
                Err(e) => {
                    // params still hold the last finite update
                    checkpoint(&params)?;
                    log::error!("training aborted in epoch {epoch}: {e}");
                    return Err(e);
                }
            };
            total += s.loss;
            counts.add(LinkCounts::of(&predict(&s.logits), &doc.links));
        }
        let last = epoch == train_cfg.epochs;
        let due = last || (train_cfg.eval_every > 0 && epoch % train_cfg.eval_every == 0);
        let eval = match (due, opts.eval_set) {
            (true, Some(set)) => Some(evaluate_params(set, &params, model_cfg)?),
            _ => None,
        };
        if due && !last {
            checkpoint(&params)?;
        }
        let loss = total / dataset.len() as f64;
        log::debug!("epoch {epoch}: loss {loss:.6}");
        record.epochs.push(EpochRecord {
            epoch,
            loss,
            running_train_f1: counts.prf().2,
            eval,
        });
    }
    record.final_checkpoint_hash = checkpoint(&params)?;
    record.wall_time_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = opts.out_dir {
        let path = dir.join(RECORD_FILE);
        let text = serde_json::to_string_pretty(&record)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok((params, record))
}
