//! The `gose` command line.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gose_core::ablation::{ablate, sweep_k, ArmSummary};
use gose_core::docmodel::{load_dataset, save_dataset, Document, DATASET_SCHEMA};
use gose_core::evaluation::{evaluate, write_csv, MetricsReport, PredictionFile};
use gose_core::model::{gradcheck_loss, load_checkpoint, GoseParams, CHECKPOINT_VERSION};
use gose_core::rng::{config_hash, sha256_hex};
use gose_core::synthgen::{generate, generate_doc};
use gose_core::training::{predict_all, train, TrainOptions};
use gose_core::{Error, Result};
use serde::Serialize;

use crate::config::{resolve, RunConfig, SEED_ENV};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const TABLE_FILE: &str = "metrics.csv";
pub const ARMS_FILE: &str = "arms.json";

#[derive(Debug, Parser)]
#[command(name = "gose", version, about = "Train and evaluate the GOSE relation extraction head")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file; every subcommand reads the same schema.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set model.d_h=24`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Root seed; takes precedence over the config file and GOSE_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Print human-readable tables instead of JSON.
    #[arg(long, global = true)]
    pub pretty: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset to `<out>/dataset.jsonl`.
    Generate,
    /// Train on a dataset; writes the checkpoint and run record to `<out>`.
    Train {
        /// Training dataset file.
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Dataset evaluated after training and at `train.eval_every`.
        #[arg(long, value_name = "FILE")]
        eval_data: Option<PathBuf>,
    },
    /// Score predictions against a dataset's gold links.
    Eval {
        /// Dataset holding the gold links.
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Checkpoint directory whose predictions are scored.
        #[arg(long, value_name = "DIR", conflicts_with = "pred", required_unless_present = "pred")]
        checkpoint: Option<PathBuf>,
        /// Prediction file `{"predictions": {doc_id: [[key, value], ...]}}`.
        #[arg(long, value_name = "FILE")]
        pred: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the full model on
    /// the first generated document; fails above `gradcheck.tolerance`.
    Gradcheck,
    /// Train and test the four ablation variants over the benchmark seeds.
    Ablate,
    /// Train and test the full model for every round count in `sweep.ks`.
    SweepK,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Gradcheck => "gradcheck",
            Command::Ablate => "ablate",
            Command::SweepK => "sweep-k",
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        match self {
            Command::Train { data, eval_data } => std::iter::once(data.as_path()).chain(eval_data.as_deref()).collect(),
            Command::Eval { data, checkpoint, pred } => std::iter::once(data.as_path())
                .chain(checkpoint.as_deref())
                .chain(pred.as_deref())
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// Identifies a run: equal manifests give equal outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    pub config: RunConfig,
    /// SHA-256 of every input file (checkpoints: of their manifest).
    pub inputs: Vec<(String, String)>,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub gose: &'static str,
    pub checkpoint: &'static str,
    pub dataset: &'static str,
}

/// Failure of a run, mapped onto the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Run<T> = std::result::Result<T, Failure>;

fn input_hash(path: &Path) -> Result<String> {
    let file = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    let bytes = fs::read(&file).map_err(|e| Error::Validation(format!("cannot read {}: {e}", file.display())))?;
    Ok(sha256_hex(&bytes))
}

fn check_inputs(cmd: &Command) -> Run<Vec<(String, String)>> {
    let mut out = Vec::new();
    for path in cmd.inputs() {
        if !path.exists() {
            return Err(Failure::Usage(format!("{} does not exist", path.display())));
        }
        out.push((path.display().to_string(), input_hash(path)?));
    }
    Ok(out)
}

fn prepare_out(out: Option<&Path>, required: bool, cmd: &str) -> Run<Option<PathBuf>> {
    match out {
        None if required => Err(Failure::Usage(format!("`{cmd}` needs --out"))),
        None => Ok(None),
        Some(dir) => {
            if dir.exists() && !dir.is_dir() {
                return Err(Failure::Usage(format!("--out {} is not a directory", dir.display())));
            }
            fs::create_dir_all(dir)
                .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
            Ok(Some(dir.to_path_buf()))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Validation(format!("cannot write {}: {e}", path.display())))
}

fn emit(stdout: &mut dyn Write, text: &str) -> Run<()> {
    writeln!(stdout, "{text}").map_err(|e| Failure::Runtime(e.to_string()))
}

fn metrics_table(rows: &[(String, &MetricsReport)]) -> String {
    let mut s = format!("{:<22} {:>9} {:>9} {:>9} {:>9} {:>10}\n", "run", "precision", "recall", "f1", "crossing", "far recall");
    for (label, r) in rows {
        let far = r.far_recall().map_or("-".to_string(), |v| format!("{v:.4}"));
        s += &format!(
            "{label:<22} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {far:>10}\n",
            r.precision, r.recall, r.f1, r.crossing_conflict_rate
        );
    }
    s.trim_end().to_string()
}

fn arms_table(arms: &[ArmSummary]) -> String {
    let mut s = format!("{:<22} {:>7} {:>9} {:>10}\n", "variant", "f1", "crossing", "far recall");
    for a in arms {
        let far = a.mean_far_recall.map_or("-".to_string(), |v| format!("{v:.4}"));
        s += &format!("{:<22} {:>7.4} {:>9.4} {far:>10}\n", a.label, a.mean_f1, a.mean_crossing_rate);
    }
    s.trim_end().to_string()
}

fn write_arms(dir: &Path, arms: &[ArmSummary]) -> Result<()> {
    write_json(&dir.join(ARMS_FILE), &arms)?;
    let rows: Vec<(String, MetricsReport)> = arms
        .iter()
        .flat_map(|a| a.runs.iter().map(move |r| (format!("{} seed {}", a.label, r.seed), r.test.clone())))
        .collect();
    let path = dir.join(TABLE_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::Validation(format!("cannot write {}: {e}", path.display())))?;
    write_csv(&rows, file)
}

fn execute(cli: &Cli, cfg: &RunConfig, out: Option<&Path>, stdout: &mut dyn Write) -> Run<()> {
    let pretty = cli.common.pretty;
    match &cli.command {
        Command::Generate => {
            let docs = generate(&cfg.gen)?;
            let dir = out.expect("checked by prepare_out");
            let path = dir.join(DATASET_FILE);
            save_dataset(&docs, &path)?;
            let hash = input_hash(&path)?;
            if pretty {
                emit(stdout, &format!("wrote {} documents to {} (sha256 {hash})", docs.len(), path.display()))
            } else {
                let report = serde_json::json!({"path": path, "n_docs": docs.len(), "sha256": hash});
                emit(stdout, &report.to_string())
            }
        }
        Command::Train { data, eval_data } => {
            let docs = load_dataset(data)?;
            let eval_docs = eval_data.as_deref().map(load_dataset).transpose()?;
            let opts = TrainOptions { eval_set: eval_docs.as_deref(), out_dir: out };
            let (_, record) = train(&docs, &cfg.model, &cfg.train, opts)?;
            let last = record.epochs.last().expect("at least one epoch");
            if pretty {
                let mut s = format!(
                    "trained {} epochs in {:.1} s, final loss {:.6}, running train f1 {:.4}",
                    record.epochs.len(),
                    record.wall_time_secs,
                    last.loss,
                    last.running_train_f1
                );
                if let Some(m) = &last.eval {
                    s += &format!("\n{}", metrics_table(&[("eval".into(), m)]));
                }
                emit(stdout, &s)
            } else {
                let summary = serde_json::json!({
                    "config_hash": record.config_hash,
                    "final_checkpoint_hash": record.final_checkpoint_hash,
                    "final_loss": last.loss,
                    "running_train_f1": last.running_train_f1,
                    "eval": last.eval,
                });
                emit(stdout, &summary.to_string())
            }
        }
        Command::Eval { data, checkpoint, pred } => {
            let docs = load_dataset(data)?;
            let preds = match (checkpoint, pred) {
                (Some(dir), _) => {
                    let (params, model) = load_checkpoint(dir)?;
                    predict_all(&docs, &params, &model)?
                }
                (None, Some(file)) => {
                    let text = fs::read_to_string(file)
                        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", file.display())))?;
                    PredictionFile::parse(&text)?.align(&docs)?
                }
                (None, None) => return Err(Failure::Usage("eval needs --checkpoint or --pred".into())),
            };
            let report = evaluate(&docs, &preds, &cfg.eval.buckets)?;
            if let Some(dir) = out {
                write_json(&dir.join(METRICS_FILE), &report)?;
            }
            if pretty {
                emit(stdout, &metrics_table(&[("eval".into(), &report)]))
            } else {
                emit(stdout, &serde_json::to_string(&report).map_err(Error::from)?)
            }
        }
        Command::Gradcheck => {
            let doc: Document = generate_doc(&cfg.gen, 0)?;
            let params = GoseParams::init(&cfg.model, cfg.train.seed)?;
            let report = gradcheck_loss(&doc, &params, &cfg.model, cfg.gradcheck.h)?;
            let passed = report.max_rel_err < cfg.gradcheck.tolerance;
            let names = GoseParams::NAMES;
            let worst = report.worst.map(|(t, c)| format!("{}[{c}]", names[t]));
            if let Some(dir) = out {
                write_json(&dir.join("gradcheck.json"), &report)?;
            }
            if pretty {
                emit(
                    stdout,
                    &format!(
                        "max relative error {:.3e} at {} over {} coordinates: {}",
                        report.max_rel_err,
                        worst.as_deref().unwrap_or("-"),
                        report.coords_checked,
                        if passed { "ok" } else { "FAILED" }
                    ),
                )?;
            } else {
                let v = serde_json::json!({
                    "max_rel_err": report.max_rel_err,
                    "worst": worst,
                    "analytic": report.analytic,
                    "numeric": report.numeric,
                    "coords_checked": report.coords_checked,
                    "tolerance": cfg.gradcheck.tolerance,
                    "passed": passed,
                });
                emit(stdout, &v.to_string())?;
            }
            if passed {
                Ok(())
            } else {
                Err(Failure::Runtime(format!(
                    "gradient check failed: {:.3e} >= {:.1e}",
                    report.max_rel_err, cfg.gradcheck.tolerance
                )))
            }
        }
        Command::Ablate | Command::SweepK => {
            let arms = if matches!(cli.command, Command::Ablate) {
                ablate(&cfg.model, &cfg.train, &cfg.benchmark(), &cfg.seeds())?
            } else {
                sweep_k(&cfg.model, &cfg.sweep.ks, &cfg.train, &cfg.benchmark(), &cfg.seeds())?
            };
            if let Some(dir) = out {
                write_arms(dir, &arms)?;
            }
            if pretty {
                emit(stdout, &arms_table(&arms))
            } else {
                emit(stdout, &serde_json::to_string(&arms).map_err(Error::from)?)
            }
        }
    }
}

/// Parse `argv`, run the subcommand and return the process exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(stderr, "{text}") } else { write!(stdout, "{text}") };
            return code;
        }
    };
    match run_cli(&cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}\n\nFor more information, try '--help'.");
            EXIT_USAGE
        }
        Err(Failure::Runtime(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_RUNTIME
        }
    }
}

fn run_cli(cli: &Cli, stdout: &mut dyn Write) -> Run<()> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = resolve(cli.common.config.as_deref(), &cli.common.sets, cli.common.seed, env_seed.as_deref())?;
    let inputs = check_inputs(&cli.command)?;
    let name = cli.command.name();
    let needs_out = matches!(cli.command, Command::Generate | Command::Train { .. });
    let out = prepare_out(cli.common.out.as_deref(), needs_out, name)?;
    let manifest = RunManifest {
        command: name.to_string(),
        config_hash: config_hash(&cfg)?,
        seed: cfg.seed.unwrap_or(0),
        versions: Versions { gose: env!("CARGO_PKG_VERSION"), checkpoint: CHECKPOINT_VERSION, dataset: DATASET_SCHEMA },
        config: cfg.clone(),
        inputs,
    };
    if let Some(dir) = &out {
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    }
    log::info!("{name}: config {} seed {}", manifest.config_hash, manifest.seed);
    execute(cli, &cfg, out.as_deref(), stdout)
}
