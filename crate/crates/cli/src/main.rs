// SPDX-License-Identifier: Apache-2.0

//! `spkt`: synthesize EEG data, train the spiking transformer, evaluate,
//! fold and estimate energy.
//!
//! Exit codes: 0 on success, 2 on usage or contract errors, 3 when training
//! fails at runtime. Machine-readable output goes to stdout, logs to stderr.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;
use spkt_core::data::{self, build_windows, load_dataset, split, synth_generate, trial_accuracy, Dataset};
use spkt_core::energy::model_energy_report;
use spkt_core::train::{class_counts, class_weights, evaluate, train, EpochRecord};
use spkt_core::{checkpoint, EnergyConstants, Error, Model, Result, SynthSpec, WindowSet};

use config::{RunConfig, CONFIG_FILE};

const REPORT_FILE: &str = "report.jsonl";
const BEST_CKPT: &str = "best.spkt";
const LAST_CKPT: &str = "last.spkt";

#[derive(Parser)]
#[command(name = "spkt", version, about = "Spiking transformer for EEG person identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-subject EEG dataset.
    Synth {
        #[arg(long)]
        subjects: usize,
        #[arg(long)]
        trials_per_subject: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        duration_s: Option<f64>,
    },
    /// Train a model and write checkpoints plus an epoch report.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Seeds weight init, the split and batch shuffling.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Window and trial accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Also report accuracy after majority vote over each trial.
        #[arg(long)]
        per_trial: bool,
    },
    /// Energy estimate from firing rates measured on validation windows.
    Energy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        t_sim: Option<usize>,
        /// JSON file with `e_mac_pj` and `e_ac_pj`.
        #[arg(long)]
        constants: Option<PathBuf>,
    },
    /// Fold every multi-branch convolution into a single kernel.
    Fold {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a dataset directory or a checkpoint.
    Inspect {
        #[arg(long, conflicts_with = "ckpt", required_unless_present = "ckpt")]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Val,
    All,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 3 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            subjects,
            trials_per_subject,
            seed,
            out,
            snr_db,
            channels,
            duration_s,
        } => {
            let defaults = SynthSpec::default();
            let spec = SynthSpec {
                n_subjects: subjects,
                trials_per_subject,
                seed,
                snr_db: snr_db.unwrap_or(defaults.snr_db),
                channels: channels.unwrap_or(defaults.channels),
                duration_s: duration_s.unwrap_or(defaults.duration_s),
                ..defaults
            };
            let ds = synth_generate(&spec)?;
            data::write_dataset(&out, &ds)?;
            emit(&json!({
                "out": out,
                "subjects": ds.n_subjects(),
                "trials": ds.trials.len(),
                "channels": ds.manifest.channels,
                "sample_rate_hz": ds.manifest.sample_rate_hz,
            }))
        }
        Command::Train {
            data,
            config,
            out,
            epochs,
            seed,
            batch_size,
            lr,
        } => {
            let ds = load_dataset(&data)?;
            let mut cfg = RunConfig::resolve(&ds, config.as_deref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
                cfg.model.seed = s;
                cfg.split.seed = s;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(lr) = lr {
                cfg.train.adam.lr = lr;
            }
            cfg.validate(&ds)?;
            cmd_train(&ds, &cfg, &out)
        }
        Command::Eval {
            data,
            ckpt,
            split,
            per_trial,
        } => cmd_eval(&data, &ckpt, split, per_trial),
        Command::Energy {
            data,
            ckpt,
            t_sim,
            constants,
        } => {
            let constants = match constants {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => EnergyConstants::default(),
            };
            let mut model = checkpoint::load(&ckpt)?;
            if let Some(t) = t_sim {
                if t == 0 {
                    return Err(Error::Config("--t-sim must be at least 1".into()));
                }
                model.cfg.t_sim = t;
            }
            let ds = load_dataset(&data)?;
            let cfg = run_config_for(&ckpt, &ds, &model)?;
            let probe = eval_windows(&ds, &cfg, SplitArg::Val)?;
            let report = model_energy_report(&model, &probe, constants, cfg.train.batch_size)?;
            emit(&report)
        }
        Command::Fold { ckpt, out } => {
            let mut model = checkpoint::load(&ckpt)?;
            model.set_training(false);
            let folded = model.fold()?;
            checkpoint::save(&model, &out)?;
            emit(&json!({ "folded": folded, "out": out, "params": model.count_params() }))
        }
        Command::Inspect { data, ckpt } => match (data, ckpt) {
            (Some(d), _) => inspect_dataset(&load_dataset(&d)?),
            (None, Some(c)) => {
                let model = checkpoint::load(&c)?;
                let tensors: Vec<_> = model
                    .store
                    .iter()
                    .map(|(_, e)| json!({ "name": e.name, "shape": e.value.shape() }))
                    .collect();
                emit(&json!({
                    "config": model.cfg,
                    "params": model.count_params(),
                    "tensors": tensors,
                }))
            }
            (None, None) => Err(Error::Config("inspect needs --data or --ckpt".into())),
        },
    }
}

fn cmd_train(ds: &Dataset, cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let (train_idx, val_idx) = split(&ds.trials, &cfg.split)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.trials[i]).collect::<Vec<_>>();
    let train_set = build_windows(&pick(&train_idx), cfg.window.samples, cfg.window.stride, cfg.normalize)?;
    let val_set = build_windows(&pick(&val_idx), cfg.window.samples, cfg.window.stride, cfg.normalize)?;
    info!(
        "{} train windows from {} trials, {} validation windows from {} trials",
        train_set.len(),
        train_idx.len(),
        val_set.len(),
        val_idx.len()
    );
    let mut model = Model::<f32>::build(&cfg.model)?;
    info!("model has {} parameters", model.count_params());

    let report_path = out.join(REPORT_FILE);
    let mut report = BufWriter::new(File::create(&report_path).map_err(|e| Error::io(&report_path, e))?);
    let best_path = out.join(BEST_CKPT);
    let last_path = out.join(LAST_CKPT);
    let started = Instant::now();
    let mut hook = |rec: &EpochRecord, m: &Model<f32>, improved: bool| -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(report, "{line}").and_then(|_| report.flush()).map_err(|e| Error::io(&report_path, e))?;
        if improved {
            checkpoint::save(m, &best_path)?;
        }
        checkpoint::save(m, &last_path)
    };
    let outcome = train(&mut model, &train_set, &val_set, &cfg.train, &mut hook)?;
    let best = outcome.report.best_epoch.and_then(|e| outcome.report.epochs.iter().find(|r| r.epoch == e));
    emit(&json!({
        "out": out,
        "epochs": outcome.report.epochs.len(),
        "best_epoch": outcome.report.best_epoch,
        "best_val_accuracy": best.map(|r| r.val_accuracy),
        "best_val_loss": best.map(|r| r.val_loss),
        "params": model.count_params(),
        "seconds": started.elapsed().as_secs_f64(),
    }))
}

fn cmd_eval(data: &Path, ckpt: &Path, which: SplitArg, per_trial: bool) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let ds = load_dataset(data)?;
    let cfg = run_config_for(ckpt, &ds, &model)?;
    let set = eval_windows(&ds, &cfg, which)?;
    let weights = class_weights(&class_counts(&set.labels, model.cfg.n_classes)).ok();
    let ev = evaluate(&model, &set, weights.as_deref(), cfg.train.batch_size)?;
    let split_name = match which {
        SplitArg::Val => "val",
        SplitArg::All => "all",
    };
    let dir = ckpt.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let confusion_path = dir.join(format!("confusion_{split_name}.json"));
    write_json(&confusion_path, &ev.confusion)?;
    let trial = if per_trial { Some(trial_accuracy(&set, &ev.logits)?) } else { None };
    emit(&json!({
        "split": split_name,
        "windows": set.len(),
        "loss": ev.loss,
        "accuracy": ev.accuracy,
        "trial_accuracy": trial,
        "per_class_accuracy": ev.per_class_accuracy,
        "firing_rate": ev.firing_rate(),
        "confusion_path": confusion_path,
    }))
}

/// Run config echoed next to the checkpoint, or defaults around the
/// checkpoint's own model config.
fn run_config_for(ckpt: &Path, ds: &Dataset, model: &Model<f32>) -> Result<RunConfig> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let mut cfg = match RunConfig::load(dir)? {
        Some(cfg) => cfg,
        None => {
            let mut cfg = RunConfig::defaults(ds);
            cfg.window.samples = model.cfg.window_samples;
            cfg.window.stride = model.cfg.window_samples;
            cfg
        }
    };
    cfg.model = model.cfg.clone();
    cfg.validate(ds)?;
    Ok(cfg)
}

fn eval_windows(ds: &Dataset, cfg: &RunConfig, which: SplitArg) -> Result<WindowSet> {
    let trials: Vec<_> = match which {
        SplitArg::All => ds.labeled().collect(),
        SplitArg::Val => {
            let (_, val) = split(&ds.trials, &cfg.split)?;
            val.iter().map(|&i| &ds.trials[i]).collect()
        }
    };
    build_windows(&trials, cfg.window.samples, cfg.window.stride, cfg.normalize)
}

fn inspect_dataset(ds: &Dataset) -> Result<()> {
    let window = ds.default_window();
    let trials: Vec<_> = ds
        .trials
        .iter()
        .map(|t| {
            json!({
                "trial_id": t.trial_id,
                "subject_id": t.subject_id,
                "samples": t.n_samples(),
                "windows": t.n_samples() / window.max(1),
            })
        })
        .collect();
    let unlabeled: Vec<_> = ds.unlabeled().map(|t| t.trial_id.as_str()).collect();
    emit(&json!({
        "manifest": ds.manifest,
        "trials": trials,
        "labeled": ds.labeled().count(),
        "unlabeled": unlabeled,
        "default_window": window,
    }))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn emit<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}
